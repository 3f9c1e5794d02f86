// SPDX-License-Identifier: Apache-2.0
#ifndef PLGDF_ERRORS_HPP
#define PLGDF_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace plgdf {

// Bad user input: malformed config, invalid flag combinations, broken
// manifests. The CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite losses or gradients at runtime. CLI exit code 3.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace plgdf

#endif  // PLGDF_ERRORS_HPP
