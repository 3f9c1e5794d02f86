// SPDX-License-Identifier: Apache-2.0
#ifndef PLGDF_RNG_HPP
#define PLGDF_RNG_HPP

#include <cstdint>
#include <random>

namespace plgdf {

// Every stochastic draw in the pipeline comes from a stream derived from
// (seed, purpose tag, step[, index]). Streams are stateless between steps,
// which is what makes checkpoint-resume and prefetch order-independence
// bit-exact.
enum class RngTag : std::uint64_t {
  init = 1,
  batch = 2,
  patch = 3,
  noise_a = 4,
  noise_b = 5,
  mix = 6,
  phantom = 7,
  phantom_noise = 8,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, RngTag tag,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(tag));
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  return h;
}

inline std::mt19937_64 make_rng(std::uint64_t seed, RngTag tag,
                                std::uint64_t a = 0, std::uint64_t b = 0) {
  return std::mt19937_64(derive_seed(seed, tag, a, b));
}

}  // namespace plgdf

#endif  // PLGDF_RNG_HPP
