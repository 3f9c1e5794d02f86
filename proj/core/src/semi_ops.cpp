// SPDX-License-Identifier: Apache-2.0
#include "plgdf/semi_ops.hpp"

#include <random>
#include <vector>

#include "plgdf/errors.hpp"
#include "plgdf/losses.hpp"
#include "plgdf/rng.hpp"

namespace plgdf {

torch::Tensor add_noise(const torch::Tensor& patch, double sigma, double clip,
                        std::uint64_t rng_seed) {
  if (sigma < 0 || clip < 0)
    throw std::invalid_argument("add_noise: sigma and clip must be >= 0");
  if (sigma == 0.0) return patch.clone();
  auto rng = std::mt19937_64(rng_seed);
  std::normal_distribution<double> gauss(0.0, sigma);
  torch::Tensor noise = torch::empty(patch.sizes(), torch::kDouble);
  auto* buf = noise.data_ptr<double>();
  const auto n = noise.numel();
  for (std::int64_t i = 0; i < n; ++i) buf[i] = std::clamp(gauss(rng), -clip, clip);
  return patch + noise.to(patch.dtype());
}

torch::Tensor argmax_lowest(const torch::Tensor& probs, std::int64_t dim) {
  // lowest class index wins ties: strict > comparison while scanning up
  auto x = probs.detach();
  auto best = x.select(dim, 0).clone();
  auto idx = torch::zeros(best.sizes(), torch::kLong);
  for (std::int64_t c = 1; c < x.size(dim); ++c) {
    auto cand = x.select(dim, c);
    auto better = cand > best;
    best = torch::where(better, cand, best);
    idx = torch::where(better, torch::full_like(idx, c), idx);
  }
  return idx;
}

torch::Tensor make_pseudo_label(const torch::Tensor& teacher_probs_1,
                                const torch::Tensor& teacher_probs_2,
                                std::int64_t class_dim) {
  if (!teacher_probs_1.sizes().equals(teacher_probs_2.sizes()))
    throw std::invalid_argument("make_pseudo_label: teacher map shapes differ");
  auto avg = (teacher_probs_1.detach() + teacher_probs_2.detach()) / 2.0;
  return argmax_lowest(avg, class_dim);
}

torch::Tensor mix_apply(const torch::Tensor& unlabeled_patch,
                        const torch::Tensor& labeled_patch, double lambda_eff) {
  if (!unlabeled_patch.sizes().equals(labeled_patch.sizes()))
    throw std::invalid_argument("mix: patch shapes differ");
  return lambda_eff * unlabeled_patch + (1.0 - lambda_eff) * labeled_patch;
}

std::pair<torch::Tensor, MixParams> mix(const torch::Tensor& unlabeled_patch,
                                        const torch::Tensor& labeled_patch,
                                        double mix_alpha, std::uint64_t rng_seed) {
  if (!(mix_alpha > 0)) throw std::invalid_argument("mix: mix_alpha must be > 0");
  auto rng = std::mt19937_64(rng_seed);
  std::gamma_distribution<double> gamma(mix_alpha, 1.0);
  const double g1 = gamma(rng);
  const double g2 = gamma(rng);
  MixParams p;
  p.mix_alpha = mix_alpha;
  p.lambda_raw = (g1 + g2) > 0 ? g1 / (g1 + g2) : 0.5;
  p.lambda_eff = std::max(p.lambda_raw, 1.0 - p.lambda_raw);
  return {mix_apply(unlabeled_patch, labeled_patch, p.lambda_eff), p};
}

torch::Tensor sharpen(const torch::Tensor& probs, double temperature,
                      std::int64_t class_dim) {
  if (!(temperature > 0)) throw std::invalid_argument("sharpen: temperature must be > 0");
  auto p = probs.detach();
  // Dividing by the channel max before the power keeps p^(1/T) away from
  // underflow; algebraically identical after renormalization.
  auto pmax = std::get<0>(p.max(class_dim, /*keepdim=*/true)).clamp_min(kProbFloor);
  auto powed = (p / pmax).pow(1.0 / temperature);
  return powed / powed.sum(class_dim, /*keepdim=*/true);
}

}  // namespace plgdf
