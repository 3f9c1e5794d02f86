// SPDX-License-Identifier: Apache-2.0
#ifndef PLGDF_SEMI_OPS_HPP
#define PLGDF_SEMI_OPS_HPP

#include <torch/torch.h>

#include <cstdint>
#include <utility>

namespace plgdf {

// patch + clamp(N(0, sigma), -clip, +clip), elementwise. Output dtype and
// shape follow the input.
torch::Tensor add_noise(const torch::Tensor& patch, double sigma, double clip,
                        std::uint64_t rng_seed);

// Per-voxel argmax of the two-map average; ties break to the lowest class
// index. Inputs are (..., C, spatial...) with the class dim given; the
// result carries no gradient.
torch::Tensor make_pseudo_label(const torch::Tensor& teacher_probs_1,
                                const torch::Tensor& teacher_probs_2,
                                std::int64_t class_dim = 1);

// Argmax with the lowest-index tie-break over `dim`.
torch::Tensor argmax_lowest(const torch::Tensor& probs, std::int64_t dim);

struct MixParams {
  double mix_alpha = 0.4;
  double lambda_raw = 0.5;
  double lambda_eff = 0.5;  // max(lambda, 1-lambda), >= 0.5
};

// lambda_eff * unlabeled + (1 - lambda_eff) * labeled.
torch::Tensor mix_apply(const torch::Tensor& unlabeled_patch,
                        const torch::Tensor& labeled_patch, double lambda_eff);

// Draws lambda ~ Beta(mix_alpha, mix_alpha) and blends, biased toward the
// unlabeled patch. The unlabeled patch's pseudo-label is the target of the
// result.
std::pair<torch::Tensor, MixParams> mix(const torch::Tensor& unlabeled_patch,
                                        const torch::Tensor& labeled_patch,
                                        double mix_alpha, std::uint64_t rng_seed);

// Temperature sharpening: p_j <- p_j^(1/T) / sum_k p_k^(1/T) across the
// class dim (the two-class case reduces to p^(1/T)/(p^(1/T)+(1-p)^(1/T))).
// The result is detached — it is a constant target.
torch::Tensor sharpen(const torch::Tensor& probs, double temperature,
                      std::int64_t class_dim = 1);

}  // namespace plgdf

#endif  // PLGDF_SEMI_OPS_HPP
