// SPDX-License-Identifier: Apache-2.0
#ifndef PLGDF_LOSSES_HPP
#define PLGDF_LOSSES_HPP

#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace plgdf {

inline constexpr double kProbFloor = 1e-12;
inline constexpr double kDiceEps = 1e-5;

// Mean over voxels of -log p[target]. probs is (N,C,spatial...), target
// (N,spatial...) int64.
torch::Tensor ce_loss(const torch::Tensor& probs, const torch::Tensor& target);

// Per foreground class 1 - (2*sum(p*g)+eps)/(sum(p^2)+sum(g^2)+eps),
// averaged over foreground classes.
torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& target,
                        double eps = kDiceEps);

// 0.5*CE + 0.5*Dice.
torch::Tensor sup_loss(const torch::Tensor& probs, const torch::Tensor& target);

// sup-style loss of the unlabeled prediction against the pseudo label plus,
// when present, the same for the mixed prediction against the same pseudo
// label.
torch::Tensor semi_loss(const torch::Tensor& probs_u,
                        const std::optional<torch::Tensor>& probs_mix,
                        const torch::Tensor& pseudo);

// Mean over voxels and channels of squared difference to the (constant)
// sharpened target.
torch::Tensor sharp_loss(const torch::Tensor& student_probs,
                         const torch::Tensor& soft_label);

enum class ConsisNorm { l2, squared_l2 };
enum class ConsisDTerm { mean, sum };

struct ConsisOptions {
  ConsisNorm norm = ConsisNorm::l2;
  ConsisDTerm d_term = ConsisDTerm::mean;  // `sum` is the literal paper form
};

// Multi-scale output consistency: with P_hat the scale average and
// D_s^i = sum_j P_s^{i,j} log(P_s^{i,j}/P_hat^{i,j}),
//   (1/n) sum_s [ sum_i ||P_s^i - P_hat^i|| e^{-D_s^i} / sum_i e^{-D_s^i}
//                 + reduce_i D_s^i ].
// The rectification weights e^{-D} and the P_hat inside D are gradient
// constants. maps are (N,C,spatial...) probability tensors.
torch::Tensor consis_loss(const std::vector<torch::Tensor>& maps,
                          const ConsisOptions& opts = {});

// Same objective with the gradient-constant pieces passed in explicitly;
// consis_loss derives them from `maps` and delegates here. Exposed so the
// finite-difference check can perturb inputs while holding the constants
// fixed, which is the function training actually differentiates.
torch::Tensor consis_loss_with_constants(const std::vector<torch::Tensor>& maps,
                                         const std::vector<torch::Tensor>& rect_weights,
                                         const torch::Tensor& phat_const,
                                         const ConsisOptions& opts = {});

// w * exp(-5 (1 - t/t_max)^2), t clamped to [0, t_max].
double rampup_weight(double final_weight, std::int64_t t, std::int64_t t_max);

struct LossReport {
  double l_sup = 0.0;
  double l_semi = 0.0;
  double l_sharp = 0.0;
  double l_consis = 0.0;
  double l_total = 0.0;
  double weight = 0.0;  // lambda(t)
};

struct LossTerms {
  std::optional<torch::Tensor> sup;
  std::optional<torch::Tensor> semi;
  std::optional<torch::Tensor> sharp;
  std::optional<torch::Tensor> consis;
};

// l_total = l_sup + l_semi + lambda*(l_sharp + l_consis); disabled terms
// enter as zero. When semi_rampup is set l_semi is also scaled by lambda
// (the report keeps the raw value). Throws NumericalError naming the first
// non-finite term.
std::pair<torch::Tensor, LossReport> total_loss(const LossTerms& terms,
                                                double lambda_t,
                                                bool semi_rampup = false);

}  // namespace plgdf

#endif  // PLGDF_LOSSES_HPP
