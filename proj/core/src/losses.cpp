// SPDX-License-Identifier: Apache-2.0
#include "plgdf/losses.hpp"

#include <cmath>

#include "plgdf/errors.hpp"

namespace plgdf {

namespace {

void check_probs_target(const torch::Tensor& probs, const torch::Tensor& target) {
  TORCH_CHECK(probs.dim() == target.dim() + 1,
              "probs must be (N,C,spatial...), target (N,spatial...)");
  TORCH_CHECK(probs.size(0) == target.size(0), "batch size mismatch: ", probs.size(0),
              " vs ", target.size(0));
  for (std::int64_t d = 1; d < target.dim(); ++d)
    TORCH_CHECK(probs.size(d + 1) == target.size(d), "spatial shape mismatch at dim ", d);
}

}  // namespace

torch::Tensor ce_loss(const torch::Tensor& probs, const torch::Tensor& target) {
  check_probs_target(probs, target);
  auto picked = probs.gather(1, target.unsqueeze(1)).squeeze(1);
  return -picked.clamp_min(kProbFloor).log().mean();
}

torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& target,
                        double eps) {
  check_probs_target(probs, target);
  TORCH_CHECK(eps > 0, "dice_loss: eps must be > 0");
  const std::int64_t C = probs.size(1);
  torch::Tensor total = torch::zeros({}, probs.options());
  for (std::int64_t c = 1; c < C; ++c) {
    auto p = probs.select(1, c);
    auto g = (target == c).to(probs.dtype());
    auto num = 2.0 * (p * g).sum() + eps;
    auto den = (p * p).sum() + (g * g).sum() + eps;
    total = total + (1.0 - num / den);
  }
  return total / static_cast<double>(C - 1);
}

torch::Tensor sup_loss(const torch::Tensor& probs, const torch::Tensor& target) {
  return 0.5 * ce_loss(probs, target) + 0.5 * dice_loss(probs, target);
}

torch::Tensor semi_loss(const torch::Tensor& probs_u,
                        const std::optional<torch::Tensor>& probs_mix,
                        const torch::Tensor& pseudo) {
  auto loss = sup_loss(probs_u, pseudo);
  if (probs_mix) {
    TORCH_CHECK(probs_mix->sizes().equals(probs_u.sizes()),
                "semi_loss: mixed prediction shape differs from unlabeled prediction");
    loss = loss + sup_loss(*probs_mix, pseudo);
  }
  return loss;
}

torch::Tensor sharp_loss(const torch::Tensor& student_probs,
                         const torch::Tensor& soft_label) {
  TORCH_CHECK(student_probs.sizes().equals(soft_label.sizes()),
              "sharp_loss: shape mismatch");
  return (student_probs - soft_label.detach()).pow(2).mean();
}

torch::Tensor consis_loss_with_constants(const std::vector<torch::Tensor>& maps,
                                         const std::vector<torch::Tensor>& rect_weights,
                                         const torch::Tensor& phat_const,
                                         const ConsisOptions& opts) {
  TORCH_CHECK(maps.size() >= 2, "consis_loss needs at least 2 scales, got ", maps.size());
  TORCH_CHECK(rect_weights.size() == maps.size(), "one rectification map per scale");
  const auto n = static_cast<std::int64_t>(maps.size());

  torch::Tensor phat = maps[0];
  for (std::int64_t s = 1; s < n; ++s) phat = phat + maps[s];
  phat = phat / static_cast<double>(n);

  auto log_phat_const = phat_const.clamp_min(kProbFloor).log();
  torch::Tensor loss = torch::zeros({}, maps[0].options());
  for (std::int64_t s = 0; s < n; ++s) {
    const auto& P = maps[s];
    TORCH_CHECK(P.sizes().equals(maps[0].sizes()), "consis_loss: scale ", s,
                " has mismatched shape");
    auto D = (P * (P.clamp_min(kProbFloor).log() - log_phat_const)).sum(1);
    auto diff2 = (P - phat).pow(2).sum(1);
    auto dist = opts.norm == ConsisNorm::l2 ? diff2.clamp_min(1e-30).sqrt() : diff2;
    const auto& w = rect_weights[s];
    auto rectified = (dist * w).sum() / w.sum();
    auto d_term = opts.d_term == ConsisDTerm::mean ? D.mean() : D.sum();
    loss = loss + rectified + d_term;
  }
  return loss / static_cast<double>(n);
}

torch::Tensor consis_loss(const std::vector<torch::Tensor>& maps,
                          const ConsisOptions& opts) {
  TORCH_CHECK(maps.size() >= 2, "consis_loss needs at least 2 scales, got ", maps.size());
  const auto n = static_cast<std::int64_t>(maps.size());
  torch::Tensor phat_const = maps[0].detach().clone();
  for (std::int64_t s = 1; s < n; ++s) phat_const += maps[s].detach();
  phat_const /= static_cast<double>(n);

  // e^{-D} weights are constants with respect to gradients, as is the scale
  // average inside D.
  auto log_phat = phat_const.clamp_min(kProbFloor).log();
  std::vector<torch::Tensor> weights;
  weights.reserve(maps.size());
  for (const auto& P : maps) {
    auto pd = P.detach();
    auto D = (pd * (pd.clamp_min(kProbFloor).log() - log_phat)).sum(1);
    weights.push_back((-D).exp());
  }
  return consis_loss_with_constants(maps, weights, phat_const, opts);
}

double rampup_weight(double final_weight, std::int64_t t, std::int64_t t_max) {
  if (t_max <= 0) throw std::invalid_argument("rampup_weight: t_max must be > 0");
  if (t < 0) throw std::invalid_argument("rampup_weight: t must be >= 0");
  const double frac = std::min<double>(1.0, static_cast<double>(t) / static_cast<double>(t_max));
  return final_weight * std::exp(-5.0 * (1.0 - frac) * (1.0 - frac));
}

std::pair<torch::Tensor, LossReport> total_loss(const LossTerms& terms,
                                                double lambda_t, bool semi_rampup) {
  LossReport report;
  report.weight = lambda_t;

  torch::TensorOptions opts = torch::kFloat32;
  for (const auto* t : {&terms.sup, &terms.semi, &terms.sharp, &terms.consis})
    if (t->has_value()) opts = (*t)->options();
  auto zero = torch::zeros({}, opts);

  auto component = [&](const std::optional<torch::Tensor>& t, const char* name,
                       double& slot) {
    if (!t) {
      slot = 0.0;
      return zero;
    }
    slot = t->item<double>();
    if (!std::isfinite(slot))
      throw NumericalError(std::string("non-finite loss component: ") + name + " = " +
                           std::to_string(slot));
    return *t;
  };

  auto sup = component(terms.sup, "l_sup", report.l_sup);
  auto semi = component(terms.semi, "l_semi", report.l_semi);
  auto sharp = component(terms.sharp, "l_sharp", report.l_sharp);
  auto consis = component(terms.consis, "l_consis", report.l_consis);

  auto total = sup + (semi_rampup ? lambda_t * semi : semi) + lambda_t * (sharp + consis);
  report.l_total = total.item<double>();
  if (!std::isfinite(report.l_total))
    throw NumericalError("non-finite total loss: " + std::to_string(report.l_total));
  return {total, report};
}

}  // namespace plgdf
