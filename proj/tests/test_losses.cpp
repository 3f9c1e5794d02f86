// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "plgdf/errors.hpp"
#include "plgdf/losses.hpp"
#include "plgdf/semi_ops.hpp"
#include "testutil.hpp"

#include <doctest.h>

using namespace plgdf;
using plgdf::testutil::gradcheck_rel_error;

namespace {

torch::Tensor one_hot_probs(const torch::Tensor& target, std::int64_t C) {
  return torch::one_hot(target, C).movedim(-1, 1).to(torch::kDouble);
}

}  // namespace

TEST_CASE("ce_loss hand values") {
  auto target = torch::zeros({1, 2, 2, 2}, torch::kLong);
  const std::int64_t C = 4;
  auto uniform = torch::full({1, C, 2, 2, 2}, 1.0 / C, torch::kDouble);
  CHECK(ce_loss(uniform, target).item<double>() == doctest::Approx(std::log(C)));

  auto half = torch::full({1, 2, 2, 2, 2}, 0.5, torch::kDouble);
  CHECK(ce_loss(half, torch::zeros({1, 2, 2, 2}, torch::kLong)).item<double>() ==
        doctest::Approx(std::log(2.0)));

  auto perfect = one_hot_probs(target, C);
  CHECK(ce_loss(perfect, target).item<double>() == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("dice_loss hand values") {
  auto target = torch::randint(0, 2, {1, 3, 3, 3});
  auto perfect = one_hot_probs(target, 2);
  CHECK(dice_loss(perfect, target).item<double>() == doctest::Approx(0.0).epsilon(1e-4));

  // 2-voxel binary: p=(1,0) for class1, g=(0,1) -> 1 - eps/(2+eps)
  auto probs = torch::tensor({{0.0, 1.0}, {1.0, 0.0}}, torch::kDouble)
                   .reshape({1, 2, 2, 1, 1});  // class1 probs (1,0)
  auto g = torch::tensor({0L, 1L}).reshape({1, 2, 1, 1});
  const double expected = 1.0 - 1e-5 / (2.0 + 1e-5);
  CHECK(dice_loss(probs, g, 1e-5).item<double>() == doctest::Approx(expected).epsilon(1e-9));

  // disjoint supports -> ~1
  auto p2 = one_hot_probs(1 - target, 2);
  CHECK(dice_loss(p2, target).item<double>() == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("dice_loss stays within [0, 1+delta] on random simplex inputs") {
  for (int i = 0; i < 20; ++i) {
    auto probs = torch::softmax(torch::randn({1, 3, 4, 4, 4}, torch::kDouble), 1);
    auto target = torch::randint(0, 3, {1, 4, 4, 4});
    const double v = dice_loss(probs, target).item<double>();
    CHECK(v >= 0.0);
    CHECK(v <= 1.0 + 1e-4);
  }
}

TEST_CASE("sup_loss is exactly the half-half combination") {
  auto probs = torch::softmax(torch::randn({2, 2, 3, 3, 3}, torch::kDouble), 1);
  auto target = torch::randint(0, 2, {2, 3, 3, 3});
  const double sup = sup_loss(probs, target).item<double>();
  const double ce = ce_loss(probs, target).item<double>();
  const double dc = dice_loss(probs, target).item<double>();
  CHECK(sup == doctest::Approx(0.5 * (ce + dc)).epsilon(1e-12));

  // uniform binary prediction vs half-foreground target -> 0.5(ln2 + dice)
  auto uni = torch::full({1, 2, 2, 1, 1}, 0.5, torch::kDouble);
  auto half_fg = torch::tensor({0L, 1L}).reshape({1, 2, 1, 1});
  const double dice_val = dice_loss(uni, half_fg).item<double>();
  CHECK(sup_loss(uni, half_fg).item<double>() ==
        doctest::Approx(0.5 * (std::log(2.0) + dice_val)).epsilon(1e-12));
}

TEST_CASE("semi_loss composes the CE+Dice pair against the pseudo label") {
  auto pu = torch::softmax(torch::randn({2, 2, 2, 2, 2}, torch::kDouble), 1);
  auto pm = torch::softmax(torch::randn({2, 2, 2, 2, 2}, torch::kDouble), 1);
  auto pseudo = torch::randint(0, 2, {2, 2, 2, 2});

  const double both = semi_loss(pu, pm, pseudo).item<double>();
  const double u_only = sup_loss(pu, pseudo).item<double>();
  const double m_only = sup_loss(pm, pseudo).item<double>();
  CHECK(both == doctest::Approx(u_only + m_only).epsilon(1e-12));

  CHECK(semi_loss(pu, pu, pseudo).item<double>() == doctest::Approx(2 * u_only).epsilon(1e-12));
  CHECK(semi_loss(pu, std::nullopt, pseudo).item<double>() == doctest::Approx(u_only));

  auto perfect = one_hot_probs(pseudo, 2);
  CHECK(semi_loss(perfect, perfect, pseudo).item<double>() ==
        doctest::Approx(0.0).epsilon(1e-4));
}

TEST_CASE("sharp_loss hand values") {
  auto p = torch::softmax(torch::randn({1, 2, 3, 3, 3}, torch::kDouble), 1);
  CHECK(sharp_loss(p, p).item<double>() == doctest::Approx(0.0));

  auto a = torch::full({1, 2, 2, 2, 2}, 0.25, torch::kDouble);
  auto b = torch::full({1, 2, 2, 2, 2}, 0.55, torch::kDouble);
  CHECK(sharp_loss(a, b).item<double>() == doctest::Approx(0.09).epsilon(1e-12));  // d^2

  // 1-voxel worked value: [0.8,0.2] vs sharpen(T=0.1) -> 0.0399996
  auto probs = torch::tensor({0.8, 0.2}).reshape({1, 2, 1, 1, 1});
  auto soft = sharpen(probs, 0.1);
  CHECK(sharp_loss(probs, soft).item<double>() == doctest::Approx(0.0399996).epsilon(1e-4));
}

TEST_CASE("consis_loss: zero iff scales agree, frozen worked value") {
  auto p = torch::softmax(torch::randn({1, 2, 2, 2, 2}, torch::kDouble), 1);
  const double same = consis_loss({p, p, p, p}).item<double>();
  CHECK(same == doctest::Approx(0.0).epsilon(1e-9));

  // 1 voxel, 2 classes, 2 scales: P1=[0.6,0.4], P2=[0.8,0.2] -> 0.16558
  auto p1 = torch::tensor({0.6, 0.4}).reshape({1, 2, 1, 1, 1});
  auto p2 = torch::tensor({0.8, 0.2}).reshape({1, 2, 1, 1, 1});
  const double v = consis_loss({p1, p2}).item<double>();
  CHECK(v == doctest::Approx(0.16558).epsilon(1e-4 / 0.16558));

  CHECK_THROWS(consis_loss({p1}));
}

TEST_CASE("consis_loss is permutation-invariant over scales and monotone") {
  auto a = torch::softmax(torch::randn({1, 3, 2, 2, 2}, torch::kDouble), 1);
  auto b = torch::softmax(torch::randn({1, 3, 2, 2, 2}, torch::kDouble), 1);
  auto c = torch::softmax(torch::randn({1, 3, 2, 2, 2}, torch::kDouble), 1);
  const double abc = consis_loss({a, b, c}).item<double>();
  const double cab = consis_loss({c, a, b}).item<double>();
  const double bca = consis_loss({b, c, a}).item<double>();
  CHECK(abc == doctest::Approx(cab).epsilon(1e-12));
  CHECK(abc == doctest::Approx(bca).epsilon(1e-12));

  // one-hot vs uniform disagreement far exceeds near-identical scales
  auto onehot = one_hot_probs(torch::zeros({1, 2, 2, 2}, torch::kLong), 2).clamp(1e-6, 1.0);
  onehot = onehot / onehot.sum(1, true);
  auto uniform = torch::full({1, 2, 2, 2, 2}, 0.5, torch::kDouble);
  auto nearly = uniform + 1e-4 * (onehot - uniform);
  nearly = nearly / nearly.sum(1, true);
  CHECK(consis_loss({onehot, uniform}).item<double>() >
        10.0 * consis_loss({nearly, uniform}).item<double>());
}

TEST_CASE("consis_loss config variants change the reduction as documented") {
  auto p1 = torch::softmax(torch::randn({1, 2, 2, 2, 2}, torch::kDouble), 1);
  auto p2 = torch::softmax(torch::randn({1, 2, 2, 2, 2}, torch::kDouble), 1);
  ConsisOptions lit;
  lit.norm = ConsisNorm::squared_l2;
  lit.d_term = ConsisDTerm::sum;  // the literal paper reduction
  const double a = consis_loss({p1, p2}).item<double>();
  const double b = consis_loss({p1, p2}, lit).item<double>();
  CHECK(a != doctest::Approx(b));
}

TEST_CASE("rampup_weight evaluates the Gaussian warm-up exactly") {
  CHECK(rampup_weight(0.1, 100, 100) == doctest::Approx(0.1));
  CHECK(rampup_weight(0.1, 0, 100) == doctest::Approx(6.7379e-4).epsilon(1e-4));
  CHECK(rampup_weight(0.1, 50, 100) == doctest::Approx(0.028650).epsilon(1e-4));
  CHECK(rampup_weight(0.1, 250, 100) == doctest::Approx(0.1));  // clamped past t_max

  // scale invariance: weight depends only on t/t_max
  for (std::int64_t k : {1, 3, 7}) {
    CHECK(rampup_weight(0.3, 20, 80) ==
          doctest::Approx(rampup_weight(0.3, 20 * k, 80 * k)).epsilon(1e-12));
  }
  CHECK_THROWS(rampup_weight(0.1, 0, 0));
}

TEST_CASE("total_loss arithmetic, toggles and non-finite diagnostics") {
  auto t = [](double v) { return torch::tensor(v, torch::kDouble); };
  LossTerms terms;
  terms.sup = t(1.0);
  terms.semi = t(0.5);
  terms.sharp = t(0.2);
  terms.consis = t(0.3);
  auto [total, rep] = total_loss(terms, 0.1);
  CHECK(total.item<double>() == doctest::Approx(1.55).epsilon(1e-12));
  CHECK(rep.l_total == doctest::Approx(rep.l_sup + rep.l_semi + 0.1 * (rep.l_sharp + rep.l_consis))
                           .epsilon(1e-6));

  LossTerms sup_only;
  sup_only.sup = t(1.0);
  auto [total2, rep2] = total_loss(sup_only, 0.9);
  CHECK(total2.item<double>() == doctest::Approx(1.0));
  CHECK(rep2.l_semi == 0.0);
  CHECK(rep2.l_consis == 0.0);

  auto [total3, rep3] = total_loss(terms, 0.0);
  (void)rep3;
  CHECK(total3.item<double>() == doctest::Approx(1.5));  // lambda 0 drops sharp+consis

  // semi_rampup scales the semi term but reports the raw value
  auto [total4, rep4] = total_loss(terms, 0.1, /*semi_rampup=*/true);
  CHECK(total4.item<double>() == doctest::Approx(1.0 + 0.1 * 0.5 + 0.1 * 0.5).epsilon(1e-12));
  CHECK(rep4.l_semi == doctest::Approx(0.5));

  terms.sharp = t(std::numeric_limits<double>::quiet_NaN());
  try {
    total_loss(terms, 0.1);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("l_sharp") != std::string::npos);
  }
}

TEST_CASE("gradient check: every loss term vs central finite differences") {
  torch::manual_seed(77);
  const auto opts = torch::TensorOptions().dtype(torch::kDouble);
  auto logits_u = torch::randn({1, 2, 2, 2, 2}, opts);
  auto logits_m = torch::randn({1, 2, 2, 2, 2}, opts);
  auto target = torch::randint(0, 2, {1, 2, 2, 2});
  auto pseudo = torch::randint(0, 2, {1, 2, 2, 2});
  auto soft_const = sharpen(torch::softmax(logits_u, 1), 0.1);

  SUBCASE("sup") {
    auto fn = [&](const torch::Tensor& lg) { return sup_loss(torch::softmax(lg, 1), target); };
    CHECK(gradcheck_rel_error(fn, logits_u) < 1e-3);
  }
  SUBCASE("semi") {
    auto fn = [&](const torch::Tensor& lg) {
      return semi_loss(torch::softmax(lg, 1), torch::softmax(logits_m, 1), pseudo);
    };
    CHECK(gradcheck_rel_error(fn, logits_u) < 1e-3);
  }
  SUBCASE("sharp") {
    auto fn = [&](const torch::Tensor& lg) {
      return sharp_loss(torch::softmax(lg, 1), soft_const);
    };
    CHECK(gradcheck_rel_error(fn, logits_u) < 1e-3);
  }
  SUBCASE("consis, rectification constants frozen at the base point") {
    auto base_maps = std::vector<torch::Tensor>{torch::softmax(logits_u, 1),
                                                torch::softmax(logits_m, 1)};
    auto phat0 = ((base_maps[0] + base_maps[1]) / 2.0).detach();
    auto log_phat0 = phat0.clamp_min(kProbFloor).log();
    std::vector<torch::Tensor> w0;
    for (const auto& P : base_maps) {
      auto D = (P.detach() * (P.detach().clamp_min(kProbFloor).log() - log_phat0)).sum(1);
      w0.push_back((-D).exp());
    }
    auto fn = [&](const torch::Tensor& lg) {
      std::vector<torch::Tensor> maps{torch::softmax(lg, 1),
                                      torch::softmax(logits_m, 1)};
      return consis_loss_with_constants(maps, w0, phat0);
    };
    CHECK(gradcheck_rel_error(fn, logits_u) < 1e-3);

    // the production entry point computes exactly these constants
    auto via_public = consis_loss(base_maps).item<double>();
    auto via_frozen = consis_loss_with_constants(base_maps, w0, phat0).item<double>();
    CHECK(via_public == doctest::Approx(via_frozen).epsilon(1e-12));
  }
  SUBCASE("total") {
    // Rectification constants frozen at the base point, matching what the
    // training step differentiates.
    auto pm = torch::softmax(logits_m, 1);
    auto base_maps = std::vector<torch::Tensor>{torch::softmax(logits_u, 1), pm};
    auto phat0 = ((base_maps[0] + base_maps[1]) / 2.0).detach();
    auto log_phat0 = phat0.clamp_min(kProbFloor).log();
    std::vector<torch::Tensor> w0;
    for (const auto& P : base_maps) {
      auto D = (P.detach() * (P.detach().clamp_min(kProbFloor).log() - log_phat0)).sum(1);
      w0.push_back((-D).exp());
    }
    auto fn = [&](const torch::Tensor& lg) {
      auto pu = torch::softmax(lg, 1);
      LossTerms terms;
      terms.sup = sup_loss(pu, target);
      terms.semi = semi_loss(pu, pm, pseudo);
      terms.sharp = sharp_loss(pu, soft_const);
      terms.consis = consis_loss_with_constants({pu, pm}, w0, phat0);
      return terms.sup.value() + terms.semi.value() +
             0.1 * (terms.sharp.value() + terms.consis.value());
    };
    CHECK(gradcheck_rel_error(fn, logits_u) < 1e-3);
  }
}
