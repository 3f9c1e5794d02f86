// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "plgdf/semi_ops.hpp"

#include <doctest.h>

using namespace plgdf;

TEST_CASE("add_noise: zero sigma is the identity") {
  auto x = torch::rand({2, 1, 4, 4, 4});
  auto y = add_noise(x, 0.0, 0.2, 42);
  CHECK(torch::equal(x, y));
}

TEST_CASE("add_noise: every deviation is within the clip bound") {
  auto x = torch::zeros({4, 4, 4});
  auto y = add_noise(x, 0.5, 0.2, 7);
  CHECK(y.abs().max().item<double>() <= 0.2 * (1 + 1e-6));  // float32 rounding at the bound
  CHECK_FALSE(torch::equal(add_noise(x, 0.5, 0.2, 7), add_noise(x, 0.5, 0.2, 8)));
  CHECK(torch::equal(add_noise(x, 0.5, 0.2, 7), add_noise(x, 0.5, 0.2, 7)));
}

TEST_CASE("add_noise: clipped-Gaussian deviation std matches the closed form") {
  // For N(0, s) clipped at c = 2s:
  //   E[X^2] = s^2 ((2 Phi(2) - 1) - 4 phi(2)) + c^2 2(1 - Phi(2)) => std = 0.095945 s/0.1
  const double phi2 = std::exp(-2.0) / std::sqrt(2.0 * M_PI);
  const double Phi2 = 0.5 * (1.0 + std::erf(2.0 / std::sqrt(2.0)));
  const double var = 0.01 * ((2 * Phi2 - 1) - 4 * phi2) + 0.04 * 2 * (1 - Phi2);
  const double expected_std = std::sqrt(var);
  CHECK(expected_std == doctest::Approx(0.0959446).epsilon(1e-4));

  auto x = torch::zeros({100, 100, 100});
  auto y = add_noise(x, 0.1, 0.2, 2024);
  const double measured = y.std(/*unbiased=*/false).item<double>();
  CHECK(std::abs(measured - expected_std) < 0.002);
}

TEST_CASE("make_pseudo_label averages then argmaxes, ties to lowest index") {
  auto t1 = torch::tensor({0.7f, 0.3f}).reshape({1, 2, 1, 1, 1});
  auto t2 = torch::tensor({0.6f, 0.4f}).reshape({1, 2, 1, 1, 1});
  CHECK(make_pseudo_label(t1, t2).item<std::int64_t>() == 0);  // avg [0.65,0.35]

  auto t3 = torch::tensor({0.6f, 0.4f}).reshape({1, 2, 1, 1, 1});
  auto t4 = torch::tensor({0.4f, 0.6f}).reshape({1, 2, 1, 1, 1});
  CHECK(make_pseudo_label(t3, t4).item<std::int64_t>() == 0);  // tie [0.5,0.5]

  auto onehot = torch::tensor({0.0f, 1.0f}).reshape({1, 2, 1, 1, 1});
  auto lbl = make_pseudo_label(onehot, onehot);
  CHECK(lbl.item<std::int64_t>() == 1);
  CHECK_FALSE(lbl.requires_grad());

  auto bad = torch::rand({1, 3, 2, 2, 2});
  CHECK_THROWS_AS(make_pseudo_label(t1, bad), std::invalid_argument);
}

TEST_CASE("argmax_lowest prefers the lowest class index on exact ties") {
  auto p = torch::tensor({{0.4f, 0.4f, 0.2f}}).reshape({1, 3, 1});
  CHECK(argmax_lowest(p, 1).item<std::int64_t>() == 0);
  auto q = torch::tensor({{0.1f, 0.4f, 0.5f}}).reshape({1, 3, 1});
  CHECK(argmax_lowest(q, 1).item<std::int64_t>() == 2);
}

TEST_CASE("mix_apply evaluates the convex blend") {
  auto u = torch::full({2, 2, 2}, 2.0f);
  auto l = torch::zeros({2, 2, 2});
  auto m = mix_apply(u, l, 0.7);  // lambda 0.3 -> lambda' 0.7 -> 1.4
  CHECK(m.mean().item<double>() == doctest::Approx(1.4));
  CHECK_THROWS_AS(mix_apply(u, torch::zeros({3, 3, 3}), 0.5), std::invalid_argument);
}

TEST_CASE("mix: lambda_eff >= 0.5, convex bounds, identical inputs fixed point") {
  auto u = torch::rand({4, 4, 4});
  auto l = torch::rand({4, 4, 4});
  for (std::uint64_t seed = 0; seed < 32; ++seed) {
    auto [m, params] = mix(u, l, 0.4, seed);
    CHECK(params.lambda_eff >= 0.5);
    CHECK(params.lambda_eff <= 1.0);
    CHECK(params.lambda_eff ==
          doctest::Approx(std::max(params.lambda_raw, 1 - params.lambda_raw)));
    auto lo = torch::min(u, l) - 1e-6;
    auto hi = torch::max(u, l) + 1e-6;
    CHECK(((m >= lo) & (m <= hi)).all().item<bool>());
  }
  auto [same, p2] = mix(u, u, 0.4, 11);
  (void)p2;
  CHECK(torch::allclose(same, u, 1e-6, 1e-6));
  auto [rep_a, pa] = mix(u, l, 0.4, 5);
  auto [rep_b, pb] = mix(u, l, 0.4, 5);
  CHECK(pa.lambda_raw == pb.lambda_raw);
  CHECK(torch::equal(rep_a, rep_b));
}

TEST_CASE("sharpen: fixed points and the frozen worked value") {
  auto half = torch::tensor({0.5, 0.5}).reshape({1, 2, 1});
  CHECK(torch::allclose(sharpen(half, 0.1), half, 1e-12, 1e-12));

  auto hard = torch::tensor({0.0, 1.0}).reshape({1, 2, 1});
  CHECK(torch::allclose(sharpen(hard, 0.37), hard, 1e-12, 1e-12));

  // p=0.8, T=0.1: 0.8^10/(0.8^10+0.2^10) = 0.9999990463
  auto p = torch::tensor({0.8, 0.2}).reshape({1, 2, 1});
  auto s = sharpen(p, 0.1);
  CHECK(s[0][0][0].item<double>() == doctest::Approx(0.9999990463).epsilon(1e-6));
  CHECK(s[0][1][0].item<double>() == doctest::Approx(1.0 - 0.9999990463).epsilon(1e-3));

  CHECK_THROWS_AS(sharpen(p, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(sharpen(p, -1.0), std::invalid_argument);
}

TEST_CASE("sharpen: T=1 is the identity and output stays a simplex") {
  auto p = torch::softmax(torch::randn({2, 4, 3, 3, 3}, torch::kDouble), 1);
  auto s1 = sharpen(p, 1.0);
  CHECK(torch::allclose(s1, p, 1e-10, 1e-12));
  auto s = sharpen(p, 0.25);
  auto sums = s.sum(1);
  CHECK((sums - 1.0).abs().max().item<double>() < 1e-10);
  CHECK(s.min().item<double>() >= 0.0);
  CHECK_FALSE(s.requires_grad());
}

TEST_CASE("sharpen preserves order: p < q implies sharpen(p) <= sharpen(q)") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    double p = unit(rng), q = unit(rng);
    if (p > q) std::swap(p, q);
    const double T = 0.05 + 2.0 * unit(rng);
    auto sp = sharpen(torch::tensor({p, 1 - p}).reshape({1, 2, 1}), T)[0][0][0].item<double>();
    auto sq = sharpen(torch::tensor({q, 1 - q}).reshape({1, 2, 1}), T)[0][0][0].item<double>();
    CHECK(sp <= sq + 1e-12);
  }
}
