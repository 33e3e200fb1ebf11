#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "entlab/entropy.hpp"

using namespace entlab;

namespace {

PolicyTable single(std::vector<double> logits) {
  const auto V = logits.size();
  return PolicyTable(ContextIndexer(ContextModel::Positional, 1, 1, V), std::move(logits));
}

TokenRecord rec(Token a, double w) {
  TokenRecord r;
  r.action_id = a;
  r.final_weight = w;
  return r;
}

double H2(double p) { return -(p * std::log(p) + (1 - p) * std::log(1 - p)); }

std::vector<double> random_logits(Rng& rng, std::size_t V, double scale) {
  std::vector<double> z(V);
  for (auto& x : z) x = scale * rng.normal();
  return z;
}

}  // namespace

TEST(DeltaIndicator, VanishesAtCertainty) {
  for (double H : {0.0, 0.5, 2.0, 2.77}) EXPECT_EQ(delta_indicator(1.0, H), 0.0);
}

TEST(DeltaIndicator, VanishesAtUniform) {
  for (std::size_t V = 2; V <= 64; ++V) {
    std::vector<double> p(V, 1.0 / static_cast<double>(V));
    EXPECT_EQ(delta_indicator(p[0], entropy_of(p)), 0.0) << "V=" << V;
  }
}

TEST(DeltaIndicator, NinetyTen) {
  const double H = H2(0.9);
  const double d9 = -0.9 * 0.01 * (std::log(0.9) + H);
  const double d1 = -0.1 * 0.81 * (std::log(0.1) + H);
  EXPECT_NEAR(delta_indicator(0.9, H), d9, 1e-15);
  EXPECT_NEAR(delta_indicator(0.1, H), d1, 1e-15);
  EXPECT_NEAR(delta_indicator(0.9, H), -0.001977, 1e-6);
  EXPECT_NEAR(delta_indicator(0.1, H), 0.160178, 1e-6);
}

TEST(DeltaIndicator, SignsMatchFiniteDifferenceBoost) {
  // Boosting a token's logit slightly moves entropy in the direction of delta.
  const std::vector<double> z{std::log(0.9), std::log(0.1)};
  for (Token a : {0, 1}) {
    auto zp = z;
    zp[a] += 1e-6;
    const double dH = state_entropy(single(zp), 0) - state_entropy(single(z), 0);
    const double p = a == 0 ? 0.9 : 0.1;
    EXPECT_EQ(dH > 0, delta_indicator(p, H2(0.9)) > 0) << "action " << a;
  }
}

TEST(DeltaIndicator, RejectsBadInputs) {
  EXPECT_THROW(delta_indicator(0.0, 1.0), std::invalid_argument);
  EXPECT_THROW(delta_indicator(-0.1, 1.0), std::invalid_argument);
  EXPECT_THROW(delta_indicator(1.1, 1.0), std::invalid_argument);
  EXPECT_THROW(delta_indicator(0.5, -1.0), std::invalid_argument);
}

TEST(DeltaIndicator, SignLawOnDenseGrid) {
  const double Hmax = std::log(16.0);
  int checked = 0;
  for (int i = 1; i < 200; ++i)
    for (int j = 1; j <= 200; ++j) {
      const double p = i / 200.0, H = Hmax * j / 200.0;
      const double d = delta_indicator(p, H);
      const double gap = std::exp(-H) - p;
      if (std::abs(gap) < 1e-12) continue;
      EXPECT_EQ(d > 0, gap > 0) << "p=" << p << " H=" << H;
      EXPECT_EQ(d < 0, gap < 0) << "p=" << p << " H=" << H;
      ++checked;
    }
  EXPECT_GT(checked, 39000);
}

TEST(DeltaIndicator, MagnitudeGrowsWithEntropyAboveThreshold) {
  for (double p : {0.3, 0.5, 0.7, 0.9}) {
    double prev = -1.0;
    for (int j = 0; j <= 100; ++j) {
      const double H = -std::log(p) + 1e-3 + 2.0 * j / 100.0;
      const double mag = std::abs(delta_indicator(p, H));
      EXPECT_GT(mag, prev);
      prev = mag;
    }
  }
}

TEST(OmegaHat, ZeroWeight) { EXPECT_EQ(omega_hat(0.0, 0.3, 1.0, 0.01), 0.0); }

TEST(OmegaHat, LowProbabilityToken) {
  const double H = H2(0.9);
  const double oracle = -0.001 * 1.0 * 0.81 * (std::log(0.1) + H);
  EXPECT_NEAR(omega_hat(1.0, 0.1, H, 0.001), oracle, 1e-18);
  EXPECT_NEAR(omega_hat(1.0, 0.1, H, 0.001), 0.00160178, 1e-8);
}

TEST(OmegaHat, HighProbabilityToken) {
  const double H = H2(0.9);
  const double oracle = -0.001 * 1.0 * 0.01 * (std::log(0.9) + H);
  EXPECT_NEAR(omega_hat(1.0, 0.9, H, 0.001), oracle, 1e-18);
  EXPECT_NEAR(omega_hat(1.0, 0.9, H, 0.001), -2.1972e-6, 1e-10);
}

TEST(OmegaHat, RecordFormUsesFinalWeightAndCurrentProbability) {
  TokenRecord r;
  r.final_weight = -0.5;
  r.base_weight = 123.0;
  r.p_old = 0.9;
  r.p_cur = 0.2;
  r.entropy = 1.1;
  EXPECT_DOUBLE_EQ(omega_hat(r, 0.01), omega_hat(-0.5, 0.2, 1.1, 0.01));
}

TEST(OmegaHat, NonFiniteThrows) {
  EXPECT_THROW(omega_hat(NAN, 0.5, 1.0, 0.1), std::invalid_argument);
  EXPECT_THROW(omega_hat(1.0, 0.5, INFINITY, 0.1), std::invalid_argument);
  EXPECT_THROW(omega_hat(1.0, 0.5, 1.0, NAN), std::invalid_argument);
}

TEST(OmegaExpected, MatchesManualSum) {
  const std::vector<double> p{0.7, 0.2, 0.1}, w{1.0, -2.0, 0.5};
  const double H = entropy_of(p);
  double oracle = 0.0;
  for (int a = 0; a < 3; ++a) oracle += p[a] * w[a] * (1 - p[a]) * (1 - p[a]) * (std::log(p[a]) + H);
  EXPECT_NEAR(omega_expected(p, w, 0.01), -0.01 * oracle, 1e-16);
}

TEST(ExactEntropyChange, IdenticalTablesGiveZeros) {
  auto t = single({0.1, 0.7, -0.4});
  const std::vector<StateId> s{0, 0};
  for (double d : exact_entropy_change(t, t, s)) EXPECT_EQ(d, 0.0);
}

TEST(ExactEntropyChange, UniformBinaryAfterOneStep) {
  auto before = single({0.0, 0.0});
  std::vector<TokenRecord> r{rec(0, 1.0)};
  auto after = apply_update(before, r, 0.1, 1);
  const std::vector<StateId> s{0};
  const double p0 = 1.0 / (1.0 + std::exp(-0.1));
  const double oracle = H2(p0) - std::log(2.0);
  const double got = exact_entropy_change(before, after, s)[0];
  EXPECT_NEAR(got, oracle, 1e-15);
  EXPECT_NEAR(got, -0.0012484392, 1e-10);
}

TEST(ExactEntropyChange, LowProbabilityRewardRaisesEntropy) {
  auto before = single({std::log(0.9), std::log(0.1)});
  std::vector<TokenRecord> r{rec(1, 1.0)};
  auto after = apply_update(before, r, 1e-3, 1);
  const std::vector<StateId> s{0};
  EXPECT_GT(exact_entropy_change(before, after, s)[0], 0.0);
  EXPECT_GT(omega_hat(1.0, 0.1, H2(0.9), 1e-3), 0.0);
}

TEST(ExactEntropyChange, ShapeMismatchThrows) {
  auto a = single({0, 0});
  auto b = single({0, 0, 0});
  const std::vector<StateId> s{0};
  EXPECT_THROW(exact_entropy_change(a, b, s), std::invalid_argument);
}

TEST(EntropyGradient, MatchesCentralDifferences) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto z = random_logits(rng, 7, 2.0);
    auto p = probs(single(z), 0);
    const auto g = entropy_gradient(p);
    for (std::size_t a = 0; a < 7; ++a) {
      auto zp = z, zm = z;
      const double h = 1e-5;
      zp[a] += h;
      zm[a] -= h;
      const double fd = (state_entropy(single(zp), 0) - state_entropy(single(zm), 0)) / (2 * h);
      EXPECT_NEAR(g[a], fd, 1e-8);
    }
  }
}

TEST(FirstOrderTaylor, ZeroDisplacement) {
  auto t = single({0.3, -0.2, 1.0});
  const std::vector<std::vector<double>> d{{0, 0, 0}};
  const std::vector<StateId> s{0};
  EXPECT_EQ(first_order_taylor(t, d, s)[0], 0.0);
}

TEST(FirstOrderTaylor, UniformStateHasZeroGradient) {
  Rng rng(4);
  auto t = single(std::vector<double>(16, 0.0));
  const std::vector<StateId> s{0};
  for (int trial = 0; trial < 20; ++trial) {
    const std::vector<std::vector<double>> d{random_logits(rng, 16, 1.0)};
    EXPECT_EQ(first_order_taylor(t, d, s)[0], 0.0);
  }
}

TEST(FirstOrderTaylor, RemainderIsOrderEpsilon) {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const auto z = random_logits(rng, 6, 1.5);
    const auto dz = random_logits(rng, 6, 1.0);
    auto t = single(z);
    const std::vector<StateId> s{0};
    const std::vector<std::vector<double>> d{dz};
    const double lin = first_order_taylor(t, d, s)[0];
    auto quotient = [&](double eps) {
      auto zz = z;
      for (std::size_t a = 0; a < 6; ++a) zz[a] += eps * dz[a];
      return (state_entropy(single(zz), 0) - state_entropy(t, 0)) / eps;
    };
    // The forward quotient error halves with eps; Richardson removes it.
    const double e1 = quotient(1e-3) - lin, e2 = quotient(5e-4) - lin;
    if (std::abs(e1) > 1e-9) { EXPECT_NEAR(e2 / e1, 0.5, 0.02); }
    const double rich = 2 * quotient(5e-4) - quotient(1e-3);
    EXPECT_LT(std::abs(rich - lin), 0.1 * std::abs(e1) + 1e-12);
  }
}

TEST(FirstOrderTaylor, ApplyUpdateRemainderScalesQuadratically) {
  Rng rng(6);
  const std::vector<double> etas{2e-3, 1e-3, 5e-4};
  std::vector<double> mean_resid(etas.size(), 0.0);
  const int states = 200;
  for (int trial = 0; trial < states; ++trial) {
    const auto z = random_logits(rng, 16, 2.0);
    const auto a = static_cast<Token>(rng.below(16));
    const double w = rng.normal();
    auto before = single(z);
    std::vector<TokenRecord> r{rec(a, w)};
    for (std::size_t k = 0; k < etas.size(); ++k) {
      auto after = apply_update(before, r, etas[k], 1);
      const auto disp = logit_displacement(before, r, etas[k], 1);
      const std::vector<StateId> s{0};
      const std::vector<std::vector<double>> d{disp.at(0)};
      const double resid =
          std::abs(exact_entropy_change(before, after, s)[0] - first_order_taylor(before, d, s)[0]);
      mean_resid[k] += resid / states;
    }
  }
  for (std::size_t k = 1; k < etas.size(); ++k) {
    const double ratio = mean_resid[k] / mean_resid[k - 1];
    EXPECT_GE(ratio, 0.15);
    EXPECT_LE(ratio, 0.35);
  }
}

TEST(ClassifyQuadrant, Cases) {
  EXPECT_EQ(classify_quadrant(1.0, -0.002), Quadrant::I);
  EXPECT_EQ(classify_quadrant(1.0, 0.16), Quadrant::II);
  EXPECT_EQ(classify_quadrant(-1.0, 0.16), Quadrant::III);
  EXPECT_EQ(classify_quadrant(-1.0, -0.002), Quadrant::IV);
  EXPECT_EQ(classify_quadrant(0.0, 0.1), Quadrant::None);
  EXPECT_EQ(classify_quadrant(1.0, 0.0), Quadrant::None);
}

namespace {

struct DirectionSample {
  double p, H, dH;
  Quadrant q;
};

// Isolated state, one token, eta = 1e-3, |A| = 1.
DirectionSample direction_sample(Rng& rng) {
  for (;;) {
    const std::size_t V = 2 + rng.below(15);
    auto z = random_logits(rng, V, 3.0);
    const auto a = static_cast<Token>(rng.below(V));
    auto before = single(z);
    const auto p = probs(before, 0);
    const double A = rng.uniform() < 0.5 ? 1.0 : -1.0;
    const double H = entropy_of(p);
    const auto q = classify_quadrant(A, delta_indicator(p[a], H));
    if (q == Quadrant::None) continue;
    std::vector<TokenRecord> r{rec(a, A)};
    auto after = apply_update(before, r, 1e-3, 1);
    const std::vector<StateId> s{0};
    return {p[a], H, exact_entropy_change(before, after, s)[0], q};
  }
}

bool predicts_increase(Quadrant q) { return q == Quadrant::II || q == Quadrant::IV; }

}  // namespace

TEST(ClassifyQuadrant, DirectionLawBySimulation) {
  // The realized entropy change has the predicted sign for confident tokens
  // and for rare tokens below exp(-H).
  Rng rng(7);
  int counts[5] = {};
  int high = 0;
  while (counts[1] < 100 || counts[2] < 100 || counts[3] < 100 || counts[4] < 100) {
    const auto d = direction_sample(rng);
    const bool confident = d.p > 0.8;
    const bool rare = d.p < std::min(0.2, std::exp(-d.H));
    if (!confident && !rare) continue;
    EXPECT_EQ(d.dH > 0, predicts_increase(d.q)) << "quadrant " << to_string(d.q) << " p=" << d.p << " H=" << d.H;
    ++counts[static_cast<int>(d.q)];
    high += confident;
  }
  EXPECT_GT(high, 100);
}

TEST(ClassifyQuadrant, DirectionLawFailsBetweenExpMinusHAndPointTwo) {
  // For exp(-H) < p < 0.2 the exact first-order change is dominated by the
  // other tokens' term sum_b pi_b^2 (ln pi_b + H), which delta omits.
  Rng rng(8);
  int n = 0, wrong = 0;
  while (n < 200) {
    const auto d = direction_sample(rng);
    if (!(d.p < 0.2 && d.p > std::exp(-d.H))) continue;
    ++n;
    wrong += (d.dH > 0) != predicts_increase(d.q);
  }
  EXPECT_GT(wrong, n / 2);
}

TEST(AverageRanks, Ties) {
  const std::vector<double> x{10, 20, 20, 5, 20};
  EXPECT_EQ(average_ranks(x), (std::vector<double>{2, 4, 4, 1, 4}));
}

TEST(Fidelity, IdenticalSeries) {
  const std::vector<double> x{0.1, -0.3, 0.5, 0.2};
  const auto r = fidelity(x, x);
  EXPECT_EQ(r.mse, 0.0);
  EXPECT_NEAR(*r.pcc, 1.0, 1e-12);
  EXPECT_NEAR(*r.srcc, 1.0, 1e-12);
  EXPECT_EQ(r.n, 4u);
}

TEST(Fidelity, NegatedSeries) {
  const std::vector<double> x{0.1, -0.3, 0.5, 0.2}, y{-0.1, 0.3, -0.5, -0.2};
  const auto r = fidelity(x, y);
  EXPECT_NEAR(*r.pcc, -1.0, 1e-12);
  EXPECT_NEAR(*r.srcc, -1.0, 1e-12);
}

TEST(Fidelity, SpearmanSwapInMiddle) {
  const std::vector<double> x{1, 2, 3, 4}, y{1, 3, 2, 4};
  // 1 - 6 sum d^2 / (n (n^2 - 1)) with d = (0, 1, 1, 0).
  const double oracle = 1.0 - 6.0 * 2.0 / (4.0 * 15.0);
  EXPECT_NEAR(*fidelity(x, y).srcc, oracle, 1e-12);
  EXPECT_NEAR(oracle, 0.8, 1e-12);
}

TEST(Fidelity, PearsonMatchesDirectFormula) {
  const std::vector<double> x{1, 2, 3, 4, 5}, y{2, 1, 4, 3, 7};
  const double mx = 3.0, my = 3.4;
  double sxy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < 5; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  EXPECT_NEAR(*fidelity(x, y).pcc, sxy / std::sqrt(sxx * syy), 1e-12);
  double mse = 0;
  for (int i = 0; i < 5; ++i) mse += (x[i] - y[i]) * (x[i] - y[i]) / 5.0;
  EXPECT_NEAR(fidelity(x, y).mse, mse, 1e-12);
}

TEST(Fidelity, ZeroVarianceIsNull) {
  const std::vector<double> x{0, 0, 0}, y{1, 2, 3};
  const auto r = fidelity(x, y);
  EXPECT_FALSE(r.pcc.has_value());
  EXPECT_FALSE(r.srcc.has_value());
  EXPECT_NEAR(r.mse, 14.0 / 3.0, 1e-12);
}

TEST(Fidelity, InputErrors) {
  const std::vector<double> one{1.0}, two{1.0, 2.0};
  EXPECT_THROW(fidelity(one, one), std::invalid_argument);
  EXPECT_THROW(fidelity(one, two), std::invalid_argument);
}
