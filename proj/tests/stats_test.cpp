#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "epvsq/rng.hpp"
#include "epvsq/stats.hpp"
#include "oracles.hpp"

using namespace epvsq;

namespace {

using epvsq::testing::icc_oracle;
using epvsq::testing::simulate_zinb;
using epvsq::testing::ZinbData;

std::vector<double> normals(std::size_t n, std::uint64_t seed) {
  Rng rng(seed, 1);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

}  // namespace

TEST(Pearson, KnownValues) {
  const std::vector<double> x{1, 2, 3, 4, 5};
  const std::vector<double> y{2, 4, 6, 8, 10};
  const std::vector<double> z{5, 4, 3, 2, 1};
  EXPECT_NEAR(stats::pearson(x, y), 1.0, 1e-12);
  EXPECT_NEAR(stats::pearson(x, z), -1.0, 1e-12);
  // Hand computed: sxy = 7, sxx = 10, syy = 6.8
  const std::vector<double> w{1, 3, 2, 5, 4};
  EXPECT_NEAR(stats::pearson(x, w), 8.0 / std::sqrt(10.0 * 10.0), 1e-12);
}

TEST(Pearson, ConstantInputIsDegenerate) {
  const std::vector<double> x{1, 1, 1, 1};
  const std::vector<double> y{1, 2, 3, 4};
  EXPECT_THROW(stats::pearson(x, y), DegenerateError);
  EXPECT_THROW(stats::pearson(std::vector<double>{1, 2}, std::vector<double>{1, 2}), ValidationError);
  EXPECT_THROW(stats::pearson(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2}), ValidationError);
}

TEST(Spearman, MidRanksAndMonotoneInvariance) {
  const std::vector<double> x{10, 20, 20, 30};
  const auto r = stats::mid_ranks(x);
  EXPECT_EQ(r, (std::vector<double>{1, 2.5, 2.5, 4}));
  const auto a = normals(50, 3), b = normals(50, 4);
  std::vector<double> ea(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) ea[i] = std::exp(3 * a[i]);
  EXPECT_NEAR(stats::spearman(a, b), stats::spearman(ea, b), 1e-12);
}

TEST(Icc, MatchesAnovaOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto a = normals(30, seed), noise = normals(30, seed + 100);
    std::vector<double> b(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) b[i] = 1.3 * a[i] + 0.5 * noise[i] + 0.4;
    EXPECT_NEAR(stats::icc(a, b, stats::IccKind::AbsoluteAgreement), icc_oracle(a, b, true), 1e-10);
    EXPECT_NEAR(stats::icc(a, b, stats::IccKind::Consistency), icc_oracle(a, b, false), 1e-10);
  }
}

TEST(Icc, IdenticalRatersGiveOne) {
  const auto a = normals(40, 9);
  EXPECT_NEAR(stats::icc(a, a), 1.0, 1e-12);
}

TEST(Icc, PenalisesBiasOnlyForAbsoluteAgreement) {
  const auto a = normals(40, 11);
  std::vector<double> b(a);
  for (auto& v : b) v += 2.0;
  EXPECT_NEAR(stats::icc(a, b, stats::IccKind::Consistency), 1.0, 1e-12);
  EXPECT_LT(stats::icc(a, b, stats::IccKind::AbsoluteAgreement), 0.5);
}

TEST(Icc, ZeroVarianceIsDegenerate) {
  const std::vector<double> c(10, 3.0);
  EXPECT_THROW(stats::icc(c, c), DegenerateError);
}

TEST(Mse, Simple) {
  EXPECT_DOUBLE_EQ(stats::mse(std::vector<double>{1, 2, 3}, std::vector<double>{1, 3, 5}), 5.0 / 3.0);
}

TEST(Williams, HandComputedStatistic) {
  // r13 = .75, r23 = .63, r12 = .7, n = 405
  const auto w = stats::williams_test(0.75, 0.63, 0.7, 405);
  const double det = 1 - 0.49 - 0.5625 - 0.3969 + 2 * 0.7 * 0.75 * 0.63;
  const double t = 0.12 * std::sqrt(404 * 1.7 / (2 * (404.0 / 402.0) * det + 0.69 * 0.69 * 0.027));
  EXPECT_NEAR(w.t, t, 1e-9);
  EXPECT_DOUBLE_EQ(w.df, 402);
  EXPECT_LT(w.p, 1e-4);
  EXPECT_GT(w.p, 0);
}

TEST(Williams, EqualCorrelationsGiveUnitP) {
  const auto w = stats::williams_test(0.6, 0.6, 0.5, 100);
  EXPECT_DOUBLE_EQ(w.t, 0);
  EXPECT_NEAR(w.p, 1.0, 1e-12);
}

TEST(Williams, SingularMatrixIsDegenerate) {
  EXPECT_THROW(stats::williams_test(0.9, 0.1, 0.9, 50), DegenerateError);
  EXPECT_THROW(stats::williams_test(1.0, 0.5, 0.5, 50), ValidationError);
}

// Monte Carlo null distribution of the Williams statistic at a small n where
// the p-value is large enough to estimate.
TEST(Williams, MatchesMonteCarloNull) {
  const auto obs = stats::williams_test(0.75, 0.63, 0.7, 40);
  const auto mc = epvsq::testing::williams_monte_carlo(0.75, 0.63, 0.7, 40, 20000, 77);
  EXPECT_NEAR(obs.p, mc.p, 4 * mc.se + 0.005) << "mc=" << mc.p;
}

TEST(Bootstrap, DeterministicAndContainsEstimate) {
  const auto a = normals(60, 21), noise = normals(60, 22);
  std::vector<double> b(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) b[i] = a[i] + 0.5 * noise[i];
  auto metric = [](auto x, auto y) { return stats::pearson(x, y); };
  const auto c1 = stats::bootstrap_ci(metric, a, b, 500, 0.95, 5);
  const auto c2 = stats::bootstrap_ci(metric, a, b, 500, 0.95, 5);
  EXPECT_EQ(c1.lower, c2.lower);
  EXPECT_EQ(c1.upper, c2.upper);
  EXPECT_LE(c1.lower, c1.estimate);
  EXPECT_GE(c1.upper, c1.estimate);
  EXPECT_LT(c1.upper - c1.lower, 0.3);
  EXPECT_THROW(stats::bootstrap_ci(metric, a, b, 10, 0.95, 5), ValidationError);
}

TEST(Bootstrap, CoverageOfPearson) {
  // 95% interval for rho = 0.6 should cover the truth in most repetitions.
  const double rho = 0.6;
  int covered = 0;
  const int trials = 60;
  for (int t = 0; t < trials; ++t) {
    const auto a = normals(80, 1000 + t), e = normals(80, 2000 + t);
    std::vector<double> b(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) b[i] = rho * a[i] + std::sqrt(1 - rho * rho) * e[i];
    const auto ci = stats::bootstrap_ci([](auto x, auto y) { return stats::pearson(x, y); }, a, b, 400, 0.95, t);
    covered += ci.lower <= rho && rho <= ci.upper;
  }
  EXPECT_GE(covered, 51);
}

namespace {

// Poisson regression by IRLS.
Eigen::VectorXd poisson_irls(const ZinbData& d) {
  const auto n = static_cast<Eigen::Index>(d.y.size());
  Eigen::MatrixXd x(n, 2);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    x(i, 0) = 1;
    x(i, 1) = d.x[static_cast<std::size_t>(i)][0];
    y[i] = d.y[static_cast<std::size_t>(i)];
  }
  Eigen::VectorXd b = Eigen::VectorXd::Zero(2);
  b[0] = std::log(y.mean());
  for (int it = 0; it < 100; ++it) {
    const Eigen::VectorXd mu = (x * b).array().exp();
    const Eigen::VectorXd z = x * b + ((y - mu).array() / mu.array()).matrix();
    const Eigen::MatrixXd xtw = x.transpose() * mu.asDiagonal();
    const Eigen::VectorXd nb = (xtw * x).ldlt().solve(xtw * z);
    if ((nb - b).norm() < 1e-12) {
      b = nb;
      break;
    }
    b = nb;
  }
  return b;
}

}  // namespace

TEST(Zinb, RecoversSimulatedParameters) {
  const double b1 = std::log(1.3) / 10;
  const double b0 = std::log(4.0) - b1 * 67.5;
  const auto d = simulate_zinb(3000, b0, b1, 0.2, 2.0, 31);
  const auto fit = stats::zinb_fit(d.y, d.x);
  EXPECT_TRUE(fit.converged);
  EXPECT_NEAR(fit.count_coef[1], b1, 3 * fit.count_se[1]);
  EXPECT_NEAR(fit.count_coef[0], b0, 3 * fit.count_se[0]);
  const double pi_hat = 1 / (1 + std::exp(-fit.inflation_coef[0]));
  EXPECT_NEAR(pi_hat, 0.2, 0.06);
  EXPECT_NEAR(fit.dispersion, 2.0, 0.8);
  EXPECT_LT(fit.rate_ratio_lower, 1.3);
  EXPECT_GT(fit.rate_ratio_upper, 1.3);
}

TEST(Zinb, LogLikelihoodIsMonotone) {
  const auto d = simulate_zinb(800, 0.0, 0.02, 0.3, 1.5, 32);
  const auto fit = stats::zinb_fit(d.y, d.x);
  ASSERT_GE(fit.ll_trace.size(), 2u);
  for (std::size_t i = 1; i < fit.ll_trace.size(); ++i) EXPECT_GE(fit.ll_trace[i], fit.ll_trace[i - 1] - 1e-9);
}

TEST(Zinb, NestedPoissonSlope) {
  // Poisson data with no excess zeros: the ZINB count slope should agree with
  // plain Poisson regression.
  Rng rng(33, 0);
  ZinbData d;
  for (int i = 0; i < 2000; ++i) {
    const double age = rng.uniform(45, 90);
    d.x.push_back({age});
    d.y.push_back(static_cast<double>(rng.poisson(std::exp(-1.0 + 0.03 * age))));
  }
  const auto fit = stats::zinb_fit(d.y, d.x);
  const auto b = poisson_irls(d);
  EXPECT_NEAR(fit.count_coef[1], b[1], 2 * fit.count_se[1]);
}

TEST(Zinb, RejectsBadInput) {
  std::vector<double> zeros(100, 0.0);
  std::vector<std::vector<double>> x(100, std::vector<double>{1.0});
  EXPECT_THROW(stats::zinb_fit(zeros, x), DegenerateError);
  std::vector<double> few(20, 1.0);
  std::vector<std::vector<double>> xf(20, std::vector<double>{1.0});
  EXPECT_THROW(stats::zinb_fit(few, xf), ValidationError);
  std::vector<double> neg(100, 1.0);
  neg[3] = -1;
  EXPECT_THROW(stats::zinb_fit(neg, x), ValidationError);
}

TEST(Evaluate, ReportFields) {
  const auto a = normals(50, 41), e = normals(50, 42);
  std::vector<double> b(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) b[i] = a[i] + 0.3 * e[i];
  auto r = stats::evaluate("m", a, b);
  stats::add_bootstrap(r, a, b, 200, 0.95, 1);
  ASSERT_TRUE(r.icc_ci.has_value());
  EXPECT_EQ(r.n, 50u);
  const auto j = stats::to_json(r);
  EXPECT_EQ(j["method"], "m");
  EXPECT_EQ(j["icc_kind"], "icc2_1");
  EXPECT_TRUE(j.contains("pearson_ci"));
}

TEST(Pearson, HandComputedThreePoint) {
  // cov = 1.5, var_x = 1, var_y = 7/3
  EXPECT_NEAR(stats::pearson(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 4}), 1.5 / std::sqrt(7.0 / 3.0),
              1e-12);
  EXPECT_NEAR(stats::pearson(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 4}), 0.98198, 1e-5);
}

TEST(Spearman, RankDifferenceFormula) {
  EXPECT_NEAR(stats::spearman(std::vector<double>{1, 2, 3}, std::vector<double>{3, 1, 2}), -0.5, 1e-12);
}

TEST(Spearman, TiesMatchBruteForceMidRanks) {
  Rng rng(5, 0);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> x(8), y(8);
    for (auto& v : x) v = static_cast<double>(rng.below(4));
    for (auto& v : y) v = static_cast<double>(rng.below(4));
    // Brute force: rank = 1 + #smaller + (#equal - 1) / 2
    auto ranks = [](const std::vector<double>& v) {
      std::vector<double> r(v.size());
      for (std::size_t i = 0; i < v.size(); ++i) {
        double less = 0, eq = 0;
        for (double w : v) {
          less += w < v[i];
          eq += w == v[i];
        }
        r[i] = 1 + less + (eq - 1) / 2;
      }
      return r;
    };
    const auto rx = ranks(x), ry = ranks(y);
    double expected;
    try {
      expected = stats::pearson(rx, ry);
    } catch (const DegenerateError&) {
      EXPECT_THROW(stats::spearman(x, y), DegenerateError);
      continue;
    }
    EXPECT_NEAR(stats::spearman(x, y), expected, 1e-12);
  }
}

TEST(Icc, HandComputedOffsetCase) {
  // SSR = 10, SSC = 8, SSE = 0
  const std::vector<double> a{1, 2, 3, 4}, b{3, 4, 5, 6};
  EXPECT_NEAR(stats::icc(a, b), 0.4545, 1e-4);
  EXPECT_NEAR(stats::icc(a, b), icc_oracle(a, b, true), 1e-12);
}

TEST(Icc, RandomTablesMatchOracle) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto [a, b] = epvsq::testing::random_icc_table(seed);
    EXPECT_NEAR(stats::icc(a, b), icc_oracle(a, b, true), 1e-10);
  }
}

TEST(Icc, GeneralTableMatchesPairOverload) {
  const auto a = normals(20, 51), b = normals(20, 52);
  std::vector<double> t;
  for (std::size_t i = 0; i < a.size(); ++i) {
    t.push_back(a[i]);
    t.push_back(b[i]);
  }
  EXPECT_DOUBLE_EQ(stats::icc(t, a.size(), 2), stats::icc(a, b));
  EXPECT_THROW(stats::icc(t, a.size(), 3), ValidationError);
}

TEST(Williams, AntisymmetryAndMonotonicity) {
  const auto w1 = stats::williams_test(0.75, 0.63, 0.7, 100);
  const auto w2 = stats::williams_test(0.63, 0.75, 0.7, 100);
  EXPECT_NEAR(w1.t, -w2.t, 1e-12);
  EXPECT_NEAR(w1.p, w2.p, 1e-12);
  double prev = 1.0;
  for (double d = 0.0; d <= 0.2; d += 0.02) {
    const auto w = stats::williams_test(0.6 + d, 0.6, 0.5, 80);
    EXPECT_LE(w.p, prev + 1e-15);
    EXPECT_GT(w.p, 0);
    EXPECT_LE(w.p, 1);
    prev = w.p;
  }
}

TEST(Bootstrap, ZeroVarianceMetricGivesZeroWidth) {
  const auto a = normals(30, 61), b = normals(30, 62);
  const auto ci = stats::bootstrap_ci([](auto, auto) { return 0.25; }, a, b, 200, 0.95, 3);
  EXPECT_EQ(ci.lower, 0.25);
  EXPECT_EQ(ci.upper, 0.25);
}

TEST(Report, ConstantPredictorGivesNanNotThrow) {
  const std::vector<double> pred(10, 2.0), label{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  stats::EvalReport r = stats::evaluate("flat", pred, label);
  EXPECT_TRUE(std::isnan(r.pearson));
  EXPECT_TRUE(std::isnan(r.spearman));
  EXPECT_NEAR(r.mse, 14.5, 1e-12);
  stats::add_bootstrap(r, pred, label, 100, 0.95, 1);
  EXPECT_FALSE(r.pearson_ci);
  EXPECT_TRUE(r.mse_ci);
}

TEST(Zinb, PlantedRateRatioAtThousand) {
  const double b1 = std::log(1.3) / 10;
  const double b0 = std::log(3.0) - b1 * 67.5;
  const auto d = simulate_zinb(1000, b0, b1, 0.3, 2.0, 2024);
  const auto fit = stats::zinb_fit(d.y, d.x);
  EXPECT_TRUE(fit.converged);
  EXPECT_GE(fit.rate_ratio, 1.2);
  EXPECT_LE(fit.rate_ratio, 1.4);
  EXPECT_GT(fit.dispersion, 0);
}

TEST(Zinb, NullAgeEffectCoversOne) {
  const auto d = simulate_zinb(1000, std::log(3.0), 0.0, 0.2, 2.0, 2025);
  const auto fit = stats::zinb_fit(d.y, d.x);
  EXPECT_LT(fit.rate_ratio_lower, 1.0);
  EXPECT_GT(fit.rate_ratio_upper, 1.0);
}
