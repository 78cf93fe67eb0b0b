#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "mcorr/gle_fit.hpp"
#include "mcorr/sde_sim.hpp"

using namespace mcorr;

namespace {

std::vector<double> ar_series(std::size_t n, std::uint64_t seed) {
  GleModel m{{-5.0, 0.0, 5.0}, {0.02, -0.02}, {0.01, 0.02}, {-0.1, 0.05}, 1.0};
  SimConfig cfg;
  cfg.n_steps = n - 1;
  cfg.seed = seed;
  return simulate_gle(m, cfg).x;
}

GleFitSettings quick_settings(std::size_t n_bins, std::size_t k_max, std::uint64_t seed) {
  GleFitSettings s;
  s.n_bins = n_bins;
  s.k_max = k_max;
  s.steps = 6000;
  s.n_burn = 1000;
  s.thin = 10;
  s.seed = seed;
  return s;
}

}  // namespace

TEST(BinSeries, EqualWidthUniformGrid) {
  std::vector<double> v(11);
  for (int i = 0; i <= 10; ++i) v[i] = i / 10.0;
  const auto b = bin_series(v, 10, BinMode::equal_width);
  ASSERT_EQ(b.edges.size(), 11u);
  for (int i = 0; i <= 10; ++i) EXPECT_NEAR(b.edges[i], i / 10.0, 1e-12);
  EXPECT_EQ(b.assignment.back(), 9u);  // max value goes to the last bin
  EXPECT_EQ(b.assignment.front(), 0u);
}

TEST(BinSeries, EqualCountOnSkewedSample) {
  std::mt19937_64 rng(4);
  std::exponential_distribution<double> expo(1.0);
  for (std::size_t n : {1000u, 1003u, 57u}) {
    std::vector<double> v(n);
    for (double& x : v) x = expo(rng) * expo(rng);
    const auto b = bin_series(v, 10, BinMode::equal_count);
    std::vector<std::size_t> counts(10, 0);
    for (auto a : b.assignment) counts[a]++;
    for (auto c : counts) {
      EXPECT_GE(static_cast<double>(c), std::floor(n / 10.0) - 1.0);
      EXPECT_LE(static_cast<double>(c), std::ceil(n / 10.0) + 1.0);
    }
  }
}

TEST(BinSeries, Errors) {
  EXPECT_THROW(bin_series(std::vector<double>(20, 1.0), 10), ValidationError);
  EXPECT_THROW(bin_series(std::vector<double>{1, 2, 3}, 10), ValidationError);
  EXPECT_THROW(bin_series(std::vector<double>{1, 2, 3}, 1), ValidationError);
}

TEST(Likelihood, NoiseFreePathGivesPeakDensities) {
  // Evaluate at a model whose mean reproduces every step exactly.
  GleModel m{{-2.0, 0.0, 2.0}, {0.05, -0.04}, {0.3, 0.7}, {-0.2, 0.1}, 0.5};
  SimConfig cfg;
  cfg.step_h = 0.5;
  cfg.n_steps = 200;
  cfg.initial_state = 0.4;
  cfg.history = {0.1, 0.2};
  GleModel noiseless = m;
  noiseless.diffusion = {0.0, 0.0};
  const auto x = simulate_gle(noiseless, cfg).x;
  std::vector<double> theta{m.drift[0], m.drift[1], m.diffusion[0], m.diffusion[1], m.kernel[0], m.kernel[1]};
  double expected = 0;
  for (std::size_t t = 2; t + 1 < x.size(); ++t)
    expected += -0.5 * std::log(2.0 * std::numbers::pi * 0.5 * m.diffusion_at(x[t]));
  EXPECT_NEAR(gle_log_likelihood(theta, x, m.bin_edges, 2, 0.5), expected, 1e-9 * std::abs(expected));
}

TEST(Likelihood, ZeroKernelEqualsLangevin) {
  const auto x = ar_series(500, 3);
  const std::vector<double> edges{-5.0, 0.0, 5.0};
  const std::vector<double> lang{0.01, -0.03, 0.02, 0.015};
  // Memoryless Langevin likelihood written out directly.
  double direct = 0;
  for (std::size_t t = 0; t + 1 < x.size(); ++t) {
    const std::size_t b = x[t] < 0.0 ? 0 : 1;
    const double var = lang[2 + b];
    const double e = x[t + 1] - x[t] - lang[b];
    direct += -0.5 * std::log(2.0 * std::numbers::pi * var) - 0.5 * e * e / var;
  }
  EXPECT_NEAR(gle_log_likelihood(lang, x, edges, 0, 1.0), direct, 1e-9 * std::abs(direct));
  std::vector<double> with_zero = lang;
  with_zero.push_back(0.0);
  // With a zero kernel of length 1 the same sum minus its first transition.
  const double first = [&] {
    const double e = x[1] - x[0] - lang[x[0] < 0.0 ? 0 : 1];
    const double var = lang[2 + (x[0] < 0.0 ? 0 : 1)];
    return -0.5 * std::log(2.0 * std::numbers::pi * var) - 0.5 * e * e / var;
  }();
  EXPECT_NEAR(gle_log_likelihood(with_zero, x, edges, 1, 1.0), direct - first, 1e-9 * std::abs(direct));
}

TEST(Likelihood, KernelShiftMatchesQuadraticForm) {
  const auto x = ar_series(400, 8);
  const std::vector<double> edges{-5.0, 0.0, 5.0};
  const std::vector<double> theta{0.01, -0.01, 0.012, 0.02, -0.08, 0.04};
  const double delta = 0.013;
  std::vector<double> shifted = theta;
  shifted[4] += delta;
  shifted[5] += delta;
  // Δ log L = -Σ [ (e - h δ s)² - e² ] / (2 h D2) with s = x_{t-1} + x_{t-2}.
  double change = 0;
  for (std::size_t t = 2; t + 1 < x.size(); ++t) {
    const std::size_t b = x[t] < 0.0 ? 0 : 1;
    const double mean = x[t] + theta[b] + theta[4] * x[t - 1] + theta[5] * x[t - 2];
    const double e = x[t + 1] - mean;
    const double s = delta * (x[t - 1] + x[t - 2]);
    change += -((e - s) * (e - s) - e * e) / (2.0 * theta[2 + b]);
  }
  const double a = gle_log_likelihood(theta, x, edges, 2, 1.0);
  const double b = gle_log_likelihood(shifted, x, edges, 2, 1.0);
  EXPECT_NEAR(b - a, change, 1e-8 * std::abs(a));
}

TEST(Likelihood, SufficientStatisticsAgreeWithDirectSum) {
  const auto x = ar_series(800, 12);
  const auto binning = bin_series(x, 4);
  const GleSufficientStats stats(x, binning.assignment, 4, 3, 1.0);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.005, 0.05);
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<double> theta(11);
    for (auto& v : theta) v = u(rng);
    for (std::size_t k = 8; k < 11; ++k) theta[k] -= 0.1;
    const double direct = gle_log_likelihood_assigned(theta, x, binning.assignment, 4, 3, 1.0);
    EXPECT_NEAR(stats.log_likelihood(theta), direct, 1e-8 * std::abs(direct));
  }
}

TEST(Likelihood, InvariantUnderBinRelabelling) {
  const auto x = ar_series(300, 2);
  std::vector<std::size_t> labels(x.size());
  for (std::size_t t = 0; t < x.size(); ++t) labels[t] = x[t] < 0.0 ? 0 : 1;
  std::vector<std::size_t> swapped(labels.size());
  for (std::size_t t = 0; t < labels.size(); ++t) swapped[t] = 1 - labels[t];
  const std::vector<double> theta{0.01, -0.02, 0.011, 0.022, -0.1};
  const std::vector<double> theta_swapped{-0.02, 0.01, 0.022, 0.011, -0.1};
  EXPECT_DOUBLE_EQ(gle_log_likelihood_assigned(theta, x, labels, 2, 1, 1.0),
                   gle_log_likelihood_assigned(theta_swapped, x, swapped, 2, 1, 1.0));
}

TEST(Likelihood, Errors) {
  const auto x = ar_series(50, 1);
  const std::vector<double> edges{-5.0, 0.0, 5.0};
  EXPECT_THROW(gle_log_likelihood(std::vector<double>{0, 0, -1, 1}, x, edges, 0, 1.0), ValidationError);
  EXPECT_THROW(gle_log_likelihood(std::vector<double>{0, 0, 1, 1, 0}, std::vector<double>{1, 2}, edges, 1, 1.0),
               ValidationError);
}

TEST(FitGle, MapAndMeanAgreeWithinCredibleWidth) {
  const auto x = ar_series(4000, 21);
  const auto fit = fit_gle(x, quick_settings(4, 2, 9));
  const auto check = [](const std::vector<Summary>& v, const std::vector<double>& map, const std::vector<double>& mean) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      EXPECT_LE(v[i].ci_lower, v[i].ci_upper);
      EXPECT_LE(std::abs(map[i] - mean[i]), v[i].ci_upper - v[i].ci_lower);
    }
  };
  check(fit.drift, fit.map_model.drift, fit.mean_model.drift);
  check(fit.diffusion, fit.map_model.diffusion, fit.mean_model.diffusion);
  check(fit.kernel, fit.map_model.kernel, fit.mean_model.kernel);
  EXPECT_NO_THROW(fit.map_model.validate());
  EXPECT_EQ(fit.ensemble.sample_count(), fit.ensemble.walkers * 500u);
}

TEST(FitGle, FitSimulateFitRoundTrip) {
  const auto x = ar_series(5000, 44);
  auto settings = quick_settings(4, 2, 10);
  const auto first = fit_gle(x, settings);
  SimConfig cfg;
  cfg.n_steps = 100000;
  cfg.seed = 45;
  cfg.initial_state = x.back();
  const auto sim = simulate_gle(first.mean_model, cfg).x;
  settings.edges = first.binning.edges;
  const auto second = fit_gle(sim, settings);
  std::size_t inside = 0, total = 0;
  auto count = [&](const std::vector<Summary>& ci, const GleModel& m, auto member) {
    const auto& values = m.*member;
    for (std::size_t i = 0; i < ci.size(); ++i, ++total)
      inside += (values[i] >= ci[i].ci_lower && values[i] <= ci[i].ci_upper) ? 1 : 0;
  };
  count(first.drift, second.mean_model, &GleModel::drift);
  count(first.diffusion, second.mean_model, &GleModel::diffusion);
  count(first.kernel, second.mean_model, &GleModel::kernel);
  EXPECT_GE(static_cast<double>(inside), 0.9 * static_cast<double>(total));
}

TEST(MemoryAggregation, ZeroKernelPlateausImmediately) {
  const auto agg = memory_aggregation_from_kernel(std::vector<double>(5, 0.0));
  for (double v : agg.cumulative) EXPECT_EQ(v, 0.0);
  ASSERT_TRUE(agg.plateau_estimate.has_value());
  EXPECT_EQ(*agg.plateau_estimate, 1u);
}

TEST(MemoryAggregation, CumulativeSumByHand) {
  const auto agg = memory_aggregation_from_kernel(std::vector<double>{-0.2, -0.1, 0.0, 0.0, 0.0});
  const std::vector<double> expected{-0.2, -0.3, -0.3, -0.3, -0.3};
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(agg.cumulative[i], expected[i], 1e-15);
  EXPECT_EQ(agg.k_values, (std::vector<std::size_t>{1, 2, 3, 4, 5}));
  ASSERT_TRUE(agg.plateau_estimate.has_value());
  EXPECT_EQ(*agg.plateau_estimate, 2u);
}

TEST(MemoryAggregation, NoPlateauBeforeTheLastLag) {
  const auto agg = memory_aggregation_from_kernel(std::vector<double>{0.1, 0.1, 0.1, 0.1});
  EXPECT_FALSE(agg.plateau_estimate.has_value());
  EXPECT_THROW(memory_aggregation_from_kernel(std::vector<double>{}), ValidationError);
}
