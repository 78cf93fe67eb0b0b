#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "mcorr/bayes_core.hpp"

using namespace mcorr;

namespace {

LogDensity standard_normal(std::size_t dim, double half_width = 20.0) {
  LogDensity t;
  t.dim = dim;
  t.bounds.assign(dim, Bounds{-half_width, half_width});
  t.evaluate = [](std::span<const double> x) {
    double s = 0;
    for (double v : x) s += v * v;
    return -0.5 * s;
  };
  return t;
}

// Standard error of a parameter mean from the spread of per-walker means.
double walker_mean_se(const PosteriorEnsemble& e, std::size_t p) {
  const std::size_t kept = e.kept_per_walker();
  std::vector<double> means(e.walkers, 0.0);
  for (std::size_t w = 0; w < e.walkers; ++w) {
    for (std::size_t i = 0; i < kept; ++i) means[w] += e.samples[(w * kept + i) * e.dim + p];
    means[w] /= static_cast<double>(kept);
  }
  double m = 0;
  for (double v : means) m += v;
  m /= static_cast<double>(means.size());
  double var = 0;
  for (double v : means) var += (v - m) * (v - m);
  var /= static_cast<double>(means.size() - 1);
  return std::sqrt(var / static_cast<double>(means.size()));
}

}  // namespace

TEST(EnsembleSampler, StandardNormal2D) {
  EnsembleSettings s;
  s.walkers = 50;
  s.steps = 21000;
  s.n_burn = 1000;
  s.thin = 10;
  s.seed = 123;
  const auto e = run_ensemble_mcmc(standard_normal(2), s);
  ASSERT_EQ(e.sample_count(), 100000u);
  EXPECT_GT(e.acceptance_rate, 0.0);
  EXPECT_LT(e.acceptance_rate, 1.0);
  const auto x = e.column(0), y = e.column(1);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  EXPECT_LT(std::abs(mx), 3.0 * walker_mean_se(e, 0));
  EXPECT_LT(std::abs(my), 3.0 * walker_mean_se(e, 1));
  double sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  EXPECT_NEAR(sxx / n, 1.0, 0.05);
  EXPECT_NEAR(syy / n, 1.0, 0.05);
  EXPECT_NEAR(sxy / n, 0.0, 0.05);
}

TEST(EnsembleSampler, UniformTargetPassesKolmogorovSmirnov) {
  LogDensity t;
  t.dim = 1;
  t.bounds = {Bounds{0.0, 1.0}};
  t.evaluate = [](std::span<const double>) { return 0.0; };
  EnsembleSettings s;
  s.walkers = 40;
  s.steps = 25100;
  s.n_burn = 100;
  s.thin = 50;
  s.seed = 7;
  auto v = run_ensemble_mcmc(t, s).column(0);
  std::sort(v.begin(), v.end());
  double d = 0;
  const double n = static_cast<double>(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    d = std::max({d, std::abs((i + 1) / n - v[i]), std::abs(v[i] - i / n)});
  EXPECT_LT(d, 1.628 / std::sqrt(n));  // 1% critical value
}

TEST(EnsembleSampler, OneDimensionalGaussianConvergesWithEffort) {
  // Tolerance schedule: error shrinks as walkers x steps grows.
  const std::vector<std::pair<std::size_t, double>> schedule{{2000, 0.15}, {20000, 0.05}};
  for (const auto& [steps, tol] : schedule) {
    EnsembleSettings s;
    s.walkers = 20;
    s.steps = steps;
    s.n_burn = 100;
    s.thin = 5;
    s.seed = 31;
    const auto v = run_ensemble_mcmc(standard_normal(1), s).column(0);
    double m = 0, m2 = 0;
    for (double x : v) {
      m += x;
      m2 += x * x;
    }
    m /= static_cast<double>(v.size());
    m2 /= static_cast<double>(v.size());
    EXPECT_NEAR(m, 0.0, tol) << steps;
    EXPECT_NEAR(m2 - m * m, 1.0, 2.0 * tol) << steps;
  }
}

TEST(EnsembleSampler, RetainedCountArithmetic) {
  EnsembleSettings s;
  s.walkers = 6;
  s.steps = 107;
  s.n_burn = 10;
  s.thin = 7;
  const auto e = run_ensemble_mcmc(standard_normal(2), s);
  EXPECT_EQ(e.kept_per_walker(), 13u);  // floor(97 / 7)
  EXPECT_EQ(e.sample_count(), 78u);
  EXPECT_EQ(e.samples.size(), 78u * 2u);
}

TEST(EnsembleSampler, SeedDeterminism) {
  EnsembleSettings s;
  s.walkers = 8;
  s.steps = 300;
  s.seed = 5;
  EXPECT_EQ(run_ensemble_mcmc(standard_normal(3), s).samples, run_ensemble_mcmc(standard_normal(3), s).samples);
}

TEST(EnsembleSampler, RejectsInvalidSetups) {
  EnsembleSettings s;
  s.walkers = 3;
  EXPECT_THROW(run_ensemble_mcmc(standard_normal(2), s), ValidationError);
  s.walkers = 2;
  EXPECT_THROW(run_ensemble_mcmc(standard_normal(2), s), ValidationError);
  LogDensity nowhere = standard_normal(1);
  nowhere.evaluate = [](std::span<const double>) { return kNegInf; };
  s.walkers = 4;
  EXPECT_THROW(run_ensemble_mcmc(nowhere, s), RuntimeError);
}

TEST(EnsembleSampler, NeverAcceptsOutsideSupport) {
  LogDensity t;
  t.dim = 2;
  t.bounds.assign(2, Bounds{-1.0, 1.0});
  t.evaluate = [](std::span<const double> x) { return x[0] + x[1] > 0.5 ? kNegInf : 0.0; };
  EnsembleSettings s;
  s.walkers = 10;
  s.steps = 2000;
  const auto e = run_ensemble_mcmc(t, s);
  for (std::size_t i = 0; i < e.sample_count(); ++i) {
    const auto p = e.sample(i);
    EXPECT_LE(p[0] + p[1], 0.5);
  }
}

TEST(Summary, UniformGridQuantiles) {
  std::vector<double> v(1000);
  for (int i = 0; i < 1000; ++i) v[i] = (i + 1) / 1000.0;
  const auto s = summarize_samples(v);
  EXPECT_NEAR(s.ci_lower, 0.025, 1e-3);
  EXPECT_NEAR(s.ci_upper, 0.975, 1e-3);
  EXPECT_NEAR(s.mean, 0.5005, 1e-12);
}

TEST(Summary, DegenerateSample) {
  const auto s = summarize_samples(std::vector<double>(200, 2.5));
  EXPECT_EQ(s.mean, 2.5);
  EXPECT_EQ(s.map, 2.5);
  EXPECT_EQ(s.ci_lower, 2.5);
  EXPECT_EQ(s.ci_upper, 2.5);
}

TEST(Summary, NormalMapNearZeroAndTooFewSamples) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> normal;
  std::vector<double> v(100000);
  for (double& x : v) x = normal(rng);
  EXPECT_NEAR(summarize_samples(v).map, 0.0, 0.1);
  EXPECT_THROW(summarize_samples(std::vector<double>(99, 1.0)), ValidationError);
}

TEST(Priors, PlugInValues) {
  EXPECT_NEAR(std::exp(priors::flat_line_invariant(3.0, 0.0)), 1.0 / (2.0 * std::numbers::pi), 1e-15);
  EXPECT_EQ(priors::jeffreys_scale(1.0), 0.0);
  EXPECT_NEAR(priors::gaussian(0.0, 0.0, 4.0), -std::log(4.0 * std::sqrt(2.0 * std::numbers::pi)), 1e-15);
  EXPECT_NEAR(priors::ou_invariant(1.0), -std::log(2.0 * std::numbers::pi) - 1.5 * std::log(2.0), 1e-15);
  EXPECT_THROW(priors::jeffreys_scale(0.0), ValidationError);
  EXPECT_THROW(priors::ou_invariant(-1.0), ValidationError);
  EXPECT_THROW(priors::make(priors::Kind::gaussian, {0.0}), ValidationError);
  const auto g = priors::make(priors::Kind::gaussian, {1.0, 8.0});
  const double at[] = {1.0};
  EXPECT_NEAR(g(at), priors::gaussian(1.0, 1.0, 8.0), 0.0);
}

TEST(Priors, IntegrateToFiniteValuesOverTheirRanges) {
  auto integrate = [](auto f, double lo, double hi) {
    // Log-spaced trapezoid for positive ranges, linear otherwise.
    const int n = 200000;
    double total = 0;
    const bool log_grid = lo > 0.0;
    auto at = [&](int i) {
      const double u = static_cast<double>(i) / n;
      return log_grid ? lo * std::pow(hi / lo, u) : lo + (hi - lo) * u;
    };
    for (int i = 0; i < n; ++i) {
      const double a = at(i), b = at(i + 1);
      total += 0.5 * (std::exp(f(a)) + std::exp(f(b))) * (b - a);
    }
    return total;
  };
  const double line = integrate([](double s) { return priors::flat_line_invariant(0.0, s); }, -50.0, 50.0);
  const double jeff = integrate([](double s) { return priors::jeffreys_scale(s); }, 1e-8, 50.0);
  const double ou = integrate([](double s) { return priors::ou_invariant(s); }, 1e-8, 50.0);
  const double gauss = integrate([](double s) { return priors::gaussian(s, 0.0, 4.0); }, -50.0, 50.0);
  for (double v : {line, jeff, ou, gauss}) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GT(v, 0.0);
  }
  EXPECT_NEAR(line, 1.0 / std::numbers::pi, 1e-3);  // ∫ (1+s²)^{-3/2} ds = 2 over ℝ
  EXPECT_NEAR(jeff, std::log(50.0 / 1e-8), 1e-3);
  EXPECT_NEAR(gauss, 1.0, 1e-6);
}

TEST(Persistence, RoundTrip) {
  EnsembleSettings s;
  s.walkers = 6;
  s.steps = 50;
  s.n_burn = 5;
  s.thin = 3;
  s.seed = 77;
  const auto e = run_ensemble_mcmc(standard_normal(3), s);
  const auto stem = std::filesystem::temp_directory_path() / "mcorr_bayes_tests" / "chain";
  save_ensemble(stem, e);
  const auto back = load_ensemble(stem);
  EXPECT_EQ(back.samples, e.samples);
  EXPECT_EQ(back.n_burn, 5u);
  EXPECT_EQ(back.thin, 3u);
  EXPECT_EQ(back.seed, 77u);
  EXPECT_EQ(back.bounds.size(), 3u);
}
