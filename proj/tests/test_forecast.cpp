#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "mcorr/forecast.hpp"
#include "mcorr/sde_sim.hpp"

using namespace mcorr;

TEST(Acf, LagZeroIsOneAndWhiteNoiseIsSmall) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> normal;
  std::vector<double> x(100000);
  for (double& v : x) v = normal(rng);
  const auto r = acf(x, 50);
  EXPECT_EQ(r[0], 1.0);
  for (std::size_t k = 1; k <= 50; ++k) EXPECT_LT(std::abs(r[k]), 0.02) << k;
}

TEST(Acf, AlternatingSignApproachesMinusOne) {
  std::vector<double> x(10001);
  for (std::size_t t = 0; t < x.size(); ++t) x[t] = t % 2 == 0 ? 1.0 : -1.0;
  EXPECT_NEAR(acf(x, 1)[1], -1.0, 1e-3);
  EXPECT_THROW(acf(std::vector<double>(10, 3.0), 2), ValidationError);
  EXPECT_THROW(acf(std::vector<double>{1, 2}, 2), ValidationError);
}

TEST(Increments, LinearSeriesIsPointMass) {
  std::vector<double> x(50);
  for (std::size_t t = 0; t < x.size(); ++t) x[t] = 0.25 * static_cast<double>(t);
  const auto d = increment_distribution(x, 1);
  ASSERT_TRUE(d.point_mass.has_value());
  EXPECT_DOUBLE_EQ(*d.point_mass, 0.25);
  EXPECT_TRUE(d.grid.empty());
}

TEST(Increments, WhiteNoiseLagOneMatchesNormalVarianceTwo) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal;
  std::vector<double> x(100001);
  for (double& v : x) v = normal(rng);
  const auto d = increment_distribution(x, 1);
  ASSERT_EQ(d.grid.size(), kKdeGridPoints);
  EXPECT_EQ(d.lag, 1u);
  double worst = 0;
  for (std::size_t i = 0; i < d.grid.size(); ++i) {
    const double g = d.grid[i];
    const double truth = std::exp(-g * g / 4.0) / std::sqrt(4.0 * std::numbers::pi);
    worst = std::max(worst, std::abs(d.density[i] - truth));
  }
  EXPECT_LT(worst, 0.02);
  // Grid spans the data range plus three bandwidths.
  double lo = 1e300, hi = -1e300;
  for (std::size_t t = 1; t < x.size(); ++t) {
    lo = std::min(lo, x[t] - x[t - 1]);
    hi = std::max(hi, x[t] - x[t - 1]);
  }
  EXPECT_DOUBLE_EQ(d.grid.front(), lo - 3.0 * d.bandwidth);
  EXPECT_NEAR(d.grid.back(), hi + 3.0 * d.bandwidth, 1e-12);
}

TEST(PredictOneStep, Examples) {
  GleModel flat{{-1.0, 1.0}, {0.0}, {1.0}, {0.0, 0.0}, 1.0};
  const std::vector<double> hist{0.2, -0.4, 0.7};
  EXPECT_EQ(predict_one_step(flat, hist), 0.7);
  GleModel kernel{{-10.0, 10.0}, {0.0}, {1.0}, {-1.0}, 1.0};
  EXPECT_EQ(predict_one_step(kernel, std::vector<double>{2.0, 3.0}), 1.0);
  EXPECT_THROW(predict_one_step(kernel, std::vector<double>{3.0}), ValidationError);
}

TEST(PredictOneStep, IsTheMeanOfTheSimulatedNextState) {
  GleModel m{{-1.0, 0.0, 1.0}, {0.3, -0.2}, {0.5, 0.8}, {-0.15, 0.05}, 0.2};
  const std::vector<double> hist{0.3, -0.1, 0.25};
  const double expected = predict_one_step(m, hist);
  const std::size_t draws = 100000;
  double sum = 0;
  for (std::size_t i = 0; i < draws; ++i) {
    SimConfig cfg;
    cfg.step_h = 0.2;
    cfg.n_steps = 1;
    cfg.seed = i;
    cfg.initial_state = hist[2];
    cfg.history = {hist[0], hist[1]};
    sum += simulate_gle(m, cfg).x[1];
  }
  const double sd = std::sqrt(0.2 * m.diffusion_at(hist[2]));
  EXPECT_NEAR(sum / draws, expected, 3.0 * sd / std::sqrt(static_cast<double>(draws)));
}

TEST(CoefficientOfPrediction, EdgeCases) {
  const std::vector<double> y{1.0, 3.0, 2.0, 5.0};
  EXPECT_EQ(coefficient_of_prediction(y, y), 1.0);
  EXPECT_NEAR(coefficient_of_prediction(y, std::vector<double>(4, 2.75)), 0.0, 1e-15);
  EXPECT_LT(coefficient_of_prediction(y, std::vector<double>{1.0, 3.0, 2.0, 5.1}), 1.0);
  EXPECT_THROW(coefficient_of_prediction(std::vector<double>(3, 1.0), std::vector<double>(3, 1.0)), ValidationError);
  EXPECT_THROW(coefficient_of_prediction(y, std::vector<double>{1.0}), ValidationError);
}

TEST(CoefficientOfPrediction, NeverAboveOne) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> normal;
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> y(20), yhat(20);
    for (std::size_t i = 0; i < 20; ++i) {
      y[i] = normal(rng);
      yhat[i] = y[i] + (rep % 2 == 0 ? 0.1 : 10.0) * normal(rng);
    }
    EXPECT_LT(coefficient_of_prediction(y, yhat), 1.0);
  }
}

TEST(Benchmark, NaiveOnRampMatchesClosedForm) {
  const double c = 0.5;
  std::vector<double> x(100);
  for (std::size_t t = 0; t < x.size(); ++t) x[t] = c * static_cast<double>(t);
  const auto rep = run_forecast_benchmark(x, 0.8, {parse_forecast_method("naive")}, GleFitSettings{});
  ASSERT_EQ(rep.split, 80u);
  const auto& m = rep.methods.at("naive");
  ASSERT_FALSE(m.error.has_value());
  // Targets x[1..79] and x[80..99]; every naive error is exactly c.
  auto closed_form = [c](std::size_t first, std::size_t last) {
    const double n = static_cast<double>(last - first + 1);
    double mean = 0;
    for (std::size_t t = first; t <= last; ++t) mean += c * t;
    mean /= n;
    double ss = 0;
    for (std::size_t t = first; t <= last; ++t) ss += (c * t - mean) * (c * t - mean);
    return 1.0 - n * c * c / ss;
  };
  EXPECT_NEAR(m.rho2_in, closed_form(1, 79), 1e-12);
  EXPECT_NEAR(m.rho2_out, closed_form(80, 99), 1e-12);
  EXPECT_EQ(m.out_actual.size(), 20u);
}

TEST(Benchmark, FittedLangevinBeatsIncrementVarianceOnOu) {
  SimConfig cfg;
  cfg.step_h = 1.0;
  cfg.n_steps = 3999;
  cfg.seed = 5;
  const auto x = simulate_langevin([](double v) { return -0.3 * v; }, [](double) { return 0.1; }, cfg).x;
  GleFitSettings fs;
  fs.steps = 3000;
  fs.n_burn = 1000;
  fs.thin = 10;
  const auto rep = run_forecast_benchmark(x, 0.8, {parse_forecast_method("naive"), parse_forecast_method("le")}, fs);
  const auto& le = rep.methods.at("le");
  ASSERT_FALSE(le.error.has_value());
  double mse = 0, inc = 0, inc_mean = 0;
  for (std::size_t i = 0; i < le.out_actual.size(); ++i) mse += std::pow(le.out_predicted[i] - le.out_actual[i], 2);
  mse /= static_cast<double>(le.out_actual.size());
  std::vector<double> d;
  for (std::size_t t = 1; t < x.size(); ++t) d.push_back(x[t] - x[t - 1]);
  for (double v : d) inc_mean += v;
  inc_mean /= static_cast<double>(d.size());
  for (double v : d) inc += (v - inc_mean) * (v - inc_mean);
  inc /= static_cast<double>(d.size() - 1);
  EXPECT_LT(mse, inc);
  EXPECT_GT(le.rho2_out, rep.methods.at("naive").rho2_out);
}

TEST(Benchmark, MethodParsing) {
  EXPECT_FALSE(parse_forecast_method("naive").k_max.has_value());
  EXPECT_EQ(*parse_forecast_method("le").k_max, 0u);
  EXPECT_EQ(*parse_forecast_method("gle3").k_max, 3u);
  EXPECT_THROW(parse_forecast_method("gle"), ValidationError);
  EXPECT_THROW(parse_forecast_method("arima"), ValidationError);
  EXPECT_THROW(run_forecast_benchmark(std::vector<double>(100, 1.0), 1.0, {}, GleFitSettings{}), ValidationError);
}
