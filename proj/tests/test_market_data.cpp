#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "mcorr/market_data.hpp"

namespace fs = std::filesystem;
using namespace mcorr;

namespace {

fs::path temp_file(const std::string& name, const std::string& text) {
  const fs::path dir = fs::temp_directory_path() / "mcorr_market_tests";
  fs::create_directories(dir);
  const fs::path p = dir / name;
  std::ofstream(p) << text;
  return p;
}

ReturnMatrix returns_from(std::vector<std::vector<double>> r) {
  ReturnMatrix rm;
  for (std::size_t a = 0; a < r.size(); ++a) rm.assets.push_back("A" + std::to_string(a));
  rm.returns = std::move(r);
  return rm;
}

// Pre-normalised input so mean_correlation sees exactly these values.
ReturnMatrix normalized_from(std::vector<std::vector<double>> z) {
  ReturnMatrix rm = returns_from(z);
  rm.normalized = std::move(z);
  rm.window_n = 1;
  return rm;
}

// Brute-force mean of all M² Pearson correlations over one window.
double brute_mean_corr(const std::vector<std::vector<double>>& z, std::size_t lo, std::size_t tau) {
  const std::size_t m = z.size();
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double mi = 0, mj = 0;
      for (std::size_t t = lo; t < lo + tau; ++t) {
        mi += z[i][t];
        mj += z[j][t];
      }
      mi /= tau;
      mj /= tau;
      double sij = 0, sii = 0, sjj = 0;
      for (std::size_t t = lo; t < lo + tau; ++t) {
        sij += (z[i][t] - mi) * (z[j][t] - mj);
        sii += (z[i][t] - mi) * (z[i][t] - mi);
        sjj += (z[j][t] - mj) * (z[j][t] - mj);
      }
      total += sij / std::sqrt(sii * sjj);
    }
  return total / static_cast<double>(m * m);
}

}  // namespace

TEST(LoadPrices, DropsAssetsAboveMissingFraction) {
  // 1000 rows: A complete, B 4 gaps (0.4%), C 20 gaps (2%).
  std::string csv = "date,A,B,C\n";
  for (int t = 0; t < 1000; ++t) {
    const std::string b = (t % 250 == 100) ? "" : std::to_string(50.0 + t * 0.01);
    const std::string c = (t % 50 == 10) ? "" : std::to_string(20.0 + t * 0.01);
    csv += std::to_string(t) + "," + std::to_string(100.0 + t) + "," + b + "," + c + "\n";
  }
  const auto pm = load_prices(temp_file("filter.csv", csv), 0.005);
  ASSERT_EQ(pm.n_assets(), 2u);
  EXPECT_EQ(pm.assets[0], "A");
  EXPECT_EQ(pm.assets[1], "B");
  ASSERT_EQ(pm.dropped_assets.size(), 1u);
  EXPECT_EQ(pm.dropped_assets[0], "C");
}

TEST(LoadPrices, InterpolatesInteriorAndFillsEdges) {
  const auto pm = load_prices(temp_file("gaps.csv", "date,A,B\n1,100,\n2,,50\n3,102,60\n"), 0.5);
  ASSERT_EQ(pm.n_assets(), 2u);
  EXPECT_DOUBLE_EQ(pm.prices[0][1], 101.0);
  EXPECT_DOUBLE_EQ(pm.prices[1][0], 50.0);
  EXPECT_DOUBLE_EQ(pm.prices[1][2], 60.0);
  EXPECT_TRUE(pm.missing_mask[0][1]);
  EXPECT_TRUE(pm.missing_mask[1][0]);
  EXPECT_FALSE(pm.missing_mask[0][0]);
}

TEST(LoadPrices, Errors) {
  EXPECT_THROW(load_prices("/nonexistent/prices.csv"), std::exception);
  EXPECT_THROW(load_prices(temp_file("nonmono.csv", "date,A\n2,1\n1,2\n3,3\n")), ValidationError);
  EXPECT_THROW(load_prices(temp_file("allbad.csv", "date,A\n1,\n2,\n3,1\n"), 0.1), ValidationError);
  EXPECT_THROW(load_prices(temp_file("negative.csv", "date,A\n1,1\n2,-2\n")), ValidationError);
}

TEST(ComputeReturns, Examples) {
  PriceMatrix pm;
  pm.assets = {"A", "B", "C"};
  pm.dates = {"1", "2", "3"};
  pm.prices = {{100, 110, 99}, {5, 5, 5}, {1, 2, 4}};
  const auto rm = compute_returns(pm);
  ASSERT_EQ(rm.length(), 2u);
  EXPECT_NEAR(rm.returns[0][0], 0.10, 1e-15);
  EXPECT_NEAR(rm.returns[0][1], -0.10, 1e-15);
  EXPECT_EQ(rm.returns[1][0], 0.0);
  EXPECT_EQ(rm.returns[1][1], 0.0);
  EXPECT_EQ(rm.returns[2][0], 1.0);

  PriceMatrix two;
  two.assets = {"A"};
  two.dates = {"1", "2"};
  two.prices = {{1, 2}};
  EXPECT_EQ(compute_returns(two).returns[0], std::vector<double>{1.0});

  pm.prices[0][1] = 0.0;
  EXPECT_THROW(compute_returns(pm), ValidationError);
}

TEST(LocalNormalize, AlternatingSeriesGivesUnitMagnitude) {
  std::vector<double> r(20);
  for (std::size_t t = 0; t < r.size(); ++t) r[t] = t % 2 == 0 ? 1.0 : -1.0;
  const auto rm = local_normalize(returns_from({r}), 2);
  EXPECT_EQ(rm.first_valid, 1u);
  EXPECT_TRUE(std::isnan(rm.normalized[0][0]));
  for (std::size_t t = 1; t < r.size(); ++t) EXPECT_NEAR(std::abs(rm.normalized[0][t]), 1.0, 1e-12);
}

TEST(LocalNormalize, ConstantReturnsFail) {
  try {
    local_normalize(returns_from({{0.01, 0.01, 0.01, 0.01, 0.01}}), 3);
    FAIL() << "expected a zero-variance error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("A0"), std::string::npos);
  }
}

TEST(LocalNormalize, TrailingMomentsAtWindowEnd) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal(0.001, 0.02);
  std::vector<double> r(200);
  for (double& v : r) v = normal(rng);
  const std::size_t n = 13;
  const auto rm = local_normalize(returns_from({r}), n);
  // z_t = (R_t - mean) / sd of the trailing window: re-normalising the window's
  // own values reproduces z_t, so mean(R) + z_t sd(R) = R_t.
  for (std::size_t t = n - 1; t < r.size(); ++t) {
    double m = 0, m2 = 0;
    for (std::size_t u = t + 1 - n; u <= t; ++u) {
      m += r[u];
      m2 += r[u] * r[u];
    }
    m /= n;
    m2 /= n;
    EXPECT_NEAR(rm.normalized[0][t], (r[t] - m) / std::sqrt(m2 - m * m), 1e-10);
  }
}

TEST(MeanCorrelation, IdenticalAssetsGiveOne) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> normal;
  std::vector<double> z(40);
  for (double& v : z) v = normal(rng);
  const auto cs = mean_correlation(normalized_from({z, z, z}), 5, 3, WindowMode::trailing);
  for (double v : cs.values) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(MeanCorrelation, OppositeAssetsGiveZero) {
  std::vector<double> z{0.3, -1.2, 0.5, 2.0, -0.7, 0.1};
  std::vector<double> neg(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) neg[i] = -z[i];
  const auto cs = mean_correlation(normalized_from({z, neg}), 6, 1, WindowMode::trailing);
  ASSERT_EQ(cs.size(), 1u);
  EXPECT_NEAR(cs.values[0], 0.0, 1e-12);
}

TEST(MeanCorrelation, MatchesBruteForcePearson) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> normal;
  std::vector<std::vector<double>> z(3, std::vector<double>(52));
  for (auto& row : z)
    for (double& v : row) v = normal(rng);
  const auto cs = mean_correlation(normalized_from(z), 5, 5, WindowMode::trailing);
  ASSERT_EQ(cs.size(), 10u);  // floor((52 - 5) / 5) + 1
  for (std::size_t w = 0; w < cs.size(); ++w) {
    EXPECT_GE(cs.values[w], -1.0);
    EXPECT_LE(cs.values[w], 1.0);
    EXPECT_NEAR(cs.values[w], brute_mean_corr(z, 5 * w, 5), 1e-12);
    EXPECT_DOUBLE_EQ(cs.centers[w], 5.0 * w + 4.0);
  }
}

TEST(MeanCorrelation, ShiftSubsamplesUnitShift) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal;
  std::vector<std::vector<double>> z(4, std::vector<double>(80));
  for (auto& row : z)
    for (double& v : row) v = normal(rng);
  const auto rm = normalized_from(z);
  const auto every = mean_correlation(rm, 7, 1, WindowMode::centered);
  const auto strided = mean_correlation(rm, 7, 4, WindowMode::centered);
  for (std::size_t w = 0; w < strided.size(); ++w) {
    EXPECT_EQ(strided.values[w], every.values[4 * w]);
    EXPECT_EQ(strided.centers[w], every.centers[4 * w]);
  }
  EXPECT_DOUBLE_EQ(every.centers[0], 3.0);
}

TEST(MeanCorrelation, DegenerateWindowIsSkippedAndTauChecked) {
  std::vector<double> a{1, 2, 3, 4, 5, 6, 7, 8};
  std::vector<double> b{1, -1, 2, 2, 2, 2, 0, 1};
  const auto cs = mean_correlation(normalized_from({a, b}), 3, 1, WindowMode::trailing);
  EXPECT_EQ(cs.skipped_windows, (std::vector<std::size_t>{2, 3}));
  EXPECT_EQ(cs.size(), 4u);
  EXPECT_THROW(mean_correlation(normalized_from({a, b}), 9, 1, WindowMode::trailing), ValidationError);
}

TEST(Pipeline, DeterministicAndRoundTrips) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> normal;
  std::string csv = "date,A,B,C\n";
  std::vector<double> p{100, 50, 20};
  for (int t = 0; t < 120; ++t) {
    const double f = normal(rng);
    csv += std::to_string(t);
    for (double& v : p) {
      v *= 1.0 + 0.01 * (0.5 * f + normal(rng));
      csv += "," + std::to_string(v);
    }
    csv += "\n";
  }
  const auto path = temp_file("pipeline.csv", csv);
  PreprocessSettings s;
  const auto a = preprocess_prices(load_prices(path), s);
  const auto b = preprocess_prices(load_prices(path), s);
  EXPECT_EQ(a.values, b.values);
  const fs::path out = fs::temp_directory_path() / "mcorr_market_tests" / "series.csv";
  write_series(out, a);
  const auto c = read_series(out);
  ASSERT_EQ(c.size(), a.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(c.values[i], a.values[i]);
  EXPECT_EQ(c.tau, 5u);
  EXPECT_EQ(c.window_mode, WindowMode::trailing);
}
