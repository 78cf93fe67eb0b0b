#pragma once

// Goodness-of-fit diagnostics and one-step-ahead forecast scoring.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcorr/error.hpp"
#include "mcorr/gle_fit.hpp"
#include "mcorr/gle_model.hpp"
#include "mcorr/io.hpp"

namespace mcorr {

/// Biased sample autocorrelation r(0..max_lag).
inline std::vector<double> acf(std::span<const double> x, std::size_t max_lag) {
  if (x.size() <= max_lag) throw ValidationError("series must be longer than max_lag");
  const std::size_t n = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double denom = 0.0;
  for (double v : x) denom += (v - mean) * (v - mean);
  if (!(denom > 0.0)) throw ValidationError("ACF of a constant series is undefined");
  std::vector<double> r(max_lag + 1);
  for (std::size_t k = 0; k <= max_lag; ++k) {
    double num = 0.0;
    for (std::size_t t = 0; t + k < n; ++t) num += (x[t] - mean) * (x[t + k] - mean);
    r[k] = num / denom;
  }
  r[0] = 1.0;
  return r;
}

struct DensityEstimate {
  std::size_t lag = 1;
  std::size_t n = 0;
  std::vector<double> grid;
  std::vector<double> density;
  double bandwidth = 0.0;
  std::optional<double> point_mass;  // set instead of a KDE when all increments are equal
};

inline constexpr std::size_t kKdeGridPoints = 512;

/// Silverman's rule of thumb: 0.9 min(sd, IQR / 1.34) n^{-1/5}.
inline double silverman_bandwidth(std::span<const double> sorted) {
  const auto n = static_cast<double>(sorted.size());
  double mean = 0.0;
  for (double v : sorted) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : sorted) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / (n - 1.0));
  const double iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
  const double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
  return 0.9 * spread * std::pow(n, -0.2);
}

/// Gaussian KDE of values on an evenly spaced grid spanning the data range
/// plus three bandwidths on either side.
inline DensityEstimate kernel_density(std::span<const double> values, std::size_t grid_points = kKdeGridPoints) {
  if (values.size() < 2) throw ValidationError("density estimate needs at least two values");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  DensityEstimate out;
  out.n = sorted.size();
  if (sorted.front() == sorted.back()) {
    out.point_mass = sorted.front();
    return out;
  }
  const double bw = silverman_bandwidth(sorted);
  out.bandwidth = bw;
  const double lo = sorted.front() - 3.0 * bw, hi = sorted.back() + 3.0 * bw;
  out.grid.resize(grid_points);
  out.density.assign(grid_points, 0.0);
  const double norm = 1.0 / (static_cast<double>(sorted.size()) * bw * std::sqrt(2.0 * std::numbers::pi));
  const double cutoff = 8.0 * bw;
  for (std::size_t g = 0; g < grid_points; ++g) {
    const double pos = lo + (hi - lo) * static_cast<double>(g) / static_cast<double>(grid_points - 1);
    out.grid[g] = pos;
    // Contributions beyond 8 bandwidths are below 1e-14 and skipped.
    const auto first = std::lower_bound(sorted.begin(), sorted.end(), pos - cutoff);
    const auto last = std::upper_bound(sorted.begin(), sorted.end(), pos + cutoff);
    double acc = 0.0;
    for (auto it = first; it != last; ++it) {
      const double z = (pos - *it) / bw;
      acc += std::exp(-0.5 * z * z);
    }
    out.density[g] = acc * norm;
  }
  return out;
}

/// Density of the lag-j increments x_t - x_{t-j}.
inline DensityEstimate increment_distribution(std::span<const double> x, std::size_t lag) {
  if (lag < 1 || x.size() <= lag) throw ValidationError("increment lag must satisfy 1 <= lag < length");
  std::vector<double> inc(x.size() - lag);
  for (std::size_t t = lag; t < x.size(); ++t) inc[t - lag] = x[t] - x[t - lag];
  auto d = kernel_density(inc);
  d.lag = lag;
  return d;
}

/// Conditional mean of the next state: y_t + h (D1(bin(y_t)) + sum_k K_k y_{t-k}).
/// `history` is oldest first and ends with y_t.
inline double predict_one_step(const GleModel& model, std::span<const double> history) {
  const std::size_t k_max = model.k_max();
  if (history.size() < k_max + 1) throw ValidationError("prediction needs at least k_max + 1 past values");
  const std::size_t t = history.size() - 1;
  double memory = 0.0;
  for (std::size_t k = 1; k <= k_max; ++k) memory += model.kernel[k - 1] * history[t - k];
  return history[t] + model.step_h * (model.drift_at(history[t]) + memory);
}

/// rho² = 1 - sum (ŷ - y)² / sum (ȳ - y)².
inline double coefficient_of_prediction(std::span<const double> y, std::span<const double> yhat) {
  if (y.size() != yhat.size()) throw ValidationError("actual and predicted lengths differ");
  if (y.size() < 2) throw ValidationError("coefficient of prediction needs at least two points");
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(y.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ss_res += (yhat[i] - y[i]) * (yhat[i] - y[i]);
    ss_tot += (mean - y[i]) * (mean - y[i]);
  }
  if (!(ss_tot > 0.0)) throw ValidationError("coefficient of prediction undefined for constant actual values");
  return 1.0 - ss_res / ss_tot;
}

// ---------------------------------------------------------------------------
// Benchmark

enum class EstimateKind { map, mean };

struct ForecastMethod {
  std::string name;          // "naive", "le", "gle3", ...
  std::optional<std::size_t> k_max;  // nullopt for naive
};

/// "naive" | "le" (k=0) | "gle<k>" (e.g. gle3).
inline ForecastMethod parse_forecast_method(const std::string& name) {
  if (name == "naive") return {name, std::nullopt};
  if (name == "le") return {name, 0};
  if (name.rfind("gle", 0) == 0 && name.size() > 3) {
    const auto digits = name.substr(3);
    if (std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; }))
      return {name, static_cast<std::size_t>(std::stoul(digits))};
  }
  throw ValidationError("unknown forecast method '" + name + "' (expected naive|le|gle<k>)");
}

struct MethodForecast {
  std::vector<double> in_actual, in_predicted;
  std::vector<double> out_actual, out_predicted;
  double rho2_in = 0.0;
  double rho2_out = 0.0;
  std::optional<GleModel> model;
  std::optional<std::string> error;
};

struct ForecastReport {
  double alpha = 0.0;
  std::size_t split = 0;
  std::map<std::string, MethodForecast> methods;
};

/// Fits every model on x[0, split) with split = floor(alpha N). In-sample
/// targets are x[k+1 .. split) (k = the method's kernel length, 0 for naive);
/// out-of-sample targets are x[split .. N), always predicted from observed
/// history.
inline ForecastReport run_forecast_benchmark(std::span<const double> x, double alpha,
                                             const std::vector<ForecastMethod>& methods,
                                             const GleFitSettings& fit_settings,
                                             EstimateKind estimate = EstimateKind::map) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must lie in (0, 1)");
  ForecastReport rep;
  rep.alpha = alpha;
  rep.split = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(x.size())));
  if (rep.split < 3 || rep.split + 2 > x.size()) throw ValidationError("alpha leaves too little training or test data");
  const auto train = x.first(rep.split);

  for (const auto& m : methods) {
    MethodForecast mf;
    std::optional<GleModel> model;
    const std::size_t k = m.k_max.value_or(0);
    try {
      if (m.k_max) {
        auto settings = fit_settings;
        settings.k_max = *m.k_max;
        const auto fit = fit_gle(train, settings);
        model = estimate == EstimateKind::map ? fit.map_model : fit.mean_model;
      }
      auto predict = [&](std::size_t t) {  // forecast of x[t + 1] from x[0..t]
        return model ? predict_one_step(*model, x.first(t + 1)) : x[t];
      };
      for (std::size_t t = k; t + 1 < rep.split; ++t) {
        mf.in_actual.push_back(x[t + 1]);
        mf.in_predicted.push_back(predict(t));
      }
      for (std::size_t t = rep.split - 1; t + 1 < x.size(); ++t) {
        mf.out_actual.push_back(x[t + 1]);
        mf.out_predicted.push_back(predict(t));
      }
      mf.rho2_in = coefficient_of_prediction(mf.in_actual, mf.in_predicted);
      mf.rho2_out = coefficient_of_prediction(mf.out_actual, mf.out_predicted);
      mf.model = model;
    } catch (const std::exception& e) {
      mf.error = e.what();
    }
    rep.methods[m.name] = std::move(mf);
  }
  return rep;
}

inline io::json to_json(const ForecastReport& r) {
  io::json methods = io::json::object();
  for (const auto& [name, m] : r.methods) {
    io::json j;
    if (m.error) {
      j["error"] = *m.error;
    } else {
      j["rho2_in"] = m.rho2_in;
      j["rho2_out"] = m.rho2_out;
      j["n_in"] = m.in_actual.size();
      j["n_out"] = m.out_actual.size();
      if (m.model) j["model"] = to_json(*m.model);
    }
    methods[name] = j;
  }
  return io::json{{"alpha", r.alpha}, {"split_index", r.split}, {"methods", methods}};
}

}  // namespace mcorr
