#pragma once

// Price ingestion, return normalisation and the mean market correlation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcorr/error.hpp"
#include "mcorr/io.hpp"

namespace mcorr {

/// Aligned daily prices, one row per asset. `missing_mask` records which
/// entries were empty in the input before gap repair.
struct PriceMatrix {
  std::vector<std::string> assets;
  std::vector<std::string> dates;
  std::vector<std::vector<double>> prices;  // [asset][date]
  std::vector<std::vector<bool>> missing_mask;
  std::vector<std::string> dropped_assets;

  std::size_t n_assets() const { return assets.size(); }
  std::size_t n_dates() const { return dates.size(); }
};

/// Relative price changes and their locally normalised counterpart.
/// `normalized[a][t]` is NaN for t < first_valid (no full trailing window).
struct ReturnMatrix {
  std::vector<std::string> assets;
  std::vector<std::vector<double>> returns;     // [asset][date - 1]
  std::vector<std::vector<double>> normalized;  // empty until local_normalize
  std::size_t window_n = 0;
  std::size_t first_valid = 0;

  std::size_t n_assets() const { return returns.size(); }
  std::size_t length() const { return returns.empty() ? 0 : returns.front().size(); }
};

enum class WindowMode { centered, trailing };

inline const char* to_string(WindowMode m) { return m == WindowMode::centered ? "centered" : "trailing"; }

inline WindowMode window_mode_from_string(const std::string& s) {
  if (s == "centered") return WindowMode::centered;
  if (s == "trailing") return WindowMode::trailing;
  throw ValidationError("unknown window_mode '" + s + "' (expected centered|trailing)");
}

/// Mean correlation C̄ per retained window. Centers are indices into the
/// return columns (return t is the change from price t to price t+1).
struct CorrelationSeries {
  std::vector<double> values;
  std::vector<double> centers;
  std::size_t tau = 0;
  std::size_t shift = 0;
  std::size_t norm_window = 0;
  WindowMode window_mode = WindowMode::trailing;
  std::vector<std::size_t> skipped_windows;  // window ordinals with a zero-variance asset
  std::vector<std::string> dropped_assets;

  std::size_t size() const { return values.size(); }
};

namespace detail {

inline bool dates_increasing(const std::vector<std::string>& dates) {
  std::vector<double> numeric;
  numeric.reserve(dates.size());
  for (const auto& d : dates) {
    auto v = io::parse_double(d);
    if (!v) {
      numeric.clear();
      break;
    }
    numeric.push_back(*v);
  }
  for (std::size_t i = 1; i < dates.size(); ++i) {
    const bool ok = numeric.empty() ? dates[i - 1] < dates[i] : numeric[i - 1] < numeric[i];
    if (!ok) return false;
  }
  return true;
}

// Linear interpolation between nearest valid neighbours, nearest-value fill
// at the ends. Requires at least one valid entry.
inline void repair_gaps(std::vector<double>& col, const std::vector<bool>& missing) {
  const std::size_t n = col.size();
  std::optional<std::size_t> prev;
  for (std::size_t t = 0; t < n; ++t) {
    if (missing[t]) continue;
    if (!prev && t > 0) {
      for (std::size_t u = 0; u < t; ++u) col[u] = col[t];
    } else if (prev && t > *prev + 1) {
      const double a = col[*prev], b = col[t];
      const double span = static_cast<double>(t - *prev);
      for (std::size_t u = *prev + 1; u < t; ++u) col[u] = a + (b - a) * static_cast<double>(u - *prev) / span;
    }
    prev = t;
  }
  for (std::size_t u = *prev + 1; u < n; ++u) col[u] = col[*prev];
}

}  // namespace detail

/// Reads `date,ASSET1,ASSET2,...` CSV. Assets whose missing fraction exceeds
/// `max_missing_fraction` are dropped and listed in `dropped_assets`.
inline PriceMatrix load_prices(const std::filesystem::path& path, double max_missing_fraction = 0.005) {
  const auto lines = io::read_lines(path);
  if (lines.size() < 2) throw ValidationError("price file has no data rows: " + path.string());
  const auto header = io::split_csv_line(lines[0]);
  if (header.size() < 2) throw ValidationError("price file needs a date column and at least one asset column");
  const std::size_t n_cols = header.size() - 1;
  const std::size_t n_rows = lines.size() - 1;

  std::vector<std::string> dates(n_rows);
  std::vector<std::vector<double>> cols(n_cols, std::vector<double>(n_rows, 0.0));
  std::vector<std::vector<bool>> missing(n_cols, std::vector<bool>(n_rows, false));
  for (std::size_t r = 0; r < n_rows; ++r) {
    const auto cells = io::split_csv_line(lines[r + 1]);
    if (cells.size() != header.size())
      throw ValidationError("row " + std::to_string(r + 2) + " has " + std::to_string(cells.size()) +
                            " cells, expected " + std::to_string(header.size()));
    dates[r] = cells[0];
    for (std::size_t c = 0; c < n_cols; ++c) {
      const auto& cell = cells[c + 1];
      if (cell.empty() || cell == "NaN" || cell == "nan") {
        missing[c][r] = true;
        continue;
      }
      auto v = io::parse_double(cell);
      if (!v || !std::isfinite(*v))
        throw ValidationError("unparseable price '" + cell + "' for " + header[c + 1] + " at row " + std::to_string(r + 2));
      if (*v <= 0.0)
        throw ValidationError("non-positive price for " + header[c + 1] + " at row " + std::to_string(r + 2));
      cols[c][r] = *v;
    }
  }
  if (!detail::dates_increasing(dates)) throw ValidationError("dates are not strictly increasing in " + path.string());

  PriceMatrix pm;
  pm.dates = std::move(dates);
  for (std::size_t c = 0; c < n_cols; ++c) {
    const auto n_missing = static_cast<double>(std::count(missing[c].begin(), missing[c].end(), true));
    if (n_missing == static_cast<double>(n_rows) || n_missing / static_cast<double>(n_rows) > max_missing_fraction) {
      pm.dropped_assets.push_back(header[c + 1]);
      continue;
    }
    detail::repair_gaps(cols[c], missing[c]);
    pm.assets.push_back(header[c + 1]);
    pm.prices.push_back(std::move(cols[c]));
    pm.missing_mask.push_back(std::move(missing[c]));
  }
  if (pm.assets.empty()) throw ValidationError("no asset survives the missing-data filter in " + path.string());
  return pm;
}

inline ReturnMatrix compute_returns(const PriceMatrix& pm) {
  ReturnMatrix rm;
  rm.assets = pm.assets;
  rm.returns.resize(pm.n_assets());
  for (std::size_t a = 0; a < pm.n_assets(); ++a) {
    const auto& p = pm.prices[a];
    auto& r = rm.returns[a];
    r.resize(p.empty() ? 0 : p.size() - 1);
    for (std::size_t t = 0; t + 1 < p.size(); ++t) {
      if (p[t] == 0.0) throw ValidationError("zero price for asset " + pm.assets[a] + " at index " + std::to_string(t));
      r[t] = (p[t + 1] - p[t]) / p[t];
    }
  }
  return rm;
}

/// Standardises each return by the mean and population standard deviation of
/// the n most recent returns (window includes t). The first n-1 positions are
/// left as NaN.
inline ReturnMatrix local_normalize(ReturnMatrix rm, std::size_t n = 13) {
  if (n < 2) throw ValidationError("local normalisation window must be >= 2");
  if (rm.length() <= n) throw ValidationError("return series too short for local normalisation window");
  const std::size_t len = rm.length();
  rm.window_n = n;
  rm.first_valid = n - 1;
  rm.normalized.assign(rm.n_assets(), std::vector<double>(len, std::numeric_limits<double>::quiet_NaN()));
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t a = 0; a < rm.n_assets(); ++a) {
    const auto& r = rm.returns[a];
    for (std::size_t t = n - 1; t < len; ++t) {
      double mean = 0.0;
      for (std::size_t u = t + 1 - n; u <= t; ++u) mean += r[u];
      mean *= inv_n;
      double var = 0.0;
      for (std::size_t u = t + 1 - n; u <= t; ++u) var += (r[u] - mean) * (r[u] - mean);
      var *= inv_n;
      if (!(var > 1e-24 * mean * mean))
        throw ValidationError("zero local variance for asset " + rm.assets[a] + " at return index " + std::to_string(t));
      rm.normalized[a][t] = (r[t] - mean) / std::sqrt(var);
    }
  }
  return rm;
}

/// Mean of all N = (assets)^2 pairwise Pearson correlations (population
/// moments) over windows of `tau` normalised returns, advancing by `shift`.
/// Windows in which some asset has zero variance are skipped and recorded.
inline CorrelationSeries mean_correlation(const ReturnMatrix& rm, std::size_t tau, std::size_t shift,
                                          WindowMode mode) {
  if (tau < 2) throw ValidationError("tau must be >= 2");
  if (shift < 1) throw ValidationError("shift must be >= 1");
  if (rm.normalized.empty()) throw ValidationError("normalised returns are not available; run local_normalize first");
  const std::size_t len = rm.length();
  const std::size_t valid = len - rm.first_valid;
  if (tau > valid) throw ValidationError("tau exceeds the number of normalised returns");

  CorrelationSeries out;
  out.tau = tau;
  out.shift = shift;
  out.norm_window = rm.window_n;
  out.window_mode = mode;
  const std::size_t m = rm.n_assets();
  const double inv_tau = 1.0 / static_cast<double>(tau);
  std::vector<double> summed(tau);
  std::size_t ordinal = 0;
  for (std::size_t start = 0; start + tau <= valid; start += shift, ++ordinal) {
    const std::size_t lo = rm.first_valid + start;
    std::fill(summed.begin(), summed.end(), 0.0);
    bool degenerate = false;
    for (std::size_t a = 0; a < m && !degenerate; ++a) {
      const double* r = rm.normalized[a].data() + lo;
      double mean = 0.0;
      for (std::size_t u = 0; u < tau; ++u) mean += r[u];
      mean *= inv_tau;
      double var = 0.0;
      for (std::size_t u = 0; u < tau; ++u) var += (r[u] - mean) * (r[u] - mean);
      var *= inv_tau;
      if (!(var > 0.0)) {
        degenerate = true;
        break;
      }
      const double inv_sd = 1.0 / std::sqrt(var);
      for (std::size_t u = 0; u < tau; ++u) summed[u] += (r[u] - mean) * inv_sd;
    }
    if (degenerate) {
      out.skipped_windows.push_back(ordinal);
      continue;
    }
    // sum_{i,j} C_ij = (1/tau) sum_t (sum_i z_i(t))^2 with z the in-window z-scores.
    double total = 0.0;
    for (double s : summed) total += s * s;
    const double c_bar = total * inv_tau / static_cast<double>(m * m);
    out.values.push_back(std::clamp(c_bar, -1.0, 1.0));
    const double first = static_cast<double>(lo);
    out.centers.push_back(mode == WindowMode::centered ? first + 0.5 * static_cast<double>(tau - 1)
                                                       : first + static_cast<double>(tau - 1));
  }
  return out;
}

/// Full preprocessing chain from a price file.
struct PreprocessSettings {
  double max_missing_fraction = 0.005;
  std::size_t norm_window = 13;
  std::size_t tau = 5;
  std::size_t shift = 5;
  WindowMode window_mode = WindowMode::trailing;
};

inline CorrelationSeries preprocess_prices(const PriceMatrix& pm, const PreprocessSettings& s) {
  auto rm = local_normalize(compute_returns(pm), s.norm_window);
  auto series = mean_correlation(rm, s.tau, s.shift, s.window_mode);
  series.dropped_assets = pm.dropped_assets;
  return series;
}

inline io::json series_metadata(const CorrelationSeries& s) {
  return io::json{{"tau", s.tau},
                  {"shift", s.shift},
                  {"n", s.norm_window},
                  {"window_mode", to_string(s.window_mode)},
                  {"dropped_assets", s.dropped_assets},
                  {"skipped_windows", s.skipped_windows},
                  {"length", s.values.size()}};
}

/// Writes `center_index,c_bar` CSV plus a JSON sidecar (`<csv>.json`).
inline void write_series(const std::filesystem::path& csv, const CorrelationSeries& s) {
  io::write_csv(csv, {"center_index", "c_bar"}, {s.centers, s.values});
  io::write_json(csv.string() + ".json", series_metadata(s));
}

/// Reads a series CSV. Accepts `center_index,c_bar` or a single value column;
/// picks up the JSON sidecar when present.
inline CorrelationSeries read_series(const std::filesystem::path& csv) {
  const auto lines = io::read_lines(csv);
  if (lines.empty()) throw ValidationError("empty series file: " + csv.string());
  CorrelationSeries s;
  std::size_t first_row = 0;
  const auto head = io::split_csv_line(lines[0]);
  if (!io::parse_double(head.back())) first_row = 1;
  for (std::size_t r = first_row; r < lines.size(); ++r) {
    const auto cells = io::split_csv_line(lines[r]);
    const auto v = io::parse_double(cells.back());
    if (!v || !std::isfinite(*v)) throw ValidationError("bad value at line " + std::to_string(r + 1) + " of " + csv.string());
    s.values.push_back(*v);
    if (cells.size() >= 2) {
      const auto c = io::parse_double(cells.front());
      s.centers.push_back(c ? *c : static_cast<double>(s.values.size() - 1));
    } else {
      s.centers.push_back(static_cast<double>(s.values.size() - 1));
    }
  }
  const std::filesystem::path sidecar = csv.string() + ".json";
  if (std::filesystem::exists(sidecar)) {
    const auto meta = io::read_json(sidecar);
    s.tau = meta.value("tau", std::size_t{0});
    s.shift = meta.value("shift", std::size_t{0});
    s.norm_window = meta.value("n", std::size_t{0});
    if (meta.contains("window_mode")) s.window_mode = window_mode_from_string(meta["window_mode"].get<std::string>());
    if (meta.contains("dropped_assets")) s.dropped_assets = meta["dropped_assets"].get<std::vector<std::string>>();
  }
  return s;
}

}  // namespace mcorr
