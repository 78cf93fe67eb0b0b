#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "mcorr/forecast.hpp"
#include "mcorr/gle_fit.hpp"
#include "mcorr/io.hpp"
#include "mcorr/market_data.hpp"
#include "mcorr/resilience.hpp"
#include "mcorr/sde_sim.hpp"

namespace fs = std::filesystem;
using mcorr::io::json;

namespace {

constexpr const char* kToolVersion = "0.1.0";
constexpr int kManifestVersion = 1;

// ---------------------------------------------------------------------------
// Configuration

json default_config() {
  return json::parse(R"({
    "seed": 0,
    "threads": 0,
    "out": "runs",
    "no_subdir": false,
    "inputs": {"prices": null, "series": null, "model": null, "column": null},
    "preprocess": {"n": 13, "tau": 5, "shift": 5, "window_mode": "trailing", "max_missing_fraction": 0.005},
    "gle": {
      "n_bins": 10, "bin_mode": "equal_width", "k_max": 6, "step_h": 1.0,
      "priors": {"drift": [-50, 50], "diffusion": [1e-12, 50], "kernel": [-50, 50]},
      "mcmc": {"walkers": 100, "steps": 100000, "burn_in": 450, "thin": 450}
    },
    "forecast": {"alpha": [0.8, 0.85, 0.9], "methods": ["naive", "le", "gle3"], "estimate": "map"},
    "diagnose": {"max_lag": 30, "lags": [1], "sim_length": 100000, "estimate": "map"},
    "resilience": {
      "model_tag": "markov", "window_size": 500, "window_shift": 15, "gamma": 2.0, "step_h": 1.0,
      "priors": "main", "detrend_width": null,
      "mcmc": {"walkers": 50, "steps": 15000, "burn_in": 200, "thin": 10}
    },
    "simulate": {
      "kind": "synthetic", "n_steps": null, "step_h": null, "initial_state": null, "initial_hidden": 0.0,
      "synthetic": {"coupling_start": 0.5, "coupling_end": 4.0, "ou_rate": 0.1, "ou_diffusion": 0.1},
      "langevin": {"drift": [0.0, -1.0], "diffusion": 1.0},
      "two_scale": {"theta": [0.0, -1.0, 0.0, 0.0, 0.1, 2.0]}
    }
  })");
}

const std::map<std::string, json>& recipes() {
  static const std::map<std::string, json> r{
      {"weekly", json::parse(R"({"preprocess": {"tau": 5, "shift": 5, "window_mode": "trailing"}})")},
      {"monthly42", json::parse(R"({"preprocess": {"tau": 42, "shift": 1, "window_mode": "centered"}})")},
      {"overlap-artifact", json::parse(R"({
         "preprocess": {"tau": 42, "shift": 1, "window_mode": "centered"},
         "gle": {"k_max": 90, "mcmc": {"walkers": 200, "steps": 3000, "burn_in": 1000, "thin": 10}}})")},
      {"synthetic-resilience", json::parse(R"({
         "simulate": {"kind": "synthetic", "n_steps": 30000, "step_h": 0.06666666666666667},
         "resilience": {"window_size": 500, "window_shift": 15, "gamma": 2.0, "step_h": 0.06666666666666667,
                        "priors": "main", "mcmc": {"walkers": 50, "steps": 15000, "burn_in": 200, "thin": 10}}})")},
  };
  return r;
}

// Collects every configuration problem before failing.
class Checker {
 public:
  explicit Checker(const json& cfg) : cfg_(cfg) {}

  template <class T>
  T get(const std::string& path, T fallback = T{}) {
    const json::json_pointer ptr(path);
    if (!cfg_.contains(ptr)) {
      fail(path, "missing");
      return fallback;
    }
    try {
      return cfg_.at(ptr).get<T>();
    } catch (const json::exception&) {
      fail(path, "has the wrong type (" + cfg_.at(ptr).dump() + ")");
      return fallback;
    }
  }

  template <class T>
  std::optional<T> maybe(const std::string& path) {
    const json::json_pointer ptr(path);
    if (!cfg_.contains(ptr) || cfg_.at(ptr).is_null()) return std::nullopt;
    return get<T>(path);
  }

  std::size_t count(const std::string& path, std::size_t min) {
    const json::json_pointer ptr(path);
    if (cfg_.contains(ptr) && cfg_.at(ptr).is_number_integer() && cfg_.at(ptr).get<long long>() < 0) {
      fail(path, "must be >= " + std::to_string(min));
      return min;
    }
    const auto v = get<std::size_t>(path, min);
    require(v >= min, path, "must be >= " + std::to_string(min));
    return v;
  }

  mcorr::Bounds range(const std::string& path) {
    const auto v = get<std::vector<double>>(path);
    if (v.size() != 2) {
      fail(path, "must be a [lo, hi] pair");
      return {0.0, 1.0};
    }
    require(v[0] < v[1], path, "needs lo < hi");
    return {v[0], v[1]};
  }

  fs::path existing_file(const std::string& path, const std::string& what) {
    const auto p = maybe<std::string>(path);
    if (!p) {
      fail(path, what + " is required");
      return {};
    }
    if (!fs::is_regular_file(*p)) fail(path, "file not found: " + *p);
    return *p;
  }

  // Runs a conversion that may throw ValidationError and records its message.
  template <class Fn>
  auto attempt(const std::string& path, Fn&& fn) -> decltype(fn()) {
    try {
      return fn();
    } catch (const mcorr::ValidationError& e) {
      fail(path, e.what());
      return decltype(fn()){};
    }
  }

  void require(bool ok, const std::string& path, const std::string& msg) {
    if (!ok) fail(path, msg);
  }

  void fail(const std::string& path, const std::string& msg) { errors_.push_back(path + ": " + msg); }

  void finish() const {
    if (errors_.empty()) return;
    std::ostringstream os;
    os << "invalid configuration (" << errors_.size() << " problem" << (errors_.size() > 1 ? "s" : "") << ")";
    for (const auto& e : errors_) os << "\n  " << e;
    throw mcorr::ValidationError(os.str());
  }

 private:
  const json& cfg_;
  std::vector<std::string> errors_;
};

mcorr::PreprocessSettings preprocess_settings(Checker& c) {
  mcorr::PreprocessSettings s;
  s.norm_window = c.count("/preprocess/n", 2);
  s.tau = c.count("/preprocess/tau", 2);
  s.shift = c.count("/preprocess/shift", 1);
  s.window_mode = c.attempt("/preprocess/window_mode",
                            [&] { return mcorr::window_mode_from_string(c.get<std::string>("/preprocess/window_mode")); });
  s.max_missing_fraction = c.get<double>("/preprocess/max_missing_fraction");
  c.require(s.max_missing_fraction >= 0.0 && s.max_missing_fraction < 1.0, "/preprocess/max_missing_fraction",
            "must lie in [0, 1)");
  return s;
}

void mcmc_block(Checker& c, const std::string& base, std::size_t& walkers, std::size_t& steps, std::size_t& burn,
                std::size_t& thin) {
  walkers = c.count(base + "/walkers", 2);
  steps = c.count(base + "/steps", 1);
  burn = c.count(base + "/burn_in", 0);
  thin = c.count(base + "/thin", 1);
  c.require(burn < steps, base + "/burn_in", "must be smaller than steps");
  c.require(steps > burn && (steps - burn) / std::max<std::size_t>(thin, 1) >= 1, base + "/thin",
            "leaves no retained samples");
}

mcorr::GleFitSettings gle_settings(Checker& c, std::uint64_t seed) {
  mcorr::GleFitSettings s;
  s.n_bins = c.count("/gle/n_bins", 2);
  s.bin_mode = c.attempt("/gle/bin_mode", [&] { return mcorr::bin_mode_from_string(c.get<std::string>("/gle/bin_mode")); });
  s.k_max = c.count("/gle/k_max", 0);
  s.step_h = c.get<double>("/gle/step_h", 1.0);
  c.require(s.step_h > 0.0, "/gle/step_h", "must be > 0");
  s.drift_bounds = c.range("/gle/priors/drift");
  s.diffusion_bounds = c.range("/gle/priors/diffusion");
  c.require(s.diffusion_bounds.lo > 0.0, "/gle/priors/diffusion", "lower bound must be > 0");
  s.kernel_bounds = c.range("/gle/priors/kernel");
  mcmc_block(c, "/gle/mcmc", s.walkers, s.steps, s.n_burn, s.thin);
  s.seed = seed;
  return s;
}

mcorr::EstimateKind estimate_kind(Checker& c, const std::string& path) {
  const auto v = c.get<std::string>(path, "map");
  c.require(v == "map" || v == "mean", path, "must be map|mean");
  return v == "mean" ? mcorr::EstimateKind::mean : mcorr::EstimateKind::map;
}

mcorr::ResilienceSettings resilience_settings(Checker& c, std::uint64_t seed, unsigned threads) {
  mcorr::ResilienceSettings s;
  s.model = c.attempt("/resilience/model_tag", [&] {
    return mcorr::resilience_model_from_string(c.get<std::string>("/resilience/model_tag"));
  });
  s.window_size = c.count("/resilience/window_size", 10);
  s.window_shift = c.count("/resilience/window_shift", 1);
  s.gamma = c.get<double>("/resilience/gamma", 2.0);
  c.require(s.gamma >= 1.0, "/resilience/gamma", "must be >= 1");
  s.step_h = c.get<double>("/resilience/step_h", 1.0);
  c.require(s.step_h > 0.0, "/resilience/step_h", "must be > 0");

  // main/inverse/wide, or an object {"preset", "ranges": six [lo, hi] pairs, "theta*_sigma"}.
  std::string preset = "main";
  if (c.maybe<json>("/resilience/priors")) {
    const auto p = c.get<json>("/resilience/priors");
    if (p.is_string()) preset = p.get<std::string>();
    else if (p.is_object()) preset = p.value("preset", std::string("main"));
    else c.fail("/resilience/priors", "must be a preset name or an object");
  }
  s.priors = c.attempt("/resilience/priors", [&] { return mcorr::ResiliencePriors::preset(preset); });
  const auto p = c.get<json>("/resilience/priors");
  if (p.is_object()) {
    if (p.contains("ranges")) {
      if (!p["ranges"].is_array() || p["ranges"].size() != 6) {
        c.fail("/resilience/priors/ranges", "must hold six [lo, hi] pairs");
      } else {
        for (std::size_t i = 0; i < 6; ++i) s.priors.bounds[i] = c.range("/resilience/priors/ranges/" + std::to_string(i));
      }
    }
    if (p.contains("theta2_sigma")) s.priors.theta2_sigma = c.get<double>("/resilience/priors/theta2_sigma");
    if (p.contains("theta3_sigma")) s.priors.theta3_sigma = c.get<double>("/resilience/priors/theta3_sigma");
    if (p.contains("theta4_sigma_nonmarkov"))
      s.priors.theta4_sigma_nonmarkov = c.get<double>("/resilience/priors/theta4_sigma_nonmarkov");
  }
  // Checked field by field so that every violation is reported.
  c.require(s.priors.bounds[4].lo > 0.0, "/resilience/priors", "theta4 range must be positive");
  c.require(s.priors.bounds[5].lo > 0.0, "/resilience/priors", "theta5 range must be positive");
  c.require(s.priors.theta2_sigma > 0.0 && s.priors.theta3_sigma > 0.0 && s.priors.theta4_sigma_nonmarkov > 0.0,
            "/resilience/priors", "Gaussian prior widths must be > 0");
  if (const auto w = c.maybe<double>("/resilience/detrend_width")) c.require(*w > 0.0, "/resilience/detrend_width", "must be > 0");
  mcmc_block(c, "/resilience/mcmc", s.walkers, s.steps, s.n_burn, s.thin);
  s.seed = seed;
  s.threads = threads;
  return s;
}

// ---------------------------------------------------------------------------
// Inputs

// Reads one numeric column. Default column: c_bar, then x, then the last one.
std::vector<double> read_values(const fs::path& path, const std::optional<std::string>& column) {
  const auto lines = mcorr::io::read_lines(path);
  if (lines.empty()) throw mcorr::ValidationError("empty input file: " + path.string());
  const auto head = mcorr::io::split_csv_line(lines[0]);
  bool has_header = false;
  for (const auto& cell : head)
    if (!mcorr::io::parse_double(cell)) has_header = true;
  std::size_t col = head.size() - 1;
  if (has_header) {
    auto find = [&](const std::string& name) -> std::optional<std::size_t> {
      for (std::size_t i = 0; i < head.size(); ++i)
        if (mcorr::io::trim(head[i]) == name) return i;
      return std::nullopt;
    };
    if (column) {
      const auto i = find(*column);
      if (!i) throw mcorr::ValidationError("column '" + *column + "' not found in " + path.string());
      col = *i;
    } else if (const auto i = find("c_bar")) {
      col = *i;
    } else if (const auto j = find("x")) {
      col = *j;
    }
  } else if (column) {
    throw mcorr::ValidationError("input " + path.string() + " has no header; cannot select column '" + *column + "'");
  }
  std::vector<double> out;
  for (std::size_t r = has_header ? 1 : 0; r < lines.size(); ++r) {
    if (mcorr::io::trim(lines[r]).empty()) continue;
    const auto cells = mcorr::io::split_csv_line(lines[r]);
    const auto v = col < cells.size() ? mcorr::io::parse_double(cells[col]) : std::nullopt;
    if (!v || !std::isfinite(*v))
      throw mcorr::ValidationError("non-numeric value at line " + std::to_string(r + 1) + " of " + path.string());
    out.push_back(*v);
  }
  if (out.empty()) throw mcorr::ValidationError("no data rows in " + path.string());
  return out;
}

struct LoadedModel {
  mcorr::GleModel model;
  std::vector<double> kernel_means;
};

// Accepts a fit-gle result (map/mean models) or a bare model JSON.
LoadedModel load_model(const fs::path& path, mcorr::EstimateKind estimate) {
  const auto j = mcorr::io::read_json(path);
  LoadedModel out;
  if (j.contains("map") && j.contains("mean")) {
    out.model = mcorr::gle_model_from_json(j.at(estimate == mcorr::EstimateKind::map ? "map" : "mean"));
    if (j.contains("coefficients") && j["coefficients"].contains("kernel"))
      for (const auto& s : j["coefficients"]["kernel"]) out.kernel_means.push_back(s.at("mean").get<double>());
  } else {
    out.model = mcorr::gle_model_from_json(j);
  }
  if (out.kernel_means.empty()) out.kernel_means = out.model.kernel;
  return out;
}

// ---------------------------------------------------------------------------
// Run directory and manifest

std::string utc_stamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

std::string config_hash(const json& cfg) {
  json hashed = cfg;
  hashed.erase("out");
  hashed.erase("no_subdir");
  hashed.erase("threads");
  return mcorr::io::hex64(mcorr::io::fnv1a(hashed.dump()));
}

fs::path make_run_dir(const json& cfg, const std::string& command) {
  const fs::path base = cfg.at("out").get<std::string>();
  if (cfg.at("no_subdir").get<bool>()) {
    fs::create_directories(base);
    return base;
  }
  const std::string stem = utc_stamp() + "-" + command + "-" + config_hash(cfg).substr(0, 10);
  fs::path dir = base / stem;
  for (int i = 2; fs::exists(dir); ++i) dir = base / (stem + "-" + std::to_string(i));
  fs::create_directories(dir);
  return dir;
}

json describe_input(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return json{{"path", fs::absolute(p).string()},
              {"bytes", fs::file_size(p)},
              {"fnv1a", mcorr::io::hex64(mcorr::io::fnv1a(os.str()))}};
}

json versions() {
  std::ostringstream eigen;
  eigen << EIGEN_WORLD_VERSION << "." << EIGEN_MAJOR_VERSION << "." << EIGEN_MINOR_VERSION;
  return json{{"mcorr", kToolVersion},
              {"eigen", eigen.str()},
              {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                    std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                    std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
              {"cli11", CLI11_VERSION},
              {"compiler", __VERSION__},
              {"rng", mcorr::kRngAlgorithm}};
}

struct Run {
  std::string command;
  json cfg;
  fs::path dir;
  std::vector<fs::path> inputs;
  std::vector<std::string> outputs;
  json summary = json::object();

  fs::path file(const std::string& name) {
    outputs.push_back(name);
    return dir / name;
  }

  void write_manifest(const std::string& status, const std::string& error = {}) const {
    json in = json::array();
    for (const auto& p : inputs) in.push_back(describe_input(p));
    json m{{"manifest_version", kManifestVersion},
           {"command", command},
           {"status", status},
           {"created_utc", utc_stamp()},
           {"seed", cfg.at("seed")},
           {"config_hash", config_hash(cfg)},
           {"config", cfg},
           {"inputs", in},
           {"outputs", outputs},
           {"summary", summary},
           {"versions", versions()}};
    if (!error.empty()) m["error"] = error;
    mcorr::io::write_json(dir / "manifest.json", m);
  }
};

void log(const std::string& msg) { std::cerr << "[mcorr] " << msg << "\n"; }

// ---------------------------------------------------------------------------
// Commands. Each validates the whole configuration first, then computes.

using Command = std::function<void(Run&)>;

Command cmd_preprocess(const json& cfg) {
  Checker c(cfg);
  const auto prices = c.existing_file("/inputs/prices", "a price CSV (--input)");
  const auto s = preprocess_settings(c);
  c.finish();
  return [=](Run& run) {
    run.inputs = {prices};
    log("loading " + prices.string());
    const auto pm = mcorr::load_prices(prices, s.max_missing_fraction);
    const auto series = mcorr::preprocess_prices(pm, s);
    mcorr::write_series(run.file("series.csv"), series);
    run.outputs.push_back("series.csv.json");
    run.summary = {{"assets", pm.n_assets()},
                   {"dates", pm.n_dates()},
                   {"dropped_assets", pm.dropped_assets},
                   {"length", series.size()},
                   {"skipped_windows", series.skipped_windows.size()}};
    log("wrote " + std::to_string(series.size()) + " correlation values");
  };
}

void write_fit(Run& run, const mcorr::GleFit& fit) {
  mcorr::io::write_json(run.file("fit.json"), mcorr::to_json(fit));
  std::ostringstream os;
  os << "block,index,mean,map,ci_lower,ci_upper\n";
  auto rows = [&](const char* name, const std::vector<mcorr::Summary>& v, std::size_t first) {
    for (std::size_t i = 0; i < v.size(); ++i)
      os << name << "," << i + first << "," << mcorr::io::format_double(v[i].mean) << ","
         << mcorr::io::format_double(v[i].map) << "," << mcorr::io::format_double(v[i].ci_lower) << ","
         << mcorr::io::format_double(v[i].ci_upper) << "\n";
  };
  rows("drift", fit.drift, 0);
  rows("diffusion", fit.diffusion, 0);
  rows("kernel", fit.kernel, 1);
  mcorr::io::write_text(run.file("coefficients.csv"), os.str());
  mcorr::save_ensemble(run.dir / "chain", fit.ensemble);
  run.outputs.push_back("chain.json");
  run.outputs.push_back("chain.bin");
  if (fit.settings.k_max > 0)
    mcorr::io::write_json(run.file("memory.json"), mcorr::to_json(mcorr::memory_aggregation(fit.ensemble, fit.settings.k_max)));
}

Command cmd_fit_gle(const json& cfg) {
  Checker c(cfg);
  const auto seed = c.get<std::uint64_t>("/seed");
  const auto input = c.existing_file("/inputs/series", "a series CSV (--input)");
  const auto column = c.maybe<std::string>("/inputs/column");
  const auto s = gle_settings(c, seed);
  c.finish();
  return [=](Run& run) {
    run.inputs = {input};
    const auto x = read_values(input, column);
    log("fitting GLE (k_max=" + std::to_string(s.k_max) + ", bins=" + std::to_string(s.n_bins) + ") on " +
        std::to_string(x.size()) + " points");
    const auto fit = mcorr::fit_gle(x, s);
    write_fit(run, fit);
    run.summary = {{"points", x.size()}, {"acceptance_rate", fit.ensemble.acceptance_rate},
                   {"samples", fit.ensemble.sample_count()}};
  };
}

Command cmd_diagnose(const json& cfg) {
  Checker c(cfg);
  const auto seed = c.get<std::uint64_t>("/seed");
  const auto input = c.existing_file("/inputs/series", "a series CSV (--input)");
  const auto column = c.maybe<std::string>("/inputs/column");
  std::optional<fs::path> model_path;
  if (c.maybe<std::string>("/inputs/model")) model_path = c.existing_file("/inputs/model", "model JSON");
  const auto max_lag = c.count("/diagnose/max_lag", 1);
  const auto lags = c.get<std::vector<std::size_t>>("/diagnose/lags");
  for (std::size_t i = 0; i < lags.size(); ++i) c.require(lags[i] >= 1, "/diagnose/lags/" + std::to_string(i), "must be >= 1");
  const auto sim_length = c.count("/diagnose/sim_length", 2);
  const auto estimate = estimate_kind(c, "/diagnose/estimate");
  c.finish();
  return [=](Run& run) {
    run.inputs = {input};
    const auto x = read_values(input, column);
    std::vector<double> lag_col(max_lag + 1);
    for (std::size_t k = 0; k <= max_lag; ++k) lag_col[k] = static_cast<double>(k);
    std::vector<std::string> header{"lag", "data"};
    std::vector<std::vector<double>> cols{lag_col, mcorr::acf(x, max_lag)};
    std::optional<std::vector<double>> sim;
    if (model_path) {
      run.inputs.push_back(*model_path);
      const auto loaded = load_model(*model_path, estimate);
      mcorr::SimConfig sc;
      sc.step_h = loaded.model.step_h;
      sc.n_steps = sim_length - 1;
      sc.seed = seed;
      sc.initial_state = x.back();
      sc.history.assign(x.end() - static_cast<std::ptrdiff_t>(std::min(x.size() - 1, loaded.model.k_max())), x.end() - 1);
      sim = mcorr::simulate_gle(loaded.model, sc).x;
      header.push_back("model");
      cols.push_back(mcorr::acf(*sim, max_lag));
      if (!loaded.kernel_means.empty())
        mcorr::io::write_json(run.file("memory.json"), mcorr::to_json(mcorr::memory_aggregation_from_kernel(loaded.kernel_means)));
    }
    mcorr::io::write_csv(run.file("acf.csv"), header, cols);
    auto write_density = [&](const std::string& name, const mcorr::DensityEstimate& d) {
      if (d.point_mass) {
        mcorr::io::write_csv(run.file(name), {"increment", "mass"}, {{*d.point_mass}, {1.0}});
      } else {
        mcorr::io::write_csv(run.file(name), {"increment", "density"}, {d.grid, d.density});
      }
    };
    for (std::size_t j : lags) {
      write_density("increments_lag" + std::to_string(j) + ".csv", mcorr::increment_distribution(x, j));
      if (sim) write_density("model_increments_lag" + std::to_string(j) + ".csv", mcorr::increment_distribution(*sim, j));
    }
    run.summary = {{"points", x.size()}, {"max_lag", max_lag}, {"model", model_path.has_value()}};
  };
}

Command cmd_predict(const json& cfg) {
  Checker c(cfg);
  const auto seed = c.get<std::uint64_t>("/seed");
  const auto input = c.existing_file("/inputs/series", "a series CSV (--input)");
  const auto column = c.maybe<std::string>("/inputs/column");
  const auto fit = gle_settings(c, seed);
  const auto alphas = c.get<std::vector<double>>("/forecast/alpha");
  c.require(!alphas.empty(), "/forecast/alpha", "needs at least one value");
  for (std::size_t i = 0; i < alphas.size(); ++i)
    c.require(alphas[i] > 0.0 && alphas[i] < 1.0, "/forecast/alpha/" + std::to_string(i), "must lie in (0, 1)");
  const auto names = c.get<std::vector<std::string>>("/forecast/methods");
  c.require(!names.empty(), "/forecast/methods", "needs at least one method");
  std::vector<mcorr::ForecastMethod> methods;
  for (std::size_t i = 0; i < names.size(); ++i)
    methods.push_back(c.attempt("/forecast/methods/" + std::to_string(i), [&] { return mcorr::parse_forecast_method(names[i]); }));
  const auto estimate = estimate_kind(c, "/forecast/estimate");
  c.finish();
  return [=](Run& run) {
    run.inputs = {input};
    const auto x = read_values(input, column);
    json reports = json::array();
    std::ostringstream table;
    table << "alpha,method,rho2_in,rho2_out\n";
    for (double a : alphas) {
      log("forecast benchmark at alpha=" + mcorr::io::format_double(a));
      const auto rep = mcorr::run_forecast_benchmark(x, a, methods, fit, estimate);
      reports.push_back(mcorr::to_json(rep));
      for (const auto& m : methods) {
        const auto& r = rep.methods.at(m.name);
        table << mcorr::io::format_double(a) << "," << m.name << ",";
        if (r.error) table << "nan,nan\n";
        else table << mcorr::io::format_double(r.rho2_in) << "," << mcorr::io::format_double(r.rho2_out) << "\n";
        if (r.error) log("method " + m.name + " failed: " + *r.error);
      }
    }
    mcorr::io::write_json(run.file("predict.json"), reports);
    mcorr::io::write_text(run.file("rho2.csv"), table.str());
    run.summary = {{"points", x.size()}, {"alphas", alphas}};
  };
}

Command cmd_resilience(const json& cfg) {
  Checker c(cfg);
  const auto seed = c.get<std::uint64_t>("/seed");
  const auto threads = c.get<unsigned>("/threads");
  const auto input = c.existing_file("/inputs/series", "a series CSV (--input)");
  const auto column = c.maybe<std::string>("/inputs/column");
  const auto s = resilience_settings(c, seed, threads);
  const auto width = c.maybe<double>("/resilience/detrend_width");
  c.finish();
  return [=](Run& run) {
    run.inputs = {input};
    auto x = read_values(input, column);
    if (width) {
      const auto d = mcorr::detrend_gaussian(x, *width);
      mcorr::io::write_csv(run.file("detrended.csv"), {"value", "trend", "detrended"}, {x, d.trend, d.detrended});
      x = d.detrended;
    }
    log(std::string("resilience (") + mcorr::to_string(s.model) + ") on " + std::to_string(x.size()) + " points");
    const auto tr = mcorr::run_resilience(x, s);
    mcorr::write_track(run.file("track.csv"), tr);
    json windows = json::array();
    std::size_t failed = 0;
    for (std::size_t w = 0; w < tr.size(); ++w) {
      json j{{"center", tr.window_centers[w]}, {"degenerate_noise", static_cast<bool>(tr.degenerate_noise[w])}};
      if (tr.failures[w]) {
        ++failed;
        j["failure"] = *tr.failures[w];
      } else {
        j["fixed_point"] = tr.fixed_points[w];
        j["acceptance_rate"] = tr.acceptance[w];
      }
      windows.push_back(j);
    }
    mcorr::io::write_json(run.file("windows.json"), json{{"settings", mcorr::to_json(s)}, {"windows", windows}});
    run.summary = {{"windows", tr.size()}, {"failed_windows", failed}};
    if (failed > 0) log(std::to_string(failed) + " window(s) failed and are left as gaps");
  };
}

Command cmd_simulate(const json& cfg) {
  Checker c(cfg);
  const auto seed = c.get<std::uint64_t>("/seed");
  const auto kind = c.get<std::string>("/simulate/kind");
  c.require(kind == "synthetic" || kind == "langevin" || kind == "gle" || kind == "two-scale", "/simulate/kind",
            "must be synthetic|langevin|gle|two-scale");
  mcorr::SimConfig sc = kind == "synthetic" ? mcorr::SyntheticSpec::default_config(seed) : mcorr::SimConfig{};
  sc.seed = seed;
  if (const auto n = c.maybe<std::size_t>("/simulate/n_steps")) {
    sc.n_steps = *n;
    c.require(*n >= 1, "/simulate/n_steps", "must be >= 1");
  } else if (kind != "synthetic") {
    sc.n_steps = 10000;
  }
  const auto h = c.maybe<double>("/simulate/step_h");
  if (h) {
    sc.step_h = *h;
    c.require(*h > 0.0, "/simulate/step_h", "must be > 0");
  }
  if (const auto x0 = c.maybe<double>("/simulate/initial_state")) sc.initial_state = *x0;
  sc.initial_hidden = c.get<double>("/simulate/initial_hidden");

  mcorr::SyntheticSpec spec;
  spec.coupling_start = c.get<double>("/simulate/synthetic/coupling_start");
  spec.coupling_end = c.get<double>("/simulate/synthetic/coupling_end");
  spec.ou_rate = c.get<double>("/simulate/synthetic/ou_rate");
  spec.ou_diffusion = c.get<double>("/simulate/synthetic/ou_diffusion");
  if (kind == "synthetic") c.attempt("/simulate/synthetic", [&] { spec.validate(); return 0; });

  const auto poly = c.get<std::vector<double>>("/simulate/langevin/drift");
  const auto diffusion = c.get<double>("/simulate/langevin/diffusion");
  if (kind == "langevin") c.require(diffusion >= 0.0, "/simulate/langevin/diffusion", "must be >= 0");

  mcorr::DriftThetaVector theta;
  const auto th = c.get<std::vector<double>>("/simulate/two_scale/theta");
  if (kind == "two-scale") {
    c.require(th.size() == 6, "/simulate/two_scale/theta", "must hold theta0..theta5");
    if (th.size() == 6) {
      theta = {th[0], th[1], th[2], th[3], th[4], th[5], 0.0};
      c.require(th[5] > 0.0, "/simulate/two_scale/theta/5", "must be > 0");
    }
  }

  std::optional<fs::path> model_path;
  if (kind == "gle") model_path = c.existing_file("/inputs/model", "a model JSON (--model)");
  const auto estimate = estimate_kind(c, "/diagnose/estimate");
  c.finish();

  return [=](Run& run) mutable {
    mcorr::Trajectory tr;
    std::string model_name = kind;
    if (kind == "synthetic") {
      tr = mcorr::simulate_synthetic(spec, sc);
    } else if (kind == "langevin") {
      tr = mcorr::simulate_langevin(
          [&](double x) {
            double v = 0.0;
            for (std::size_t i = poly.size(); i-- > 0;) v = v * x + poly[i];
            return v;
          },
          [&](double) { return diffusion; }, sc);
    } else if (kind == "two-scale") {
      tr = mcorr::simulate_two_scale(theta, sc);
    } else {
      run.inputs = {*model_path};
      const auto loaded = load_model(*model_path, estimate);
      if (!h) sc.step_h = loaded.model.step_h;
      tr = mcorr::simulate_gle(loaded.model, sc);
      if (tr.zero_padded_history) log("initial history shorter than k_max; missing lags read 0");
    }
    mcorr::write_trajectory(run.file("trajectory.csv"), tr);
    auto meta = mcorr::sim_metadata(sc, model_name);
    if (kind == "synthetic")
      meta["synthetic"] = {{"coupling_start", spec.coupling_start}, {"coupling_end", spec.coupling_end},
                           {"ou_rate", spec.ou_rate}, {"ou_diffusion", spec.ou_diffusion}};
    mcorr::io::write_json(run.file("trajectory.json"), meta);
    run.summary = {{"points", tr.x.size()}, {"step_h", sc.step_h}};
  };
}

// ---------------------------------------------------------------------------
// Flag overrides

// A flag value is parsed as JSON when possible (numbers, booleans, null) and
// kept as a string otherwise.
json scalar(const std::string& v) {
  try {
    auto j = json::parse(v);
    if (!j.is_object() && !j.is_array()) return j;
  } catch (const json::exception&) {
  }
  return v;
}

json list(const std::string& v) {
  json arr = json::array();
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) arr.push_back(scalar(mcorr::io::trim(item)));
  return arr;
}

class Overrides {
 public:
  void add(CLI::App* app, const std::string& flag, const std::string& pointer, const std::string& help, bool is_list = false) {
    app->add_option_function<std::string>(
           flag, [this, pointer, is_list](const std::string& v) { values_[pointer] = is_list ? list(v) : scalar(v); },
           help)
        ->type_name(is_list ? "LIST" : "VALUE");
  }

  void set(const std::string& pointer, json v) { values_[pointer] = std::move(v); }

  void apply(json& cfg) const {
    for (const auto& [p, v] : values_) cfg[json::json_pointer(p)] = v;
  }

 private:
  std::map<std::string, json> values_;
};

json load_config_file(const std::string& path) {
  if (!fs::is_regular_file(path)) throw mcorr::ValidationError("config file not found: " + path);
  auto j = mcorr::io::read_json(path);
  // A manifest from an earlier run carries its full configuration.
  if (j.contains("manifest_version") && j.contains("config")) return j["config"];
  if (!j.is_object()) throw mcorr::ValidationError("config file must hold a JSON object: " + path);
  return j;
}

// Recursive merge where later values replace earlier ones; unlike a JSON merge
// patch, null is kept as a value (it means "use the default").
void merge(json& dst, const json& src) {
  for (const auto& [k, v] : src.items()) {
    if (v.is_object() && dst.contains(k) && dst[k].is_object()) merge(dst[k], v);
    else dst[k] = v;
  }
}

// Rejects config keys that the defaults do not know about (typos).
void check_unknown_keys(const json& cfg, const json& defaults, const std::string& base, std::vector<std::string>& out) {
  for (const auto& [k, v] : cfg.items()) {
    const std::string path = base + "/" + k;
    if (!defaults.contains(k)) {
      // Free-form blocks: priors objects may carry extra structure.
      if (base == "/resilience/priors") continue;
      out.push_back(path + ": unknown setting");
    } else if (v.is_object() && defaults[k].is_object()) {
      check_unknown_keys(v, defaults[k], path, out);
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mean market correlation analysis: preprocessing, GLE fits, forecasts, resilience"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", kToolVersion);

  std::string config_path, recipe;
  bool no_subdir = false;
  Overrides global;
  app.add_option("--config", config_path, "JSON config file or manifest of an earlier run");
  app.add_option("--recipe", recipe, "named experiment recipe")
      ->check(CLI::IsMember({"weekly", "monthly42", "overlap-artifact", "synthetic-resilience"}));
  global.add(&app, "--seed", "/seed", "master RNG seed");
  global.add(&app, "--out", "/out", "output base directory");
  global.add(&app, "--threads", "/threads", "worker threads (0 = all cores)");
  app.add_flag("--no-subdir", no_subdir, "write directly into --out instead of a timestamped run directory");

  Overrides local;
  auto mcmc_flags = [&](CLI::App* sub, const std::string& block) {
    local.add(sub, "--walkers", block + "/mcmc/walkers", "ensemble walkers");
    local.add(sub, "--steps", block + "/mcmc/steps", "steps per walker");
    local.add(sub, "--burn-in", block + "/mcmc/burn_in", "discarded steps");
    local.add(sub, "--thin", block + "/mcmc/thin", "keep every n-th step");
  };
  auto gle_flags = [&](CLI::App* sub) {
    local.add(sub, "--n-bins", "/gle/n_bins", "number of state bins");
    local.add(sub, "--bin-mode", "/gle/bin_mode", "equal_width|equal_count");
    local.add(sub, "--k-max", "/gle/k_max", "memory kernel length");
    local.add(sub, "--step-h", "/gle/step_h", "time step of the series");
    mcmc_flags(sub, "/gle");
  };
  auto input_flags = [&](CLI::App* sub, const std::string& pointer) {
    local.add(sub, "--input,-i", pointer, "input CSV");
    local.add(sub, "--column", "/inputs/column", "column name of the input CSV");
  };

  auto* pre = app.add_subcommand("preprocess", "prices CSV -> mean correlation series");
  input_flags(pre, "/inputs/prices");
  local.add(pre, "--n", "/preprocess/n", "local normalisation window");
  local.add(pre, "--tau", "/preprocess/tau", "correlation window length");
  local.add(pre, "--shift", "/preprocess/shift", "window shift");
  local.add(pre, "--window-mode", "/preprocess/window_mode", "centered|trailing");
  local.add(pre, "--max-missing", "/preprocess/max_missing_fraction", "drop assets with more missing prices");

  auto* fit = app.add_subcommand("fit-gle", "Bayesian GLE fit of a series");
  input_flags(fit, "/inputs/series");
  gle_flags(fit);

  auto* diag = app.add_subcommand("diagnose", "ACF and increment distributions of data and model");
  input_flags(diag, "/inputs/series");
  local.add(diag, "--model", "/inputs/model", "fit.json or model JSON to compare against");
  local.add(diag, "--max-lag", "/diagnose/max_lag", "largest ACF lag");
  local.add(diag, "--lags", "/diagnose/lags", "increment lags", true);
  local.add(diag, "--sim-length", "/diagnose/sim_length", "length of the model simulation");
  local.add(diag, "--estimate", "/diagnose/estimate", "map|mean");

  auto* pred = app.add_subcommand("predict", "one-step forecast benchmark");
  input_flags(pred, "/inputs/series");
  local.add(pred, "--alpha", "/forecast/alpha", "training fractions", true);
  local.add(pred, "--methods", "/forecast/methods", "naive,le,gle<k>", true);
  local.add(pred, "--estimate", "/forecast/estimate", "map|mean");
  gle_flags(pred);

  auto* res = app.add_subcommand("resilience", "rolling-window drift slope and noise estimates");
  input_flags(res, "/inputs/series");
  local.add(res, "--model", "/resilience/model_tag", "markov|nonmarkov_slow_hidden|nonmarkov_fast_hidden");
  local.add(res, "--window-size", "/resilience/window_size", "points per window");
  local.add(res, "--window-shift", "/resilience/window_shift", "shift between windows");
  local.add(res, "--gamma", "/resilience/gamma", "time-scale separation factor");
  local.add(res, "--step-h", "/resilience/step_h", "time step of the series");
  local.add(res, "--priors", "/resilience/priors", "main|inverse|wide");
  local.add(res, "--detrend-width", "/resilience/detrend_width", "Gaussian detrending sd in samples");
  mcmc_flags(res, "/resilience");

  auto* sim = app.add_subcommand("simulate", "simulate a trajectory");
  std::string sim_kind;
  sim->add_option("kind", sim_kind, "synthetic|langevin|gle|two-scale")
      ->check(CLI::IsMember({"synthetic", "langevin", "gle", "two-scale"}));
  local.add(sim, "--n-steps", "/simulate/n_steps", "number of steps");
  local.add(sim, "--step-h", "/simulate/step_h", "integration step");
  local.add(sim, "--initial", "/simulate/initial_state", "initial state");
  local.add(sim, "--initial-hidden", "/simulate/initial_hidden", "initial hidden state");
  local.add(sim, "--model", "/inputs/model", "model JSON for kind gle");
  local.add(sim, "--drift", "/simulate/langevin/drift", "polynomial drift coefficients c0,c1,...", true);
  local.add(sim, "--diffusion", "/simulate/langevin/diffusion", "constant diffusion for kind langevin");
  local.add(sim, "--theta", "/simulate/two_scale/theta", "theta0..theta5 for kind two-scale", true);
  local.add(sim, "--coupling-start", "/simulate/synthetic/coupling_start", "initial coupling q");
  local.add(sim, "--coupling-end", "/simulate/synthetic/coupling_end", "final coupling q");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::map<CLI::App*, std::pair<std::string, Command (*)(const json&)>> table{
      {pre, {"preprocess", cmd_preprocess}}, {fit, {"fit-gle", cmd_fit_gle}},
      {diag, {"diagnose", cmd_diagnose}},    {pred, {"predict", cmd_predict}},
      {res, {"resilience", cmd_resilience}}, {sim, {"simulate", cmd_simulate}}};
  CLI::App* chosen = app.get_subcommands().front();
  const auto& [name, build] = table.at(chosen);

  Run run;
  run.command = name;
  Command command;
  try {
    json cfg = default_config();
    const json defaults = cfg;
    if (!recipe.empty()) merge(cfg, recipes().at(recipe));
    if (!config_path.empty()) {
      const auto file = load_config_file(config_path);
      std::vector<std::string> unknown;
      check_unknown_keys(file, defaults, "", unknown);
      if (!unknown.empty()) {
        std::string msg = "invalid configuration";
        for (const auto& u : unknown) msg += "\n  " + u;
        throw mcorr::ValidationError(msg);
      }
      merge(cfg, file);
    }
    if (!sim_kind.empty()) local.set("/simulate/kind", sim_kind);
    if (no_subdir) global.set("/no_subdir", true);
    global.apply(cfg);
    local.apply(cfg);
    Checker c(cfg);
    c.get<std::uint64_t>("/seed");
    c.get<unsigned>("/threads");
    c.get<std::string>("/out");
    c.finish();
    command = build(cfg);
    run.cfg = cfg;
  } catch (const mcorr::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    run.dir = make_run_dir(run.cfg, name);
    log("run directory " + run.dir.string());
    command(run);
    run.write_manifest("ok");
  } catch (const mcorr::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (!run.dir.empty()) run.write_manifest("failed", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (!run.dir.empty()) {
      try {
        run.write_manifest("failed", e.what());
      } catch (const std::exception&) {
      }
    }
    return 1;
  }
  std::cout << run.dir.string() << "\n";
  return 0;
}
