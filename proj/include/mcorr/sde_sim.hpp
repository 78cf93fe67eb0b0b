#pragma once

// Euler–Maruyama simulators for the Langevin, binned GLE, hidden-OU
// two-timescale and synthetic benchmark models.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mcorr/drift_theta.hpp"
#include "mcorr/error.hpp"
#include "mcorr/gle_model.hpp"
#include "mcorr/io.hpp"
#include "mcorr/rng.hpp"

namespace mcorr {

struct SimConfig {
  double step_h = 1.0;
  std::size_t n_steps = 1;
  std::uint64_t seed = 0;
  double initial_state = 0.0;
  double initial_hidden = 0.0;
  // Past states, oldest first; the last entry is x_{-1}. Missing lags read 0.
  std::vector<double> history;

  void validate() const {
    if (!(step_h > 0.0)) throw ValidationError("step_h must be > 0");
    if (n_steps < 1) throw ValidationError("n_steps must be >= 1");
    if (!std::isfinite(initial_state)) throw ValidationError("initial_state must be finite");
  }
};

struct Trajectory {
  std::vector<double> x;
  std::vector<double> hidden;  // λ or y for the two-variable models
  double step_h = 1.0;
  bool zero_padded_history = false;
};

namespace detail {

inline void check_state(double x, std::size_t step) {
  if (!std::isfinite(x)) throw DivergenceError("simulation diverged at step " + std::to_string(step));
}

inline double noise_scale(double h, double diffusion, std::size_t step) {
  if (diffusion < 0.0) throw RuntimeError("negative diffusion encountered at step " + std::to_string(step));
  return std::sqrt(h * diffusion);
}

}  // namespace detail

/// x_{t+1} = x_t + h D1(x_t) + sqrt(h D2(x_t)) xi_t. One normal draw per step.
template <class Drift, class Diffusion>
Trajectory simulate_langevin(Drift&& drift, Diffusion&& diffusion, const SimConfig& cfg) {
  cfg.validate();
  Engine rng(cfg.seed);
  std::normal_distribution<double> normal;
  Trajectory tr;
  tr.step_h = cfg.step_h;
  tr.x.resize(cfg.n_steps + 1);
  tr.x[0] = cfg.initial_state;
  const double h = cfg.step_h;
  for (std::size_t t = 0; t < cfg.n_steps; ++t) {
    const double x = tr.x[t];
    const double d1 = drift(x);
    const double scale = detail::noise_scale(h, diffusion(x), t);
    const double xi = normal(rng);
    tr.x[t + 1] = x + h * d1 + scale * xi;
    detail::check_state(tr.x[t + 1], t + 1);
  }
  return tr;
}

/// Binned GLE with a left-Riemann memory sum over unit lags. Lags reaching
/// before t = 0 read cfg.history, zero-padded when it is too short.
inline Trajectory simulate_gle(const GleModel& model, const SimConfig& cfg) {
  cfg.validate();
  model.validate(false);
  const std::size_t k_max = model.k_max();
  const std::size_t pad = k_max;
  std::vector<double> buf(pad + cfg.n_steps + 1, 0.0);
  Trajectory tr;
  tr.step_h = cfg.step_h;
  tr.zero_padded_history = cfg.history.size() < k_max;
  // buf[pad - j] holds x_{-j}.
  for (std::size_t j = 1; j <= pad && j <= cfg.history.size(); ++j) buf[pad - j] = cfg.history[cfg.history.size() - j];
  buf[pad] = cfg.initial_state;

  Engine rng(cfg.seed);
  std::normal_distribution<double> normal;
  const double h = cfg.step_h;
  for (std::size_t t = 0; t < cfg.n_steps; ++t) {
    const std::size_t i = pad + t;
    const double x = buf[i];
    const std::size_t b = bin_index(model.bin_edges, x);
    double memory = 0.0;
    for (std::size_t k = 1; k <= k_max; ++k) memory += model.kernel[k - 1] * buf[i - k];
    const double d1 = model.drift[b] + memory;
    const double scale = detail::noise_scale(h, model.diffusion[b], t);
    const double xi = normal(rng);
    buf[i + 1] = x + h * d1 + scale * xi;
    detail::check_state(buf[i + 1], t + 1);
  }
  tr.x.assign(buf.begin() + static_cast<std::ptrdiff_t>(pad), buf.end());
  return tr;
}

/// Hidden-OU two-timescale model:
///   λ_{t+1} = λ_t - h λ_t / θ5² + sqrt(h / θ5²) ξ_t
///   x_{t+1} = x_t + h (D1(x_t) + θ4 λ_t)
inline Trajectory simulate_two_scale(const DriftThetaVector& theta, const SimConfig& cfg) {
  cfg.validate();
  if (!theta.theta5 || *theta.theta5 == 0.0) throw ValidationError("two-scale simulation needs a nonzero theta5");
  const double inv_s2 = 1.0 / (*theta.theta5 * *theta.theta5);
  const double h = cfg.step_h;
  Engine rng(cfg.seed);
  std::normal_distribution<double> normal;
  Trajectory tr;
  tr.step_h = h;
  tr.x.resize(cfg.n_steps + 1);
  tr.hidden.resize(cfg.n_steps + 1);
  tr.x[0] = cfg.initial_state;
  tr.hidden[0] = cfg.initial_hidden;
  const double lambda_scale = std::sqrt(h * inv_s2);
  for (std::size_t t = 0; t < cfg.n_steps; ++t) {
    const double x = tr.x[t];
    const double lam = tr.hidden[t];
    tr.x[t + 1] = x + h * (theta.drift(x) + theta.theta4 * lam);
    tr.hidden[t + 1] = lam - h * inv_s2 * lam + lambda_scale * normal(rng);
    detail::check_state(tr.x[t + 1], t + 1);
    detail::check_state(tr.hidden[t + 1], t + 1);
  }
  return tr;
}

/// Synthetic benchmark: ẋ = 15 + x - x³ + q(t) y, ẏ = -rate y + sqrt(D) Γ,
/// with q linear in time from coupling_start to coupling_end.
struct SyntheticSpec {
  double coupling_start = 0.5;
  double coupling_end = 4.0;
  double ou_rate = 0.1;
  double ou_diffusion = 0.1;

  static constexpr std::size_t kDefaultSteps = 30000;
  static constexpr double kDefaultDuration = 2000.0;

  void validate() const {
    if (!std::isfinite(coupling_start) || !std::isfinite(coupling_end)) throw ValidationError("coupling values must be finite");
    if (!(ou_rate > 0.0)) throw ValidationError("ou_rate must be > 0");
    if (!(ou_diffusion >= 0.0)) throw ValidationError("ou_diffusion must be >= 0");
  }

  // 30000 steps on [0, 2000], starting near the stable root of 15 + x - x³.
  static SimConfig default_config(std::uint64_t seed) {
    SimConfig cfg;
    cfg.n_steps = kDefaultSteps;
    cfg.step_h = kDefaultDuration / static_cast<double>(kDefaultSteps);
    cfg.seed = seed;
    cfg.initial_state = 2.6;
    return cfg;
  }
};

inline Trajectory simulate_synthetic(const SyntheticSpec& spec, const SimConfig& cfg) {
  cfg.validate();
  spec.validate();
  const double h = cfg.step_h;
  Engine rng(cfg.seed);
  std::normal_distribution<double> normal;
  Trajectory tr;
  tr.step_h = h;
  tr.x.resize(cfg.n_steps + 1);
  tr.hidden.resize(cfg.n_steps + 1);
  tr.x[0] = cfg.initial_state;
  tr.hidden[0] = cfg.initial_hidden;
  const double y_scale = std::sqrt(h * spec.ou_diffusion);
  const double n = static_cast<double>(cfg.n_steps);
  for (std::size_t t = 0; t < cfg.n_steps; ++t) {
    const double q = spec.coupling_start + (spec.coupling_end - spec.coupling_start) * static_cast<double>(t) / n;
    const double x = tr.x[t];
    const double y = tr.hidden[t];
    tr.x[t + 1] = x + h * (15.0 + x - x * x * x + q * y);
    tr.hidden[t + 1] = y - h * spec.ou_rate * y + y_scale * normal(rng);
    detail::check_state(tr.x[t + 1], t + 1);
  }
  return tr;
}

/// CSV `t,x[,lambda]` with t = step index times h.
inline void write_trajectory(const std::filesystem::path& csv, const Trajectory& tr) {
  std::vector<double> t(tr.x.size());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i) * tr.step_h;
  if (tr.hidden.empty()) {
    io::write_csv(csv, {"t", "x"}, {t, tr.x});
  } else {
    io::write_csv(csv, {"t", "x", "lambda"}, {t, tr.x, tr.hidden});
  }
}

inline io::json sim_metadata(const SimConfig& cfg, const std::string& model) {
  return io::json{{"model", model},
                  {"step_h", cfg.step_h},
                  {"n_steps", cfg.n_steps},
                  {"seed", cfg.seed},
                  {"initial_state", cfg.initial_state},
                  {"initial_hidden", cfg.initial_hidden},
                  {"history_length", cfg.history.size()},
                  {"rng", kRngAlgorithm}};
}

}  // namespace mcorr
