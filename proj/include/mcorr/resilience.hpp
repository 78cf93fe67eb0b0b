#pragma once

// Rolling-window Bayesian resilience estimation with a cubic-drift Markov
// model and a two-timescale model driven by a hidden OU process.
//
// Both likelihoods are reduced to a handful of window moments, so one
// posterior evaluation costs O(1) regardless of the window length. Moments
// are taken in the centred variable z = x - C̄* where C̄* is the window mean;
// the monomial parameters θ0..θ3 map linearly onto the Taylor coefficients
// α0..α3 at C̄* (α1 is the drift slope ζ).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mcorr/bayes_core.hpp"
#include "mcorr/drift_theta.hpp"
#include "mcorr/error.hpp"
#include "mcorr/io.hpp"
#include "mcorr/parallel.hpp"
#include "mcorr/rng.hpp"

namespace mcorr {

enum class ResilienceModel { markov, nonmarkov_slow_hidden, nonmarkov_fast_hidden };

inline const char* to_string(ResilienceModel m) {
  switch (m) {
    case ResilienceModel::markov: return "markov";
    case ResilienceModel::nonmarkov_slow_hidden: return "nonmarkov_slow_hidden";
    case ResilienceModel::nonmarkov_fast_hidden: return "nonmarkov_fast_hidden";
  }
  return "?";
}

inline ResilienceModel resilience_model_from_string(const std::string& s) {
  if (s == "markov") return ResilienceModel::markov;
  if (s == "nonmarkov_slow_hidden" || s == "slow_hidden") return ResilienceModel::nonmarkov_slow_hidden;
  if (s == "nonmarkov_fast_hidden" || s == "fast_hidden") return ResilienceModel::nonmarkov_fast_hidden;
  throw ValidationError("unknown resilience model '" + s +
                        "' (expected markov|nonmarkov_slow_hidden|nonmarkov_fast_hidden)");
}

enum class Separation { slow_hidden, fast_hidden };

// ---------------------------------------------------------------------------
// Small analytic pieces

/// ζ = θ1 + 2 θ2 C̄* + 3 θ3 C̄*².
inline double drift_slope(const DriftThetaVector& t) {
  const double c = t.fixed_point;
  return t.theta1 + 2.0 * t.theta2 * c + 3.0 * t.theta3 * c * c;
}

enum class TimescaleVariable { observed, hidden };

/// Observed: 1 / |ζ| (+inf when ζ = 0). Hidden: θ5².
inline double characteristic_timescale(const DriftThetaVector& t, TimescaleVariable v) {
  if (v == TimescaleVariable::observed) {
    const double zeta = drift_slope(t);
    return zeta == 0.0 ? std::numeric_limits<double>::infinity() : std::abs(1.0 / zeta);
  }
  if (!t.theta5 || !(*t.theta5 > 0.0)) throw ValidationError("hidden timescale needs theta5 > 0");
  return *t.theta5 * *t.theta5;
}

/// Ψ = sqrt(D2_C) sqrt(D2_λ) h = θ4 h / θ5.
inline double composite_noise(double theta4, double theta5, double h) { return theta4 * (1.0 / theta5) * h; }

/// Strict time-scale separation test; τ_C = +inf when ζ = 0.
inline bool separation_holds(Separation sep, double zeta, double theta5, double gamma) {
  const double tau_lambda = theta5 * theta5;
  const double abs_zeta = std::abs(zeta);
  if (sep == Separation::slow_hidden) return tau_lambda * abs_zeta > gamma;  // τ_λ > γ τ_C
  return gamma * tau_lambda * abs_zeta < 1.0;                                // τ_C > γ τ_λ
}

inline std::array<double, 4> taylor_from_monomial(std::span<const double> th, double c) {
  return {th[0] + c * (th[1] + c * (th[2] + c * th[3])), th[1] + 2.0 * th[2] * c + 3.0 * th[3] * c * c,
          th[2] + 3.0 * th[3] * c, th[3]};
}

inline std::array<double, 4> monomial_from_taylor(std::span<const double> a, double c) {
  return {a[0] - a[1] * c + a[2] * c * c - a[3] * c * c * c, a[1] - 2.0 * a[2] * c + 3.0 * a[3] * c * c,
          a[2] - 3.0 * a[3] * c, a[3]};
}

// ---------------------------------------------------------------------------
// Detrending

struct Detrended {
  std::vector<double> detrended;
  std::vector<double> trend;
};

/// Gaussian smoothing with standard deviation `width` samples, kernel
/// truncated at 4 sd and half-sample symmetric reflection at the ends (the
/// conventions of scipy.ndimage.gaussian_filter).
inline Detrended detrend_gaussian(std::span<const double> x, double width) {
  if (!(width > 0.0)) throw ValidationError("detrend width must be > 0");
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  const auto radius = static_cast<std::ptrdiff_t>(4.0 * width + 0.5);
  std::vector<double> w(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (width * width));
    w[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (double& v : w) v /= total;
  auto reflect = [n](std::ptrdiff_t i) {
    const std::ptrdiff_t period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
  };
  Detrended out;
  out.trend.resize(x.size());
  out.detrended.resize(x.size());
  for (std::ptrdiff_t t = 0; t < n; ++t) {
    double acc = 0.0;
    for (std::ptrdiff_t i = -radius; i <= radius; ++i)
      acc += w[static_cast<std::size_t>(i + radius)] * x[static_cast<std::size_t>(reflect(t + i))];
    out.trend[static_cast<std::size_t>(t)] = acc;
    out.detrended[static_cast<std::size_t>(t)] = x[static_cast<std::size_t>(t)] - acc;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Windows

struct WindowPlan {
  std::size_t window_size = 500;
  std::size_t window_shift = 15;
  std::vector<std::pair<std::size_t, std::size_t>> windows;  // [start, end)
};

inline WindowPlan plan_windows(std::size_t length, std::size_t size, std::size_t shift) {
  if (size < 1 || size > length) throw ValidationError("window size must satisfy 1 <= size <= series length");
  if (shift < 1) throw ValidationError("window shift must be >= 1");
  WindowPlan p{size, shift, {}};
  for (std::size_t start = 0; start + size <= length; start += shift) p.windows.emplace_back(start, start + size);
  return p;
}

// ---------------------------------------------------------------------------
// Priors and settings

struct ResiliencePriors {
  std::array<Bounds, 6> bounds{Bounds{-50, 50}, Bounds{-50, 50}, Bounds{-50, 50},
                               Bounds{-50, 50}, Bounds{1e-8, 50}, Bounds{1e-8, 50}};
  double theta2_sigma = 4.0;
  double theta3_sigma = 8.0;
  double theta4_sigma_nonmarkov = 4.0;

  // Prior ranges of the published configurations. A lower bound of 0 is
  // represented by 1e-8 so that scale priors stay evaluable.
  static ResiliencePriors preset(const std::string& name) {
    ResiliencePriors p;
    if (name == "main") return p;
    if (name == "inverse") {
      p.bounds = {Bounds{-25, 25}, Bounds{-25, 25}, Bounds{-25, 25}, Bounds{-25, 25}, Bounds{1e-8, 5}, Bounds{0.01, 5}};
      return p;
    }
    if (name == "wide") {
      p.bounds = {Bounds{-100, 100}, Bounds{-100, 100}, Bounds{-100, 100},
                  Bounds{-100, 100}, Bounds{1e-8, 250},  Bounds{0.01, 2000}};
      return p;
    }
    throw ValidationError("unknown prior preset '" + name + "' (expected main|inverse|wide)");
  }

  void validate() const {
    for (std::size_t i = 0; i < bounds.size(); ++i)
      if (!(bounds[i].lo < bounds[i].hi)) throw ValidationError("prior range of theta" + std::to_string(i) + " is empty");
    if (!(bounds[4].lo > 0.0)) throw ValidationError("theta4 prior range must be positive");
    if (!(bounds[5].lo > 0.0)) throw ValidationError("theta5 prior range must be positive");
    if (!(theta2_sigma > 0.0) || !(theta3_sigma > 0.0) || !(theta4_sigma_nonmarkov > 0.0))
      throw ValidationError("Gaussian prior widths must be > 0");
  }
};

struct ResilienceSettings {
  ResilienceModel model = ResilienceModel::markov;
  std::size_t window_size = 500;
  std::size_t window_shift = 15;
  double gamma = 2.0;
  double step_h = 1.0;
  ResiliencePriors priors;
  std::size_t walkers = 50;
  std::size_t steps = 15000;
  std::size_t n_burn = 200;
  std::size_t thin = 10;
  std::uint64_t seed = 0;
  unsigned threads = 0;

  void validate() const {
    priors.validate();
    if (!(gamma >= 1.0)) throw ValidationError("gamma must be >= 1");
    if (!(step_h > 0.0)) throw ValidationError("step_h must be > 0");
    if (window_size < 10) throw ValidationError("window_size must be >= 10");
    if (window_shift < 1) throw ValidationError("window_shift must be >= 1");
    if (thin < 1) throw ValidationError("thin must be >= 1");
    if (n_burn >= steps) throw ValidationError("burn-in must be smaller than steps");
  }
};

// ---------------------------------------------------------------------------
// Window likelihoods

/// Moments of one window used by both likelihoods.
class WindowMoments {
 public:
  WindowMoments(std::span<const double> x, double h) : h_(h), n_(x.size()) {
    if (x.size() < 4) throw ValidationError("window needs at least 4 points");
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    c_ = mean;
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    variance_ = var / static_cast<double>(x.size());

    // u_t = (dx_t, 1, z_t, z_t², z_t³) for transitions t = 0..n-2.
    std::vector<std::array<double, 5>> u(n_ - 1);
    for (std::size_t t = 0; t + 1 < n_; ++t) {
      const double z = x[t] - c_;
      u[t] = {x[t + 1] - x[t], 1.0, z, z * z, z * z * z};
    }
    for (const auto& ut : u) {
      const double z = ut[2];
      double zp = 1.0;
      for (std::size_t p = 0; p <= 6; ++p) {
        zpow_[p] += zp;
        if (p <= 3) dxz_[p] += ut[0] * zp;
        zp *= z;
      }
      dx2_ += ut[0] * ut[0];
    }
    u0_ = u.front();
    for (std::size_t t = 0; t + 1 < u.size(); ++t) {
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
          next_next_(i, j) += u[t + 1][i] * u[t + 1][j];
          cur_cur_(i, j) += u[t][i] * u[t][j];
          next_cur_(i, j) += u[t + 1][i] * u[t][j];
        }
    }
  }

  double fixed_point() const { return c_; }
  double variance() const { return variance_; }
  std::size_t size() const { return n_; }
  double step_h() const { return h_; }

  /// Residual sum of squares of dx - h D1 for Taylor coefficients a.
  double markov_rss(const std::array<double, 4>& a) const {
    double lin = 0.0, quad = 0.0;
    for (std::size_t p = 0; p < 4; ++p) {
      lin += a[p] * dxz_[p];
      for (std::size_t q = 0; q < 4; ++q) quad += a[p] * a[q] * zpow_[p + q];
    }
    return std::max(0.0, dx2_ - 2.0 * h_ * lin + h_ * h_ * quad);
  }

  /// log N(dx_t; h D1(x_t), h σ²) summed over transitions.
  double markov_log_likelihood(const std::array<double, 4>& a, double sigma) const {
    const double m = static_cast<double>(n_ - 1);
    const double var = h_ * sigma * sigma;
    return -0.5 * m * std::log(2.0 * std::numbers::pi * var) - 0.5 * markov_rss(a) / var;
  }

  /// Log density of the observed window under the hidden-OU model with λ
  /// reconstructed as (dx_t - h D1(x_t)) / (θ4 h): stationary N(0, 1/2) for
  /// λ_0, OU transitions λ_{t+1} | λ_t, and the Jacobian (θ4 h)^{-(n-1)}.
  double hidden_ou_log_likelihood(const std::array<double, 4>& a, double theta4, double theta5) const {
    const Eigen::Matrix<double, 5, 1> v = residual_weights(a);
    const double scale = theta4 * h_;
    const double q_var = h_ / (theta5 * theta5);  // OU transition variance
    const double rho = 1.0 - q_var;               // OU one-step multiplier
    const double l0 = v.dot(u0()) / scale;
    const double ss = (v.dot(next_next_ * v) - 2.0 * rho * v.dot(next_cur_ * v) + rho * rho * v.dot(cur_cur_ * v)) /
                      (scale * scale);
    const double m = static_cast<double>(n_ - 2);
    return (-0.5 * std::log(std::numbers::pi) - l0 * l0) +
           (-0.5 * m * std::log(2.0 * std::numbers::pi * q_var) - 0.5 * std::max(ss, 0.0) / q_var) -
           static_cast<double>(n_ - 1) * std::log(scale);
  }

  /// Reconstructed hidden sequence λ_0..λ_{n-2} (needs the raw window).
  static std::vector<double> reconstruct_hidden(std::span<const double> x, const DriftThetaVector& th, double h) {
    std::vector<double> lam(x.size() - 1);
    for (std::size_t t = 0; t + 1 < x.size(); ++t) lam[t] = (x[t + 1] - x[t] - h * th.drift(x[t])) / (th.theta4 * h);
    return lam;
  }

  // Pieces for the start-point search.
  Eigen::Matrix<double, 5, 1> u0() const {
    Eigen::Matrix<double, 5, 1> v;
    for (int i = 0; i < 5; ++i) v(i) = u0_[static_cast<std::size_t>(i)];
    return v;
  }
  const Eigen::Matrix<double, 5, 5>& next_next() const { return next_next_; }
  const Eigen::Matrix<double, 5, 5>& cur_cur() const { return cur_cur_; }
  const Eigen::Matrix<double, 5, 5>& next_cur() const { return next_cur_; }
  double zpow(std::size_t p) const { return zpow_[p]; }
  double dxz(std::size_t p) const { return dxz_[p]; }

  Eigen::Matrix<double, 5, 1> residual_weights(const std::array<double, 4>& a) const {
    Eigen::Matrix<double, 5, 1> v;
    v << 1.0, -h_ * a[0], -h_ * a[1], -h_ * a[2], -h_ * a[3];
    return v;
  }

 private:
  double h_;
  std::size_t n_;
  double c_ = 0.0;
  double variance_ = 0.0;
  std::array<double, 7> zpow_{};
  std::array<double, 4> dxz_{};
  double dx2_ = 0.0;
  std::array<double, 5> u0_{};
  Eigen::Matrix<double, 5, 5> next_next_ = Eigen::Matrix<double, 5, 5>::Zero();
  Eigen::Matrix<double, 5, 5> cur_cur_ = Eigen::Matrix<double, 5, 5>::Zero();
  Eigen::Matrix<double, 5, 5> next_cur_ = Eigen::Matrix<double, 5, 5>::Zero();
};

/// Log prior shared by both models for θ0..θ3 (bounds checked by the caller).
inline double drift_log_prior(std::span<const double> th, const ResiliencePriors& p) {
  return priors::flat_line_invariant(th[0], th[1]) + priors::gaussian(th[2], 0.0, p.theta2_sigma) +
         priors::gaussian(th[3], 0.0, p.theta3_sigma);
}

struct WindowPosterior {
  PosteriorEnsemble ensemble;  // θ0..θ4 (Markov) or θ0..θ5
  double fixed_point = 0.0;
  std::vector<double> zeta;   // per retained sample
  std::vector<double> noise;  // σ = θ4 (Markov) or Ψ
  bool degenerate_noise = false;
};

namespace detail {

// Gaussian approximation of the Markov posterior over the Taylor
// coefficients for a fixed σ, including the Gaussian priors on θ2, θ3.
struct TaylorGaussian {
  Eigen::Vector4d mean;
  Eigen::Matrix4d cov;
};

// Precision of the Gaussian priors on θ2 and θ3 expressed in Taylor
// coefficients (θ2 = α2 - 3 c α3, θ3 = α3).
inline Eigen::Matrix4d taylor_prior_precision(double c, const ResiliencePriors& p) {
  const Eigen::Vector4d g2(0.0, 0.0, 1.0, -3.0 * c);
  const Eigen::Vector4d g3(0.0, 0.0, 0.0, 1.0);
  return g2 * g2.transpose() / (p.theta2_sigma * p.theta2_sigma) +
         g3 * g3.transpose() / (p.theta3_sigma * p.theta3_sigma);
}

inline TaylorGaussian markov_taylor_gaussian(const WindowMoments& wm, double sigma, const ResiliencePriors& p,
                                             bool with_priors) {
  const double h = wm.step_h();
  Eigen::Matrix4d prec;
  Eigen::Vector4d rhs;
  for (int i = 0; i < 4; ++i) {
    rhs(i) = wm.dxz(static_cast<std::size_t>(i)) / (sigma * sigma);
    for (int j = 0; j < 4; ++j) prec(i, j) = h * wm.zpow(static_cast<std::size_t>(i + j)) / (sigma * sigma);
  }
  if (with_priors) prec += taylor_prior_precision(wm.fixed_point(), p);
  for (int i = 0; i < 4; ++i) prec(i, i) *= 1.0 + 1e-12;
  TaylorGaussian g;
  const Eigen::LDLT<Eigen::Matrix4d> ldlt(prec);
  g.mean = ldlt.solve(rhs);
  g.cov = ldlt.solve(Eigen::Matrix4d::Identity());
  return g;
}

inline std::array<double, 4> to_array(const Eigen::Vector4d& v) { return {v(0), v(1), v(2), v(3)}; }

// Draws walker starts: Taylor coefficients from a Gaussian, scale
// parameters around their centres with relative spread, redrawing until the
// target is finite.
inline std::vector<std::vector<double>> draw_starts(const LogDensity& target, std::size_t walkers, double c,
                                                    const TaylorGaussian& taylor, std::span<const double> scale_centres,
                                                    std::span<const double> scale_sds, Engine& rng) {
  std::normal_distribution<double> normal;
  Eigen::LLT<Eigen::Matrix4d> llt(taylor.cov);
  const Eigen::Matrix4d L = llt.matrixL();
  std::vector<std::vector<double>> starts;
  std::size_t attempts = 0;
  while (starts.size() < walkers) {
    if (++attempts > 200 * walkers) throw RuntimeError("could not place walkers inside the posterior support");
    Eigen::Vector4d z;
    for (int i = 0; i < 4; ++i) z(i) = normal(rng);
    const Eigen::Vector4d a = taylor.mean + L * z;
    const auto th = monomial_from_taylor(to_array(a), c);
    std::vector<double> w(th.begin(), th.end());
    for (std::size_t i = 0; i < scale_centres.size(); ++i)
      w.push_back(scale_centres[i] + scale_sds[i] * normal(rng));
    if (std::isfinite(target.log_prob(w))) starts.push_back(std::move(w));
  }
  return starts;
}

inline EnsembleSettings ensemble_settings(const ResilienceSettings& s, std::size_t dim, std::uint64_t seed) {
  EnsembleSettings es;
  es.walkers = std::max(s.walkers, 2 * dim);
  es.steps = s.steps;
  es.n_burn = s.n_burn;
  es.thin = s.thin;
  es.seed = seed;
  return es;
}

}  // namespace detail

/// Markov window posterior over (θ0..θ4) with drift θ0 + θ1 x + θ2 x² + θ3 x³
/// and constant diffusion θ4². Walkers start from the Gaussian approximation
/// around the penalised least-squares fit.
inline WindowPosterior markov_window_posterior(std::span<const double> x, const ResilienceSettings& s,
                                               std::uint64_t seed) {
  s.priors.validate();
  const WindowMoments wm(x, s.step_h);
  if (!(wm.variance() >= 1e-12)) throw ValidationError("degenerate window: variance below 1e-12");
  const double c = wm.fixed_point();
  const double h = s.step_h;
  const auto& pr = s.priors;

  LogDensity target;
  target.dim = 5;
  target.bounds.assign(pr.bounds.begin(), pr.bounds.begin() + 5);
  target.evaluate = [&wm, &pr, c](std::span<const double> th) {
    const auto a = taylor_from_monomial(th, c);
    return wm.markov_log_likelihood(a, th[4]) + drift_log_prior(th, pr) + priors::jeffreys_scale(th[4]);
  };

  // Start point: least squares, then the prior-penalised refinement.
  auto g = detail::markov_taylor_gaussian(wm, 1.0, pr, false);
  const double n_tr = static_cast<double>(wm.size() - 1);
  double sigma = std::sqrt(wm.markov_rss(detail::to_array(g.mean)) / (h * n_tr));
  const bool degenerate = !(sigma > 10.0 * pr.bounds[4].lo);
  sigma = std::clamp(sigma, pr.bounds[4].lo * 2.0, pr.bounds[4].hi * 0.5);
  g = detail::markov_taylor_gaussian(wm, sigma, pr, true);

  Engine rng = make_engine(seed, 0xabcdull);
  const auto es = detail::ensemble_settings(s, 5, seed);
  const double centres[] = {sigma};
  const double sds[] = {std::max(sigma / std::sqrt(2.0 * n_tr), 1e-3 * sigma)};
  const auto starts = detail::draw_starts(target, es.walkers, c, g, centres, sds, rng);

  WindowPosterior out;
  out.fixed_point = c;
  out.ensemble = run_ensemble_mcmc(target, es, &starts);
  out.degenerate_noise = degenerate;
  for (std::size_t i = 0; i < out.ensemble.sample_count(); ++i) {
    const auto th = out.ensemble.sample(i);
    out.zeta.push_back(taylor_from_monomial(th, c)[1]);
    out.noise.push_back(th[4]);
  }
  return out;
}

/// Hidden-OU window posterior over (θ0..θ5). Configurations violating the
/// selected strict time-scale separation get zero prior density. Walkers
/// start around the best point of a profile search over θ5 in which the
/// Taylor coefficients and θ4 are solved in closed form.
inline WindowPosterior nonmarkov_window_posterior(std::span<const double> x, Separation sep,
                                                  const ResilienceSettings& s, std::uint64_t seed) {
  s.priors.validate();
  const WindowMoments wm(x, s.step_h);
  if (!(wm.variance() >= 1e-12)) throw ValidationError("degenerate window: variance below 1e-12");
  const double c = wm.fixed_point();
  const double h = s.step_h;
  const double gamma = s.gamma;
  const auto& pr = s.priors;

  LogDensity target;
  target.dim = 6;
  target.bounds.assign(pr.bounds.begin(), pr.bounds.end());
  target.evaluate = [&wm, &pr, c, sep, gamma](std::span<const double> th) {
    const auto a = taylor_from_monomial(th, c);
    if (!separation_holds(sep, a[1], th[5], gamma)) return kNegInf;
    return wm.hidden_ou_log_likelihood(a, th[4], th[5]) + drift_log_prior(th, pr) +
           priors::gaussian(th[4], 0.0, pr.theta4_sigma_nonmarkov) + priors::ou_invariant(th[5]);
  };

  // Profile over θ5. For fixed θ5 and θ4 the α-dependence of the log
  // posterior is -(v0 + D α)ᵀ G (v0 + D α) / (θ4 h)² plus the Gaussian priors,
  // so α is solved in closed form and θ4 refined by a few fixed-point steps.
  struct Candidate {
    double logp = kNegInf;
    detail::TaylorGaussian alpha;
    double theta4 = 0.0, theta5 = 0.0;
  };
  Candidate best;
  Eigen::Matrix<double, 5, 4> D = Eigen::Matrix<double, 5, 4>::Zero();
  D.block<4, 4>(1, 0) = -h * Eigen::Matrix4d::Identity();
  Eigen::Matrix<double, 5, 1> e0 = Eigen::Matrix<double, 5, 1>::Zero();
  e0(0) = 1.0;
  const double n_tr = static_cast<double>(wm.size() - 1);
  const double t5_lo = std::max(pr.bounds[5].lo, std::sqrt(h)), t5_hi = pr.bounds[5].hi;
  const Eigen::Matrix<double, 5, 5> cross = wm.next_cur() + wm.next_cur().transpose();
  const Eigen::Matrix4d prior_prec = detail::taylor_prior_precision(c, pr);
  auto theta4_of = [&](double quad) {
    return std::clamp(std::sqrt(2.0 * std::max(quad, 0.0) / (n_tr * h * h)), pr.bounds[4].lo * 2.0,
                      pr.bounds[4].hi * 0.5);
  };
  auto consider = [&](const detail::TaylorGaussian& a, double t4, double t5) {
    const auto th = monomial_from_taylor(detail::to_array(a.mean), c);
    // Prior ranges are left to the walker draws: the Gaussian centre may sit
    // outside them even when most of its mass does not.
    const double lp = target.evaluate(std::vector<double>{th[0], th[1], th[2], th[3], t4, t5});
    if (lp > best.logp) best = Candidate{lp, a, t4, t5};
  };
  constexpr int kGrid = 160;
  for (int g = 0; g < kGrid; ++g) {
    const double t5 = t5_lo * std::pow(t5_hi / t5_lo, (g + 0.5) / kGrid);
    const double q_var = h / (t5 * t5);
    const double rho = 1.0 - q_var;
    const Eigen::Matrix<double, 5, 5> G =
        (wm.next_next() - rho * cross + rho * rho * wm.cur_cur()) / (2.0 * q_var) + wm.u0() * wm.u0().transpose();
    const Eigen::Matrix4d M = D.transpose() * G * D;
    const Eigen::Vector4d b = D.transpose() * G * e0;
    Eigen::Matrix4d prec = M;
    for (int i = 0; i < 4; ++i) prec(i, i) *= 1.0 + 1e-12;
    Eigen::Vector4d alpha = -prec.ldlt().solve(b);
    double t4 = theta4_of((e0 + D * alpha).dot(G * (e0 + D * alpha)));
    for (int it = 0; it < 4; ++it) {
      const double s2 = t4 * h * t4 * h;
      prec = 2.0 * M / s2 + prior_prec;
      for (int i = 0; i < 4; ++i) prec(i, i) *= 1.0 + 1e-12;
      alpha = -prec.ldlt().solve(2.0 * b / s2);
      t4 = theta4_of((e0 + D * alpha).dot(G * (e0 + D * alpha)));
    }
    consider(detail::TaylorGaussian{alpha, prec.ldlt().solve(Eigen::Matrix4d::Identity())}, t4, t5);
  }
  // Fallback: the Markov fit with a θ5 satisfying the separation.
  if (!std::isfinite(best.logp)) {
    const auto g0 = detail::markov_taylor_gaussian(wm, 1.0, pr, false);
    const double sigma = std::sqrt(wm.markov_rss(detail::to_array(g0.mean)) / (h * n_tr));
    const auto g = detail::markov_taylor_gaussian(wm, std::max(sigma, 1e-12), pr, true);
    for (int g5 = 0; g5 < kGrid && !std::isfinite(best.logp); ++g5) {
      const double t5 = t5_lo * std::pow(t5_hi / t5_lo, (g5 + 0.5) / kGrid);
      if (separation_holds(sep, g.mean(1), t5, gamma)) consider(g, theta4_of(n_tr * h * sigma * sigma / 2.0), t5);
    }
  }
  if (!std::isfinite(best.logp)) throw RuntimeError("no admissible start point for the hidden-OU posterior");

  const detail::TaylorGaussian& tg = best.alpha;
  Engine rng = make_engine(seed, 0xabcdull);
  const auto es = detail::ensemble_settings(s, 6, seed);
  const double centres[] = {best.theta4, best.theta5};
  const double sds[] = {best.theta4 / std::sqrt(2.0 * n_tr), 0.05 * best.theta5};
  const auto starts = detail::draw_starts(target, es.walkers, c, tg, centres, sds, rng);

  WindowPosterior out;
  out.fixed_point = c;
  out.ensemble = run_ensemble_mcmc(target, es, &starts);
  for (std::size_t i = 0; i < out.ensemble.sample_count(); ++i) {
    const auto th = out.ensemble.sample(i);
    out.zeta.push_back(taylor_from_monomial(th, c)[1]);
    out.noise.push_back(composite_noise(th[4], th[5], h));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rolling windows

struct ResilienceTrack {
  ResilienceModel model = ResilienceModel::markov;
  std::vector<double> window_centers;
  std::vector<double> fixed_points;
  std::vector<double> zeta_mean, zeta_ci_lower, zeta_ci_upper;
  std::vector<double> noise_mean, noise_ci_lower, noise_ci_upper;
  std::vector<double> acceptance;
  std::vector<bool> degenerate_noise;
  std::vector<std::optional<std::string>> failures;  // gap reason per window

  std::size_t size() const { return window_centers.size(); }
};

/// Runs the selected posterior on every window (in parallel, one RNG stream
/// per window). Failing windows become NaN gaps with a recorded reason.
inline ResilienceTrack run_resilience(std::span<const double> series, const ResilienceSettings& s) {
  s.validate();
  const auto plan = plan_windows(series.size(), s.window_size, s.window_shift);
  const std::size_t n = plan.windows.size();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  ResilienceTrack tr;
  tr.model = s.model;
  tr.window_centers.resize(n);
  tr.fixed_points.assign(n, nan);
  for (auto* v : {&tr.zeta_mean, &tr.zeta_ci_lower, &tr.zeta_ci_upper, &tr.noise_mean, &tr.noise_ci_lower,
                  &tr.noise_ci_upper, &tr.acceptance})
    v->assign(n, nan);
  tr.degenerate_noise.assign(n, false);
  tr.failures.assign(n, std::nullopt);
  std::vector<char> degenerate(n, 0);

  parallel_for(n, s.threads, [&](std::size_t w) {
    const auto [start, end] = plan.windows[w];
    tr.window_centers[w] = static_cast<double>(start) + 0.5 * static_cast<double>(end - start - 1);
    const auto window = series.subspan(start, end - start);
    try {
      const std::uint64_t seed = stream_seed(s.seed, w);
      const WindowPosterior post =
          s.model == ResilienceModel::markov
              ? markov_window_posterior(window, s, seed)
              : nonmarkov_window_posterior(
                    window,
                    s.model == ResilienceModel::nonmarkov_slow_hidden ? Separation::slow_hidden : Separation::fast_hidden,
                    s, seed);
      const Summary z = summarize_samples(post.zeta);
      const Summary q = summarize_samples(post.noise);
      tr.fixed_points[w] = post.fixed_point;
      tr.zeta_mean[w] = z.mean;
      tr.zeta_ci_lower[w] = z.ci_lower;
      tr.zeta_ci_upper[w] = z.ci_upper;
      tr.noise_mean[w] = q.mean;
      tr.noise_ci_lower[w] = q.ci_lower;
      tr.noise_ci_upper[w] = q.ci_upper;
      tr.acceptance[w] = post.ensemble.acceptance_rate;
      degenerate[w] = post.degenerate_noise ? 1 : 0;
    } catch (const std::exception& e) {
      tr.failures[w] = e.what();
    }
  });
  for (std::size_t w = 0; w < n; ++w) tr.degenerate_noise[w] = degenerate[w] != 0;
  return tr;
}

inline void write_track(const std::filesystem::path& csv, const ResilienceTrack& tr) {
  io::write_csv(csv, {"center", "zeta_mean", "zeta_lo", "zeta_hi", "noise_mean", "noise_lo", "noise_hi"},
                {tr.window_centers, tr.zeta_mean, tr.zeta_ci_lower, tr.zeta_ci_upper, tr.noise_mean,
                 tr.noise_ci_lower, tr.noise_ci_upper});
}

inline io::json to_json(const ResilienceSettings& s) {
  io::json bounds = io::json::array();
  for (const auto& b : s.priors.bounds) bounds.push_back({b.lo, b.hi});
  return io::json{{"model_tag", to_string(s.model)},
                  {"window_size", s.window_size},
                  {"window_shift", s.window_shift},
                  {"gamma", s.gamma},
                  {"step_h", s.step_h},
                  {"priors",
                   {{"ranges", bounds},
                    {"theta2_sigma", s.priors.theta2_sigma},
                    {"theta3_sigma", s.priors.theta3_sigma},
                    {"theta4_sigma_nonmarkov", s.priors.theta4_sigma_nonmarkov}}},
                  {"mcmc", {{"walkers", s.walkers}, {"steps", s.steps}, {"burn_in", s.n_burn}, {"thin", s.thin}}},
                  {"seed", s.seed},
                  {"rng", kRngAlgorithm}};
}

}  // namespace mcorr
