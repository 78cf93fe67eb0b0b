#pragma once

// Bayesian estimation of the binned-coefficient GLE.
//
// Parameter layout (natural coordinates) for n_B bins and k_max lags:
//   [D1_0 .. D1_{nB-1}, D2_0 .. D2_{nB-1}, K_1 .. K_kmax]
// The sampler works on log D2 internally; the returned ensemble is converted
// back to natural coordinates.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mcorr/bayes_core.hpp"
#include "mcorr/error.hpp"
#include "mcorr/gle_model.hpp"
#include "mcorr/io.hpp"
#include "mcorr/market_data.hpp"
#include "mcorr/rng.hpp"

namespace mcorr {

enum class BinMode { equal_width, equal_count };

inline const char* to_string(BinMode m) { return m == BinMode::equal_width ? "equal_width" : "equal_count"; }

inline BinMode bin_mode_from_string(const std::string& s) {
  if (s == "equal_width") return BinMode::equal_width;
  if (s == "equal_count") return BinMode::equal_count;
  throw ValidationError("unknown bin mode '" + s + "' (expected equal_width|equal_count)");
}

struct Binning {
  std::vector<double> edges;
  std::vector<std::size_t> assignment;
  BinMode mode = BinMode::equal_width;

  std::size_t n_bins() const { return edges.size() - 1; }
};

/// equal_width: uniform edges over [min, max]. equal_count: edges halfway
/// between the order statistics at ranks ceil(i N / n_bins).
inline Binning bin_series(std::span<const double> values, std::size_t n_bins, BinMode mode = BinMode::equal_width) {
  if (n_bins < 2) throw ValidationError("n_bins must be >= 2");
  if (values.size() < n_bins) throw ValidationError("series is shorter than the number of bins");
  const auto [mn_it, mx_it] = std::minmax_element(values.begin(), values.end());
  const double mn = *mn_it, mx = *mx_it;
  if (!(mx > mn)) throw ValidationError("cannot bin a constant series");

  Binning b;
  b.mode = mode;
  b.edges.resize(n_bins + 1);
  if (mode == BinMode::equal_width) {
    for (std::size_t i = 0; i <= n_bins; ++i)
      b.edges[i] = mn + (mx - mn) * static_cast<double>(i) / static_cast<double>(n_bins);
    b.edges.back() = mx;
  } else {
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    b.edges.front() = mn;
    b.edges.back() = mx;
    for (std::size_t i = 1; i < n_bins; ++i) {
      const std::size_t r = (i * n + n_bins - 1) / n_bins;
      b.edges[i] = 0.5 * (sorted[r - 1] + sorted[r]);
    }
    for (std::size_t i = 1; i <= n_bins; ++i)
      if (!(b.edges[i] > b.edges[i - 1])) throw ValidationError("equal-count binning produced empty bins (too many ties)");
  }
  b.assignment.resize(values.size());
  for (std::size_t t = 0; t < values.size(); ++t) b.assignment[t] = bin_index(b.edges, values[t]);
  return b;
}

// ---------------------------------------------------------------------------
// Likelihood

/// Euler–Maruyama Gaussian transition log-likelihood with explicit bin labels
/// (label of x_t). Transitions t -> t+1 for t >= k_max only.
inline double gle_log_likelihood_assigned(std::span<const double> theta, std::span<const double> x,
                                          std::span<const std::size_t> assignment, std::size_t n_bins,
                                          std::size_t k_max, double h) {
  if (theta.size() != 2 * n_bins + k_max) throw ValidationError("theta has the wrong length for the GLE layout");
  if (x.size() < k_max + 2) throw ValidationError("series too short for the kernel length");
  for (std::size_t b = 0; b < n_bins; ++b)
    if (!(theta[n_bins + b] > 0.0)) throw ValidationError("diffusion parameters must be positive");
  const double log_2pi_h = std::log(2.0 * std::numbers::pi * h);
  double total = 0.0;
  for (std::size_t t = k_max; t + 1 < x.size(); ++t) {
    const std::size_t b = assignment[t];
    double memory = 0.0;
    for (std::size_t k = 1; k <= k_max; ++k) memory += theta[2 * n_bins + k - 1] * x[t - k];
    const double mean = x[t] + h * (theta[b] + memory);
    const double var = h * theta[n_bins + b];
    const double e = x[t + 1] - mean;
    total += -0.5 * (log_2pi_h + std::log(theta[n_bins + b])) - 0.5 * e * e / var;
  }
  return total;
}

inline double gle_log_likelihood(std::span<const double> theta, std::span<const double> x,
                                 std::span<const double> edges, std::size_t k_max, double h) {
  std::vector<std::size_t> assignment(x.size());
  for (std::size_t t = 0; t < x.size(); ++t) assignment[t] = bin_index(edges, x[t]);
  return gle_log_likelihood_assigned(theta, x, assignment, edges.size() - 1, k_max, h);
}

/// Per-bin sufficient statistics of the same likelihood. With
/// w_t = (1, x_{t-1}, ..., x_{t-k}) and dx_t = x_{t+1} - x_t:
///   A_b = sum w wᵀ, c_b = sum w dx, s_b = sum dx², n_b = count.
class GleSufficientStats {
 public:
  GleSufficientStats(std::span<const double> x, std::span<const std::size_t> assignment, std::size_t n_bins,
                     std::size_t k_max, double h)
      : n_bins_(n_bins), k_(k_max), p_(k_max + 1), h_(h),
        count_(n_bins, 0.0), A_(n_bins * p_ * p_, 0.0), c_(n_bins * p_, 0.0), s_(n_bins, 0.0) {
    if (x.size() < k_max + 2) throw ValidationError("series too short for the kernel length");
    if (!(h > 0.0)) throw ValidationError("step_h must be > 0");
    std::vector<double> w(p_);
    for (std::size_t t = k_max; t + 1 < x.size(); ++t) {
      const std::size_t b = assignment[t];
      w[0] = 1.0;
      for (std::size_t k = 1; k <= k_max; ++k) w[k] = x[t - k];
      const double dx = x[t + 1] - x[t];
      count_[b] += 1.0;
      s_[b] += dx * dx;
      double* A = A_.data() + b * p_ * p_;
      double* c = c_.data() + b * p_;
      for (std::size_t i = 0; i < p_; ++i) {
        c[i] += w[i] * dx;
        for (std::size_t j = 0; j < p_; ++j) A[i * p_ + j] += w[i] * w[j];
      }
    }
  }

  std::size_t n_bins() const { return n_bins_; }
  std::size_t k_max() const { return k_; }
  double step_h() const { return h_; }
  double count(std::size_t b) const { return count_[b]; }

  // Sum of squared residuals of bin b for drift d1 and kernel K.
  double rss(std::size_t b, double d1, std::span<const double> kernel) const {
    const double* A = A_.data() + b * p_ * p_;
    const double* c = c_.data() + b * p_;
    double quad = d1 * d1 * A[0];
    double lin = d1 * c[0];
    for (std::size_t i = 1; i < p_; ++i) {
      const double ki = kernel[i - 1];
      lin += ki * c[i];
      double row = 2.0 * d1 * A[i];
      for (std::size_t j = 1; j < p_; ++j) row += A[i * p_ + j] * kernel[j - 1];
      quad += ki * row;
    }
    return std::max(0.0, s_[b] - 2.0 * h_ * lin + h_ * h_ * quad);
  }

  double log_likelihood(std::span<const double> theta) const {
    const std::span<const double> kernel = theta.subspan(2 * n_bins_, k_);
    const double log_2pi_h = std::log(2.0 * std::numbers::pi * h_);
    double total = 0.0;
    for (std::size_t b = 0; b < n_bins_; ++b) {
      if (count_[b] == 0.0) continue;
      const double d2 = theta[n_bins_ + b];
      total += -0.5 * count_[b] * (log_2pi_h + std::log(d2)) - 0.5 * rss(b, theta[b], kernel) / (h_ * d2);
    }
    return total;
  }

  // Weighted least-squares drift/kernel for fixed diffusion, and the
  // corresponding precision matrix of (D1 of populated bins, K).
  struct LinearSolution {
    std::vector<double> drift;
    std::vector<double> kernel;
    Eigen::MatrixXd precision;
    std::vector<std::size_t> populated;  // bin index of each drift row in precision
  };

  LinearSolution solve_linear(std::span<const double> diffusion) const {
    LinearSolution sol;
    for (std::size_t b = 0; b < n_bins_; ++b)
      if (count_[b] > 0.0) sol.populated.push_back(b);
    const std::size_t nb = sol.populated.size();
    const std::size_t n = nb + k_;
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    Eigen::VectorXd g = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    // Row index of parameter i of bin b's local vector (D1_b, K_1..K_k).
    auto index = [&](std::size_t slot, std::size_t i) { return static_cast<Eigen::Index>(i == 0 ? slot : nb + i - 1); };
    for (std::size_t slot = 0; slot < nb; ++slot) {
      const std::size_t b = sol.populated[slot];
      const double wgt = 1.0 / diffusion[b];
      const double* A = A_.data() + b * p_ * p_;
      const double* c = c_.data() + b * p_;
      for (std::size_t i = 0; i < p_; ++i) {
        g(index(slot, i)) += wgt * c[i];
        for (std::size_t j = 0; j < p_; ++j) H(index(slot, i), index(slot, j)) += h_ * wgt * A[i * p_ + j];
      }
    }
    const Eigen::VectorXd u = H.ldlt().solve(g);
    sol.drift.assign(n_bins_, 0.0);
    for (std::size_t slot = 0; slot < nb; ++slot) sol.drift[sol.populated[slot]] = u(static_cast<Eigen::Index>(slot));
    sol.kernel.resize(k_);
    for (std::size_t k = 0; k < k_; ++k) sol.kernel[k] = u(static_cast<Eigen::Index>(nb + k));
    sol.precision = std::move(H);
    return sol;
  }

 private:
  std::size_t n_bins_, k_, p_;
  double h_;
  std::vector<double> count_;
  std::vector<double> A_;
  std::vector<double> c_;
  std::vector<double> s_;
};

// ---------------------------------------------------------------------------
// Fitting

struct GleFitSettings {
  std::size_t n_bins = 10;
  BinMode bin_mode = BinMode::equal_width;
  std::size_t k_max = 6;
  double step_h = 1.0;
  Bounds drift_bounds{-50.0, 50.0};
  Bounds diffusion_bounds{1e-12, 50.0};
  Bounds kernel_bounds{-50.0, 50.0};
  std::size_t walkers = 100;  // raised to 2 * dim + 2 when too small
  std::size_t steps = 100000;
  std::size_t n_burn = 450;
  std::size_t thin = 450;
  std::uint64_t seed = 0;
  std::optional<std::vector<double>> edges;  // fixed bin edges instead of bin_series

  void validate() const {
    if (n_bins < 2) throw ValidationError("gle.n_bins must be >= 2");
    if (!(step_h > 0.0)) throw ValidationError("gle.step_h must be > 0");
    if (!(diffusion_bounds.lo > 0.0)) throw ValidationError("gle diffusion lower bound must be > 0");
    if (!(drift_bounds.lo < drift_bounds.hi) || !(diffusion_bounds.lo < diffusion_bounds.hi) ||
        !(kernel_bounds.lo < kernel_bounds.hi))
      throw ValidationError("gle prior bounds must satisfy lo < hi");
    if (thin < 1) throw ValidationError("gle.thin must be >= 1");
    if (n_burn >= steps) throw ValidationError("gle.burn_in must be smaller than gle.steps");
  }
};

struct GleFit {
  GleFitSettings settings;
  Binning binning;
  PosteriorEnsemble ensemble;  // natural coordinates
  GleModel map_model;
  GleModel mean_model;
  GleModel start_model;  // weighted least-squares point the walkers start around
  std::vector<Summary> drift;
  std::vector<Summary> diffusion;
  std::vector<Summary> kernel;
};

namespace detail {

inline std::size_t gle_dim(std::size_t n_bins, std::size_t k_max) { return 2 * n_bins + k_max; }

inline double draw_in(Bounds b, double centre, double sd, Engine& rng) {
  std::normal_distribution<double> normal;
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double v = centre + sd * normal(rng);
    if (v > b.lo && v < b.hi) return v;
  }
  return std::clamp(centre, b.lo + 1e-12 * (b.hi - b.lo), b.hi - 1e-12 * (b.hi - b.lo));
}

}  // namespace detail

/// Samples the posterior (flat priors within the bounds, flat in D2) with the
/// ensemble sampler. Walkers start from draws of the Gaussian approximation
/// around the weighted least-squares estimate; empty bins start uniformly.
inline GleFit fit_gle(std::span<const double> x, const GleFitSettings& settings) {
  settings.validate();
  const std::size_t B = settings.n_bins;
  const std::size_t K = settings.k_max;
  if (x.size() <= K + 1) throw ValidationError("series too short for k_max");

  GleFit fit;
  fit.settings = settings;
  if (settings.edges) {
    if (settings.edges->size() != B + 1) throw ValidationError("fixed edges must have n_bins + 1 entries");
    fit.binning.edges = *settings.edges;
    fit.binning.mode = settings.bin_mode;
    fit.binning.assignment.resize(x.size());
    for (std::size_t t = 0; t < x.size(); ++t) fit.binning.assignment[t] = bin_index(fit.binning.edges, x[t]);
  } else {
    fit.binning = bin_series(x, B, settings.bin_mode);
  }
  const double h = settings.step_h;
  const GleSufficientStats stats(x, fit.binning.assignment, B, K, h);

  // Start point: alternate weighted least squares and per-bin variance.
  std::vector<double> d2(B, 1.0);
  GleSufficientStats::LinearSolution lin;
  double pooled_rss = 0.0, pooled_n = 0.0;
  for (int iter = 0; iter < 6; ++iter) {
    lin = stats.solve_linear(d2);
    pooled_rss = pooled_n = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      pooled_rss += stats.rss(b, lin.drift[b], lin.kernel);
      pooled_n += stats.count(b);
    }
    const double pooled = std::max(pooled_rss / (h * pooled_n), settings.diffusion_bounds.lo * 10.0);
    for (std::size_t b = 0; b < B; ++b) {
      const double n_b = stats.count(b);
      d2[b] = n_b >= 3.0 ? std::max(stats.rss(b, lin.drift[b], lin.kernel) / (h * n_b), 1e-6 * pooled) : pooled;
      d2[b] = std::clamp(d2[b], settings.diffusion_bounds.lo * 10.0, settings.diffusion_bounds.hi * 0.5);
    }
  }
  fit.start_model = GleModel{fit.binning.edges, lin.drift, d2, lin.kernel, h};

  // Target in sampler coordinates (D1, log D2, K).
  const std::size_t dim = detail::gle_dim(B, K);
  LogDensity target;
  target.dim = dim;
  for (std::size_t b = 0; b < B; ++b) target.bounds.push_back(settings.drift_bounds);
  for (std::size_t b = 0; b < B; ++b)
    target.bounds.push_back({std::log(settings.diffusion_bounds.lo), std::log(settings.diffusion_bounds.hi)});
  for (std::size_t k = 0; k < K; ++k) target.bounds.push_back(settings.kernel_bounds);
  target.evaluate = [&stats, B](std::span<const double> s) {
    thread_local std::vector<double> natural;
    natural.assign(s.begin(), s.end());
    double log_jacobian = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      natural[B + b] = std::exp(s[B + b]);
      log_jacobian += s[B + b];
    }
    return stats.log_likelihood(natural) + log_jacobian;
  };

  EnsembleSettings es;
  es.walkers = std::max(settings.walkers, 2 * dim + 2);
  es.walkers += es.walkers % 2;
  es.steps = settings.steps;
  es.n_burn = settings.n_burn;
  es.thin = settings.thin;
  es.seed = settings.seed;

  // Gaussian approximation: precision of (populated D1, K) from the linear
  // solve, n_b / 2 for log D2_b.
  const Eigen::Index n_lin = lin.precision.rows();
  Eigen::MatrixXd chol_inv_t;
  {
    Eigen::MatrixXd P = lin.precision;
    for (Eigen::Index i = 0; i < n_lin; ++i) P(i, i) *= 1.0 + 1e-10;
    Eigen::LLT<Eigen::MatrixXd> llt(P);
    if (llt.info() != Eigen::Success) throw RuntimeError("GLE start: precision matrix is not positive definite");
    // cov = P^{-1} = L^{-T} L^{-1}; draws are L^{-T} z.
    chol_inv_t = llt.matrixU().solve(Eigen::MatrixXd::Identity(n_lin, n_lin));
  }
  Engine init_rng = make_engine(settings.seed, 0xfeedull);
  std::normal_distribution<double> normal;
  std::vector<std::vector<double>> start(es.walkers, std::vector<double>(dim));
  const std::size_t nb_pop = lin.populated.size();
  for (auto& w : start) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      Eigen::VectorXd z(n_lin);
      for (Eigen::Index i = 0; i < n_lin; ++i) z(i) = normal(init_rng);
      const Eigen::VectorXd dev = chol_inv_t * z;
      for (std::size_t b = 0; b < B; ++b) {
        std::uniform_real_distribution<double> u(settings.drift_bounds.lo, settings.drift_bounds.hi);
        w[b] = u(init_rng);
      }
      for (std::size_t slot = 0; slot < nb_pop; ++slot)
        w[lin.populated[slot]] = lin.drift[lin.populated[slot]] + dev(static_cast<Eigen::Index>(slot));
      for (std::size_t k = 0; k < K; ++k) w[2 * B + k] = lin.kernel[k] + dev(static_cast<Eigen::Index>(nb_pop + k));
      for (std::size_t b = 0; b < B; ++b) {
        const auto lb = target.bounds[B + b];
        if (stats.count(b) > 0.0) {
          w[B + b] = detail::draw_in(lb, std::log(d2[b]), std::sqrt(2.0 / stats.count(b)), init_rng);
        } else {
          std::uniform_real_distribution<double> u(settings.diffusion_bounds.lo, settings.diffusion_bounds.hi);
          w[B + b] = std::log(u(init_rng));
        }
      }
      if (std::isfinite(target.log_prob(w))) break;
    }
  }

  PosteriorEnsemble ens = run_ensemble_mcmc(target, es, &start);
  // Back to natural coordinates.
  for (std::size_t i = 0; i < ens.sample_count(); ++i)
    for (std::size_t b = 0; b < B; ++b) ens.samples[i * dim + B + b] = std::exp(ens.samples[i * dim + B + b]);
  for (std::size_t b = 0; b < B; ++b) ens.bounds[B + b] = settings.diffusion_bounds;
  fit.ensemble = std::move(ens);

  fit.map_model = GleModel{fit.binning.edges, std::vector<double>(B), std::vector<double>(B), std::vector<double>(K), h};
  fit.mean_model = fit.map_model;
  for (std::size_t i = 0; i < dim; ++i) {
    const Summary s = summarize(fit.ensemble, i);
    if (i < B) {
      fit.drift.push_back(s);
      fit.map_model.drift[i] = s.map;
      fit.mean_model.drift[i] = s.mean;
    } else if (i < 2 * B) {
      fit.diffusion.push_back(s);
      fit.map_model.diffusion[i - B] = s.map;
      fit.mean_model.diffusion[i - B] = s.mean;
    } else {
      fit.kernel.push_back(s);
      fit.map_model.kernel[i - 2 * B] = s.map;
      fit.mean_model.kernel[i - 2 * B] = s.mean;
    }
  }
  return fit;
}

inline GleFit fit_gle(const CorrelationSeries& series, const GleFitSettings& settings) {
  return fit_gle(std::span<const double>(series.values), settings);
}

inline io::json to_json(const GleFit& fit) {
  auto summaries = [](const std::vector<Summary>& v) {
    io::json arr = io::json::array();
    for (const auto& s : v) arr.push_back(to_json(s));
    return arr;
  };
  const auto& s = fit.settings;
  return io::json{{"bin_edges", fit.binning.edges},
                  {"bin_mode", to_string(fit.binning.mode)},
                  {"n_bins", s.n_bins},
                  {"k_max", s.k_max},
                  {"step_h", s.step_h},
                  {"map", to_json(fit.map_model)},
                  {"mean", to_json(fit.mean_model)},
                  {"coefficients", {{"drift", summaries(fit.drift)},
                                    {"diffusion", summaries(fit.diffusion)},
                                    {"kernel", summaries(fit.kernel)}}},
                  {"mcmc", ensemble_header(fit.ensemble)}};
}

// ---------------------------------------------------------------------------
// Memory aggregation

struct MemoryAggregation {
  std::vector<std::size_t> k_values;
  std::vector<double> cumulative;
  std::optional<std::size_t> plateau_estimate;
};

/// Cumulative sum of kernel values; the plateau is the smallest k0 < k_max
/// such that |K_k - K_kmax| <= tol * (max K - min K) for every k >= k0.
inline MemoryAggregation memory_aggregation_from_kernel(std::span<const double> kernel_means, double tol = 0.1) {
  if (kernel_means.empty()) throw ValidationError("memory aggregation needs k_max >= 1");
  MemoryAggregation agg;
  double run = 0.0;
  for (std::size_t k = 0; k < kernel_means.size(); ++k) {
    run += kernel_means[k];
    agg.k_values.push_back(k + 1);
    agg.cumulative.push_back(run);
  }
  const auto [mn, mx] = std::minmax_element(agg.cumulative.begin(), agg.cumulative.end());
  const double limit = tol * (*mx - *mn);
  const double last = agg.cumulative.back();
  std::size_t k0 = agg.cumulative.size();
  for (std::size_t i = agg.cumulative.size(); i-- > 0;) {
    if (std::abs(agg.cumulative[i] - last) <= limit) k0 = i + 1;
    else break;
  }
  if (k0 < agg.cumulative.size()) agg.plateau_estimate = k0;
  return agg;
}

/// Uses the posterior means of the last k_max dimensions of the ensemble.
inline MemoryAggregation memory_aggregation(const PosteriorEnsemble& ens, std::size_t k_max, double tol = 0.1) {
  if (k_max < 1 || k_max > ens.dim) throw ValidationError("memory aggregation needs 1 <= k_max <= dim");
  if (ens.sample_count() == 0) throw ValidationError("ensemble has no retained samples");
  std::vector<double> means(k_max, 0.0);
  for (std::size_t i = 0; i < ens.sample_count(); ++i)
    for (std::size_t k = 0; k < k_max; ++k) means[k] += ens.samples[i * ens.dim + ens.dim - k_max + k];
  for (double& m : means) m /= static_cast<double>(ens.sample_count());
  return memory_aggregation_from_kernel(means, tol);
}

inline io::json to_json(const MemoryAggregation& m) {
  io::json j{{"k", m.k_values}, {"K_cumulative", m.cumulative}};
  j["plateau_estimate"] = m.plateau_estimate ? io::json(*m.plateau_estimate) : io::json(nullptr);
  return j;
}

}  // namespace mcorr
