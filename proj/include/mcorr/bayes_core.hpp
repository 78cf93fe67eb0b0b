#pragma once

// Log-posterior composition, affine-invariant ensemble sampling and
// marginal summaries.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mcorr/error.hpp"
#include "mcorr/io.hpp"
#include "mcorr/rng.hpp"

namespace mcorr {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct Bounds {
  double lo = kNegInf;
  double hi = std::numeric_limits<double>::infinity();

  bool contains(double v) const { return v >= lo && v <= hi; }
};

/// Unnormalised log density over a box. `log_prob` returns -inf outside the
/// box or when `evaluate` is not finite-or-(-inf).
struct LogDensity {
  std::size_t dim = 0;
  std::vector<Bounds> bounds;
  std::function<double(std::span<const double>)> evaluate;

  double log_prob(std::span<const double> theta) const {
    for (std::size_t i = 0; i < dim; ++i)
      if (!(theta[i] >= bounds[i].lo && theta[i] <= bounds[i].hi)) return kNegInf;
    const double v = evaluate(theta);
    return std::isnan(v) ? kNegInf : v;
  }

  void validate() const {
    if (dim == 0) throw ValidationError("log density needs dim >= 1");
    if (bounds.size() != dim) throw ValidationError("log density bounds size does not match dim");
    for (const auto& b : bounds)
      if (!(b.lo < b.hi)) throw ValidationError("log density bounds must satisfy lo < hi");
    if (!evaluate) throw ValidationError("log density has no evaluate function");
  }
};

struct EnsembleSettings {
  std::size_t walkers = 100;
  std::size_t steps = 1000;
  std::size_t n_burn = 0;
  std::size_t thin = 1;
  double stretch_a = 2.0;
  std::uint64_t seed = 0;
};

/// Retained (post burn-in, thinned) walker positions. Step s of a walker is
/// kept when s >= n_burn and (s - n_burn + 1) is a multiple of thin, so each
/// walker keeps floor((steps - n_burn) / thin) positions.
struct PosteriorEnsemble {
  std::size_t dim = 0;
  std::size_t walkers = 0;
  std::size_t steps = 0;
  std::size_t n_burn = 0;
  std::size_t thin = 1;
  double acceptance_rate = 0.0;
  double stretch_a = 2.0;
  std::uint64_t seed = 0;
  std::vector<Bounds> bounds;
  std::vector<double> samples;    // [walker][kept][dim]
  std::vector<double> log_probs;  // [walker][kept]

  std::size_t kept_per_walker() const { return steps > n_burn ? (steps - n_burn) / thin : 0; }
  std::size_t sample_count() const { return walkers * kept_per_walker(); }

  std::span<const double> sample(std::size_t i) const { return {samples.data() + i * dim, dim}; }

  std::vector<double> column(std::size_t param) const {
    std::vector<double> out(sample_count());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = samples[i * dim + param];
    return out;
  }
};

namespace detail {

inline void draw_uniform_start(const LogDensity& target, Engine& rng, std::vector<double>& pos) {
  for (std::size_t d = 0; d < target.dim; ++d) {
    const auto& b = target.bounds[d];
    if (!std::isfinite(b.lo) || !std::isfinite(b.hi))
      throw ValidationError("default initialisation needs finite bounds; supply initial positions");
    std::uniform_real_distribution<double> u(b.lo, b.hi);
    pos[d] = u(rng);
  }
}

}  // namespace detail

/// Affine-invariant ensemble sampler with stretch moves: the two halves of
/// the ensemble are updated alternately, each walker proposing
/// Y = X_j + z (X_k - X_j) with X_j from the other half and g(z) ∝ 1/sqrt(z)
/// on [1/a, a]. Every walker owns its RNG stream, so results do not depend
/// on evaluation order.
///
/// Without `initial`, start positions are drawn uniformly within the bounds,
/// redrawing (up to 1000 times per walker) until the density is finite.
inline PosteriorEnsemble run_ensemble_mcmc(const LogDensity& target, const EnsembleSettings& s,
                                           const std::vector<std::vector<double>>* initial = nullptr) {
  target.validate();
  const std::size_t dim = target.dim;
  const std::size_t W = s.walkers;
  if (W <= dim) throw ValidationError("ensemble needs more walkers than dimensions");
  if (W < 2 * dim) throw ValidationError("ensemble needs walkers >= 2 * dim");
  if (s.thin < 1) throw ValidationError("thin must be >= 1");
  if (!(s.stretch_a > 1.0)) throw ValidationError("stretch scale a must be > 1");
  if (s.n_burn > s.steps) throw ValidationError("burn-in exceeds the number of steps");

  std::vector<Engine> rngs;
  rngs.reserve(W);
  for (std::size_t w = 0; w < W; ++w) rngs.push_back(make_engine(s.seed, w));

  std::vector<double> pos(W * dim);
  std::vector<double> lp(W, kNegInf);
  std::vector<double> tmp(dim);
  bool any_valid = false;
  for (std::size_t w = 0; w < W; ++w) {
    std::span<double> p{pos.data() + w * dim, dim};
    if (initial) {
      if (initial->size() != W || (*initial)[w].size() != dim)
        throw ValidationError("initial positions must be walkers x dim");
      std::copy((*initial)[w].begin(), (*initial)[w].end(), p.begin());
      lp[w] = target.log_prob(p);
    } else {
      for (int attempt = 0; attempt < 1000 && !std::isfinite(lp[w]); ++attempt) {
        detail::draw_uniform_start(target, rngs[w], tmp);
        std::copy(tmp.begin(), tmp.end(), p.begin());
        lp[w] = target.log_prob(p);
      }
    }
    any_valid = any_valid || std::isfinite(lp[w]);
  }
  if (!any_valid) throw RuntimeError("all initial walker positions have zero posterior density");

  PosteriorEnsemble ens;
  ens.dim = dim;
  ens.walkers = W;
  ens.steps = s.steps;
  ens.n_burn = s.n_burn;
  ens.thin = s.thin;
  ens.stretch_a = s.stretch_a;
  ens.seed = s.seed;
  ens.bounds = target.bounds;
  const std::size_t kept = ens.kept_per_walker();
  ens.samples.assign(W * kept * dim, 0.0);
  ens.log_probs.assign(W * kept, kNegInf);

  const std::size_t half = W / 2;
  const double a = s.stretch_a;
  const double dm1 = static_cast<double>(dim) - 1.0;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::size_t accepted = 0;
  std::vector<double> proposal(dim);

  for (std::size_t step = 0; step < s.steps; ++step) {
    for (int part = 0; part < 2; ++part) {
      const std::size_t lo = part == 0 ? 0 : half;
      const std::size_t hi = part == 0 ? half : W;
      const std::size_t other_lo = part == 0 ? half : 0;
      const std::size_t other_n = part == 0 ? W - half : half;
      for (std::size_t k = lo; k < hi; ++k) {
        auto& rng = rngs[k];
        const double u = unif(rng);
        const double z = ((a - 1.0) * u + 1.0) * ((a - 1.0) * u + 1.0) / a;
        std::uniform_int_distribution<std::size_t> pick(0, other_n - 1);
        const std::size_t j = other_lo + pick(rng);
        const double* xk = pos.data() + k * dim;
        const double* xj = pos.data() + j * dim;
        for (std::size_t d = 0; d < dim; ++d) proposal[d] = xj[d] + z * (xk[d] - xj[d]);
        const double lp_new = target.log_prob(proposal);
        const double log_ratio = dm1 * std::log(z) + lp_new - lp[k];
        const double r = unif(rng);
        if (std::isfinite(lp_new) && (log_ratio >= 0.0 || std::log(r) < log_ratio)) {
          std::copy(proposal.begin(), proposal.end(), pos.begin() + static_cast<std::ptrdiff_t>(k * dim));
          lp[k] = lp_new;
          ++accepted;
        }
      }
    }
    if (step >= s.n_burn && (step - s.n_burn + 1) % s.thin == 0) {
      const std::size_t m = (step - s.n_burn + 1) / s.thin - 1;
      for (std::size_t w = 0; w < W; ++w) {
        std::copy(pos.begin() + static_cast<std::ptrdiff_t>(w * dim),
                  pos.begin() + static_cast<std::ptrdiff_t>((w + 1) * dim),
                  ens.samples.begin() + static_cast<std::ptrdiff_t>((w * kept + m) * dim));
        ens.log_probs[w * kept + m] = lp[w];
      }
    }
  }
  ens.acceptance_rate = s.steps ? static_cast<double>(accepted) / static_cast<double>(W * s.steps) : 0.0;
  return ens;
}

// ---------------------------------------------------------------------------
// Summaries

struct Summary {
  double mean = 0.0;
  double map = 0.0;
  double ci_lower = 0.0;
  double ci_upper = 0.0;
  std::size_t n = 0;
};

inline constexpr std::size_t kMapHistogramBins = 50;
inline constexpr std::size_t kMinSummarySamples = 100;

/// Linearly interpolated sample quantile (numpy's default definition).
inline double quantile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw ValidationError("quantile of empty sample");
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  if (i + 1 >= sorted.size()) return sorted.back();
  const double frac = pos - static_cast<double>(i);
  return sorted[i] + frac * (sorted[i + 1] - sorted[i]);
}

/// Centre of the fullest bin of a fixed-width histogram over [min, max].
/// Ties go to the lowest bin.
inline double histogram_mode(std::span<const double> sorted, std::size_t bins = kMapHistogramBins) {
  const double lo = sorted.front(), hi = sorted.back();
  if (!(hi > lo)) return lo;
  std::vector<std::size_t> counts(bins, 0);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (double v : sorted) {
    auto b = static_cast<std::size_t>((v - lo) / width);
    counts[std::min(b, bins - 1)]++;
  }
  const auto best = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  return lo + (static_cast<double>(best) + 0.5) * width;
}

inline Summary summarize_samples(std::vector<double> values) {
  if (values.size() < kMinSummarySamples)
    throw ValidationError("summary needs at least " + std::to_string(kMinSummarySamples) + " samples, got " +
                          std::to_string(values.size()));
  std::sort(values.begin(), values.end());
  Summary s;
  s.n = values.size();
  double total = 0.0;
  for (double v : values) total += v;
  s.mean = total / static_cast<double>(values.size());
  s.ci_lower = quantile_sorted(values, 0.025);
  s.ci_upper = quantile_sorted(values, 0.975);
  s.map = histogram_mode(values);
  // Keep the point estimates inside the interval for degenerate samples.
  if (values.front() == values.back()) s.mean = s.map = values.front();
  return s;
}

inline Summary summarize(const PosteriorEnsemble& ens, std::size_t param_index) {
  if (param_index >= ens.dim) throw ValidationError("parameter index out of range");
  return summarize_samples(ens.column(param_index));
}

inline io::json to_json(const Summary& s) {
  return io::json{{"mean", s.mean}, {"map", s.map}, {"ci95", {s.ci_lower, s.ci_upper}}, {"n", s.n}};
}

// ---------------------------------------------------------------------------
// Prior components (log densities).

namespace priors {

enum class Kind { flat_line_invariant, jeffreys_scale, gaussian, ou_invariant };

/// Invariant prior of a straight line for (intercept, slope):
/// 1 / (2π (1 + slope²)^{3/2}).
inline double flat_line_invariant(double /*intercept*/, double slope) {
  return -std::log(2.0 * std::numbers::pi) - 1.5 * std::log1p(slope * slope);
}

inline double jeffreys_scale(double scale) {
  if (!(scale > 0.0)) throw ValidationError("Jeffreys prior needs a positive argument");
  return -std::log(scale);
}

inline double gaussian(double v, double mu, double sigma) {
  if (!(sigma > 0.0)) throw ValidationError("Gaussian prior needs sigma > 0");
  const double z = (v - mu) / sigma;
  return -0.5 * z * z - std::log(sigma * std::sqrt(2.0 * std::numbers::pi));
}

/// Line-invariant prior on the OU drift slope -1/θ5 (as squared in the
/// published density) times a scale prior: θ5 / (2π (1 + 1/θ5²)^{3/2}).
inline double ou_invariant(double theta5) {
  if (!(theta5 > 0.0)) throw ValidationError("OU prior needs theta5 > 0");
  return std::log(theta5) - std::log(2.0 * std::numbers::pi) - 1.5 * std::log1p(1.0 / (theta5 * theta5));
}

/// Log-density component selected by kind; `params` are the Gaussian (mu,
/// sigma) and ignored otherwise. Argument layout: flat_line_invariant reads
/// (intercept, slope); the others read one value.
inline std::function<double(std::span<const double>)> make(Kind kind, std::vector<double> params = {}) {
  switch (kind) {
    case Kind::flat_line_invariant:
      return [](std::span<const double> v) { return flat_line_invariant(v[0], v[1]); };
    case Kind::jeffreys_scale:
      return [](std::span<const double> v) { return jeffreys_scale(v[0]); };
    case Kind::gaussian: {
      if (params.size() != 2) throw ValidationError("Gaussian prior needs (mu, sigma)");
      const double mu = params[0], sigma = params[1];
      if (!(sigma > 0.0)) throw ValidationError("Gaussian prior needs sigma > 0");
      return [mu, sigma](std::span<const double> v) { return gaussian(v[0], mu, sigma); };
    }
    case Kind::ou_invariant:
      return [](std::span<const double> v) { return ou_invariant(v[0]); };
  }
  throw ValidationError("unknown prior kind");
}

}  // namespace priors

// ---------------------------------------------------------------------------
// Persistence: `<stem>.bin` holds float64 samples [walker][kept][dim] in host
// byte order, `<stem>.json` the header.

inline io::json ensemble_header(const PosteriorEnsemble& ens) {
  io::json bounds = io::json::array();
  for (const auto& b : ens.bounds) bounds.push_back({b.lo, b.hi});
  return io::json{{"dim", ens.dim},
                  {"walkers", ens.walkers},
                  {"steps", ens.steps},
                  {"n_burn", ens.n_burn},
                  {"thin", ens.thin},
                  {"kept_per_walker", ens.kept_per_walker()},
                  {"acceptance_rate", ens.acceptance_rate},
                  {"stretch_a", ens.stretch_a},
                  {"seed", ens.seed},
                  {"bounds", bounds},
                  {"layout", "float64 [walker][kept_step][dim], host byte order"},
                  {"rng", kRngAlgorithm},
                  {"map_histogram_bins", kMapHistogramBins}};
}

inline void save_ensemble(const std::filesystem::path& stem, const PosteriorEnsemble& ens) {
  io::write_json(stem.string() + ".json", ensemble_header(ens));
  std::ofstream out(stem.string() + ".bin", std::ios::binary);
  if (!out) throw RuntimeError("cannot write " + stem.string() + ".bin");
  out.write(reinterpret_cast<const char*>(ens.samples.data()),
            static_cast<std::streamsize>(ens.samples.size() * sizeof(double)));
}

inline PosteriorEnsemble load_ensemble(const std::filesystem::path& stem) {
  const auto h = io::read_json(stem.string() + ".json");
  PosteriorEnsemble ens;
  ens.dim = h.at("dim").get<std::size_t>();
  ens.walkers = h.at("walkers").get<std::size_t>();
  ens.steps = h.at("steps").get<std::size_t>();
  ens.n_burn = h.at("n_burn").get<std::size_t>();
  ens.thin = h.at("thin").get<std::size_t>();
  ens.acceptance_rate = h.at("acceptance_rate").get<double>();
  ens.stretch_a = h.value("stretch_a", 2.0);
  ens.seed = h.at("seed").get<std::uint64_t>();
  for (const auto& b : h.at("bounds")) {
    auto num = [](const io::json& v, double fallback) { return v.is_number() ? v.get<double>() : fallback; };
    ens.bounds.push_back({num(b[0], kNegInf), num(b[1], std::numeric_limits<double>::infinity())});
  }
  ens.samples.resize(ens.sample_count() * ens.dim);
  std::ifstream in(stem.string() + ".bin", std::ios::binary);
  if (!in) throw RuntimeError("cannot open " + stem.string() + ".bin");
  in.read(reinterpret_cast<char*>(ens.samples.data()), static_cast<std::streamsize>(ens.samples.size() * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(ens.samples.size() * sizeof(double)))
    throw RuntimeError("chain file is shorter than its header declares");
  return ens;
}

}  // namespace mcorr
