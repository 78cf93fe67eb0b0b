#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mcorr/error.hpp"
#include "mcorr/io.hpp"

namespace mcorr {

/// Bin index of `x` for ascending `edges`; values outside the range map to the
/// nearest edge bin and the maximum belongs to the last bin.
inline std::size_t bin_index(std::span<const double> edges, double x) {
  const std::size_t n_bins = edges.size() - 1;
  const auto it = std::upper_bound(edges.begin(), edges.end(), x);
  const auto pos = static_cast<std::ptrdiff_t>(it - edges.begin()) - 1;
  if (pos < 0) return 0;
  return std::min(static_cast<std::size_t>(pos), n_bins - 1);
}

/// Binned-coefficient generalised Langevin model:
///   x_{t+1} = x_t + h (D1[bin(x_t)] + sum_k K_k x_{t-k}) + sqrt(h D2[bin(x_t)]) xi_t
/// kernel[0] is K_1. An empty kernel is the memoryless Langevin model.
struct GleModel {
  std::vector<double> bin_edges;
  std::vector<double> drift;
  std::vector<double> diffusion;
  std::vector<double> kernel;
  double step_h = 1.0;

  std::size_t n_bins() const { return drift.size(); }
  std::size_t k_max() const { return kernel.size(); }

  double drift_at(double x) const { return drift[bin_index(bin_edges, x)]; }
  double diffusion_at(double x) const { return diffusion[bin_index(bin_edges, x)]; }

  // Shape checks; strict additionally requires every diffusion value > 0.
  void validate(bool strict = true) const {
    if (bin_edges.size() < 2) throw ValidationError("GLE model needs at least one bin");
    if (drift.size() + 1 != bin_edges.size() || diffusion.size() != drift.size())
      throw ValidationError("GLE model: drift/diffusion sizes do not match bin edges");
    for (std::size_t i = 1; i < bin_edges.size(); ++i)
      if (!(bin_edges[i] > bin_edges[i - 1])) throw ValidationError("GLE model: bin edges must be strictly increasing");
    for (double d : diffusion) {
      if (strict ? !(d > 0.0) : !(d >= 0.0)) throw ValidationError("GLE model: diffusion must be positive");
    }
    if (!(step_h > 0.0)) throw ValidationError("GLE model: step_h must be positive");
  }
};

inline io::json to_json(const GleModel& m) {
  return io::json{{"bin_edges", m.bin_edges}, {"drift", m.drift},     {"diffusion", m.diffusion},
                  {"kernel", m.kernel},       {"step_h", m.step_h}, {"k_max", m.k_max()}};
}

inline GleModel gle_model_from_json(const io::json& j) {
  GleModel m;
  try {
    m.bin_edges = j.at("bin_edges").get<std::vector<double>>();
    m.drift = j.at("drift").get<std::vector<double>>();
    m.diffusion = j.at("diffusion").get<std::vector<double>>();
    m.kernel = j.value("kernel", std::vector<double>{});
    m.step_h = j.value("step_h", 1.0);
  } catch (const io::json::exception& e) {
    throw ValidationError(std::string("malformed GLE model JSON: ") + e.what());
  }
  m.validate(false);
  return m;
}

}  // namespace mcorr
