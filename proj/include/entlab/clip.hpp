#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "entlab/records.hpp"

namespace entlab {

/// Decoupled ratio-clipping thresholds.
struct ClipConfig {
  double eps_high = 0.2;
  double eps_low = 0.2;

  void validate() const {
    if (!(eps_high >= 0.0)) throw std::invalid_argument("clip: eps_high must be nonnegative");
    if (!(eps_low >= 0.0 && eps_low < 1.0)) throw std::invalid_argument("clip: eps_low must lie in [0, 1)");
  }
};

/// 0 when the ratio has left the trust region in the direction of the
/// advantage, 1 otherwise.
inline int clip_indicator(double ratio, double advantage, const ClipConfig& cfg) {
  if (!(ratio > 0.0)) throw std::invalid_argument("clip_indicator: ratio must be positive");
  if (advantage > 0.0 && ratio > 1.0 + cfg.eps_high) return 0;
  if (advantage < 0.0 && ratio < 1.0 - cfg.eps_low) return 0;
  return 1;
}

inline const std::vector<double>& default_clip_bins() {
  static const std::vector<double> edges{0.0, 0.2, 0.8, 1.0};
  return edges;
}

/// Counts of clipped records binned by p_old over (e0,e1], (e1,e2], ...
inline std::vector<std::size_t> clip_histogram(std::span<const TokenRecord> records,
                                               std::span<const double> edges) {
  if (edges.size() < 2) throw std::invalid_argument("clip_histogram: need at least two edges");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i] > edges[i - 1])) throw std::invalid_argument("clip_histogram: edges must increase");
  if (edges.front() > 0.0 || edges.back() < 1.0)
    throw std::invalid_argument("clip_histogram: edges must cover (0, 1]");
  std::vector<std::size_t> counts(edges.size() - 1, 0);
  for (const auto& r : records) {
    if (r.clip_flag != 0) continue;
    for (std::size_t b = 0; b + 1 < edges.size(); ++b)
      if (r.p_old > edges[b] && r.p_old <= edges[b + 1]) {
        ++counts[b];
        break;
      }
  }
  return counts;
}

}  // namespace entlab
