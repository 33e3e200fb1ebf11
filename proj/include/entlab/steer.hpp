#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "entlab/records.hpp"

namespace entlab {

enum class SteerMapping { Exponential, Linear, Binary };

inline const char* to_string(SteerMapping m) {
  switch (m) {
    case SteerMapping::Exponential: return "exponential";
    case SteerMapping::Linear: return "linear";
    case SteerMapping::Binary: return "binary";
  }
  return "?";
}

inline SteerMapping steer_mapping_from_string(const std::string& s) {
  if (s == "exponential") return SteerMapping::Exponential;
  if (s == "linear") return SteerMapping::Linear;
  if (s == "binary") return SteerMapping::Binary;
  throw std::invalid_argument("unknown steer mapping '" + s + "'");
}

struct SteerConfig {
  SteerMapping mapping = SteerMapping::Exponential;
  double lambda_min = 0.7;
  double lambda_max = 1.2;  // Linear only
  double xi = 0.8;          // Binary quantile

  void validate() const {
    if (!(lambda_min > 0.0 && lambda_min <= 1.0))
      throw std::invalid_argument("steer: lambda_min must lie in (0, 1]");
    if (!(lambda_max > lambda_min)) throw std::invalid_argument("steer: lambda_max must exceed lambda_min");
    if (!(xi > 0.0 && xi < 1.0)) throw std::invalid_argument("steer: xi must lie in (0, 1)");
  }
};

/// Number of tokens above the nearest-rank xi-quantile of n values.
inline std::size_t upper_tail_count(std::size_t n, double xi) {
  // The epsilon keeps xi*n products such as 0.8*10 on the intended integer.
  const auto below = static_cast<std::size_t>(std::ceil(xi * static_cast<double>(n) - 1e-9));
  return n - std::min(below, n);
}

/// Per-token multipliers for one mini-batch of first-order entropy changes.
inline std::vector<double> steer_weights(std::span<const double> omegas, const SteerConfig& cfg) {
  cfg.validate();
  if (omegas.empty()) throw std::invalid_argument("steer_weights: empty batch");
  for (double w : omegas)
    if (!std::isfinite(w)) throw std::invalid_argument("steer_weights: non-finite omega");
  const std::size_t n = omegas.size();
  std::vector<double> lambda(n, 1.0);

  switch (cfg.mapping) {
    case SteerMapping::Exponential: {
      double mx = 0.0;
      for (double w : omegas) mx = std::max(mx, std::abs(w));
      if (mx < 1e-15 || cfg.lambda_min == 1.0) break;
      const double k = -std::log(cfg.lambda_min) / mx;
      for (std::size_t i = 0; i < n; ++i) {
        const double a = std::abs(omegas[i]);
        // The batch maximum maps to lambda_min exactly.
        lambda[i] = a == mx ? cfg.lambda_min : std::exp(-k * a);
      }
      break;
    }
    case SteerMapping::Linear: {
      const auto [lo, hi] = std::minmax_element(omegas.begin(), omegas.end());
      if (*hi == *lo) break;
      const double slope = (cfg.lambda_max - cfg.lambda_min) / (*hi - *lo);
      for (std::size_t i = 0; i < n; ++i) lambda[i] = cfg.lambda_max - slope * (omegas[i] - *lo);
      break;
    }
    case SteerMapping::Binary: {
      // Nearest-rank quantile on the signed ordering; ties keep input order,
      // so the later of two equal values ranks higher.
      std::vector<std::size_t> idx(n);
      std::iota(idx.begin(), idx.end(), 0);
      std::stable_sort(idx.begin(), idx.end(),
                       [&](std::size_t a, std::size_t b) { return omegas[a] < omegas[b]; });
      const std::size_t top = upper_tail_count(n, cfg.xi);
      for (std::size_t r = n - top; r < n; ++r) lambda[idx[r]] = cfg.lambda_min;
      break;
    }
  }
  return lambda;
}

/// Multiplies every record's final weight by its STEER multiplier.
inline void apply_steer(std::span<TokenRecord> records, const SteerConfig& cfg) {
  if (records.empty()) return;
  std::vector<double> omegas;
  omegas.reserve(records.size());
  for (const auto& r : records) {
    if (!r.omega) throw std::invalid_argument("apply_steer: record without omega");
    omegas.push_back(*r.omega);
  }
  const auto lambda = steer_weights(omegas, cfg);
  for (std::size_t i = 0; i < records.size(); ++i) {
    records[i].lambda = lambda[i];
    records[i].final_weight *= lambda[i];
  }
}

}  // namespace entlab
