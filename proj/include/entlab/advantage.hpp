#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace entlab {

/// Group-relative advantages (R - mean) / std with the population standard
/// deviation. A group whose rewards are all equal (std < 1e-12) gets exactly
/// zero advantages.
inline std::vector<double> group_advantages(std::span<const double> rewards) {
  const std::size_t G = rewards.size();
  if (G < 2) throw std::invalid_argument("group_advantages: need at least two rewards");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(G);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / static_cast<double>(G));
  std::vector<double> a(G, 0.0);
  if (sd < 1e-12) return a;
  for (std::size_t i = 0; i < G; ++i) a[i] = (rewards[i] - mean) / sd;
  return a;
}

}  // namespace entlab
