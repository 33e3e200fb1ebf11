#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "entlab/policy.hpp"
#include "entlab/records.hpp"

namespace entlab {

namespace detail {
// ln p + H, snapped to 0 when the sum is at rounding level. At the uniform
// distribution the two terms cancel only up to the error of the entropy sum.
inline double log_gap(double p, double H) {
  const double lp = std::log(p);
  const double g = lp + H;
  const double scale = std::max({std::abs(lp), H, 1.0});
  return std::abs(g) <= 64.0 * std::numeric_limits<double>::epsilon() * scale ? 0.0 : g;
}
}  // namespace detail

/// Token-level entropy-change indicator: -p (1-p)^2 (ln p + H).
///
/// Positive when p < exp(-H) (rewarding the token raises entropy), negative
/// when p > exp(-H), zero at p = 1 and at the uniform distribution.
inline double delta_indicator(double p, double H) {
  if (!(p > 0.0) || p > 1.0) throw std::invalid_argument("delta_indicator: p must lie in (0, 1]");
  if (!(H >= 0.0) || !std::isfinite(H))
    throw std::invalid_argument("delta_indicator: H must be finite and nonnegative");
  const double q = 1.0 - p;
  return -p * q * q * detail::log_gap(p, H);
}

/// First-order entropy change of one realized token:
/// -eta_eff * w * (1-p)^2 * (ln p + H).
inline double omega_hat(double weight, double p, double H, double effective_eta) {
  if (!std::isfinite(weight) || !std::isfinite(p) || !std::isfinite(H) ||
      !std::isfinite(effective_eta))
    throw std::invalid_argument("omega_hat: non-finite input");
  if (!(p > 0.0) || p > 1.0) throw std::invalid_argument("omega_hat: p must lie in (0, 1]");
  if (weight == 0.0) return 0.0;
  const double q = 1.0 - p;
  return -effective_eta * weight * q * q * detail::log_gap(p, H);
}

/// Record form. Uses the weight that enters the update before STEER is
/// applied; this is `base_weight` whenever no weight plugin is configured.
inline double omega_hat(const TokenRecord& r, double effective_eta) {
  return omega_hat(r.final_weight, r.p_cur, r.entropy, effective_eta);
}

/// Vocabulary-expectation form, exact for tabular V: weights[a] is the
/// per-action gradient weight.
inline double omega_expected(std::span<const double> p, std::span<const double> weights,
                             double effective_eta) {
  if (p.size() != weights.size()) throw std::invalid_argument("omega_expected: size mismatch");
  const double H = entropy_of(p);
  double sum = 0.0;
  for (std::size_t a = 0; a < p.size(); ++a) {
    if (p[a] <= 0.0) continue;
    const double q = 1.0 - p[a];
    sum += p[a] * weights[a] * q * q * (std::log(p[a]) + H);
  }
  return -effective_eta * sum;
}

/// H(after, s) - H(before, s) for each listed state.
inline std::vector<double> exact_entropy_change(const PolicyTable& before, const PolicyTable& after,
                                                std::span<const StateId> states) {
  if (before.vocab() != after.vocab() || before.context_model() != after.context_model() ||
      (before.context_model() == ContextModel::Positional && before.states() != after.states()))
    throw std::invalid_argument("exact_entropy_change: policy shapes differ");
  std::vector<double> out;
  out.reserve(states.size());
  for (StateId s : states) out.push_back(state_entropy(after, s) - state_entropy(before, s));
  return out;
}

/// Gradient of state entropy with respect to the logits:
/// dH/dz_a = -pi(a) (ln pi(a) + H).
inline std::vector<double> entropy_gradient(std::span<const double> p) {
  const double H = entropy_of(p);
  std::vector<double> g(p.size(), 0.0);
  for (std::size_t a = 0; a < p.size(); ++a)
    if (p[a] > 0.0) g[a] = -p[a] * (std::log(p[a]) + H);
  return g;
}

/// Exact first-order term <grad_z H, dz> for each state's displacement.
inline std::vector<double> first_order_taylor(const PolicyTable& before,
                                              std::span<const std::vector<double>> logit_delta,
                                              std::span<const StateId> states) {
  if (logit_delta.size() != states.size())
    throw std::invalid_argument("first_order_taylor: one displacement per state required");
  std::vector<double> out;
  out.reserve(states.size());
  for (std::size_t i = 0; i < states.size(); ++i) {
    const auto g = entropy_gradient(probs(before, states[i]));
    if (logit_delta[i].size() != g.size())
      throw std::invalid_argument("first_order_taylor: displacement length != V");
    double dot = 0.0;
    for (std::size_t a = 0; a < g.size(); ++a) {
      if (!std::isfinite(logit_delta[i][a]))
        throw std::invalid_argument("first_order_taylor: non-finite displacement");
      dot += g[a] * logit_delta[i][a];
    }
    out.push_back(dot);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Four-quadrant model.

enum class Quadrant { I = 1, II = 2, III = 3, IV = 4, None = 0 };

inline const char* to_string(Quadrant q) {
  switch (q) {
    case Quadrant::I: return "I";
    case Quadrant::II: return "II";
    case Quadrant::III: return "III";
    case Quadrant::IV: return "IV";
    case Quadrant::None: break;
  }
  return "None";
}

inline Quadrant classify_quadrant(double advantage, double delta) {
  if (advantage == 0.0 || delta == 0.0) return Quadrant::None;
  if (advantage > 0.0) return delta < 0.0 ? Quadrant::I : Quadrant::II;
  return delta > 0.0 ? Quadrant::III : Quadrant::IV;
}

// ---------------------------------------------------------------------------
// Estimator fidelity.

struct FidelityReport {
  double mse = 0.0;
  std::optional<double> pcc;
  std::optional<double> srcc;
  std::size_t n = 0;
};

/// Ranks with ties assigned their average rank (1-based).
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> rank(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

/// Pearson correlation; nullopt when either series has zero variance.
inline std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline std::optional<double> spearman(std::span<const double> x, std::span<const double> y) {
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

inline FidelityReport fidelity(std::span<const double> omega_hats,
                               std::span<const double> delta_h_trues) {
  if (omega_hats.size() != delta_h_trues.size())
    throw std::invalid_argument("fidelity: series lengths differ");
  if (omega_hats.size() < 2) throw std::invalid_argument("fidelity: need at least two samples");
  FidelityReport r;
  r.n = omega_hats.size();
  for (std::size_t i = 0; i < r.n; ++i) {
    const double d = omega_hats[i] - delta_h_trues[i];
    r.mse += d * d;
  }
  r.mse /= static_cast<double>(r.n);
  r.pcc = pearson(omega_hats, delta_h_trues);
  r.srcc = spearman(omega_hats, delta_h_trues);
  return r;
}

}  // namespace entlab
