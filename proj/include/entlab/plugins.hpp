#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "entlab/advantage.hpp"
#include "entlab/clip.hpp"
#include "entlab/entropy.hpp"
#include "entlab/errors.hpp"
#include "entlab/policy.hpp"
#include "entlab/records.hpp"
#include "entlab/rng.hpp"
#include "entlab/steer.hpp"

namespace entlab {

// Token-level gradient reweighting interventions. Each plugin acts on one
// stage of the per-token weight w = I_clip * r * A (+ regularizer terms):
// advantage shapers rewrite A, clip plugins rewrite I_clip, and weight
// plugins rewrite the final weight.

struct ClipDecoupled {
  double eps_high = 0.28;
  double eps_low = 0.2;
};
struct EntropyReg {
  double beta = 0.0;
};
// Reference distribution is the initial policy snapshot.
struct KLPenalty {
  double beta = 0.0;
};
struct WReinforce {
  double lambda = 1.0;
};
struct PSRMask {};
struct NSRMask {};
struct EntropyAdvantage {
  double alpha = 0.0;
  double kappa = 2.0;
};
struct GTPO {
  double alpha = 0.0;
};
struct EdgeGRPO {};
struct PPLBased {
  double alpha = 0.0;
};
struct PositionBased {
  double gamma = 0.0;
};
struct ForkingTokens {
  double rho = 0.2;
};
struct Unlikeliness {
  double beta_rank = 0.0;
};

enum class InterventionMode { Mask, Upweight2x };

struct QuadrantIntervention {
  Quadrant quadrant = Quadrant::I;
  double fraction = 0.1;
  InterventionMode mode = InterventionMode::Mask;
  double p_hi = 0.8;
  double p_lo = 0.2;
};

using ReweightPlugin =
    std::variant<ClipDecoupled, EntropyReg, KLPenalty, WReinforce, PSRMask, NSRMask,
                 EntropyAdvantage, GTPO, EdgeGRPO, PPLBased, PositionBased, ForkingTokens,
                 Unlikeliness, QuadrantIntervention>;

enum class PluginStage { AdvantageShaping, Clip, Weight };

inline PluginStage stage_of(const ReweightPlugin& p) {
  return std::visit(
      [](const auto& x) {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, ClipDecoupled> || std::is_same_v<T, ForkingTokens>)
          return PluginStage::Clip;
        else if constexpr (std::is_same_v<T, EntropyReg> || std::is_same_v<T, KLPenalty> ||
                           std::is_same_v<T, PSRMask> || std::is_same_v<T, NSRMask> ||
                           std::is_same_v<T, QuadrantIntervention>)
          return PluginStage::Weight;
        else
          return PluginStage::AdvantageShaping;
      },
      p);
}

inline std::string kind_of(const ReweightPlugin& p) {
  static const char* names[] = {"clip_decoupled",    "entropy_reg", "kl_penalty",
                                "w_reinforce",       "psr_mask",    "nsr_mask",
                                "entropy_advantage", "gtpo",        "edge_grpo",
                                "ppl_based",         "position_based", "forking_tokens",
                                "unlikeliness",      "quadrant_intervention"};
  return names[p.index()];
}

/// Inputs some plugins need beyond the records themselves.
struct PluginContext {
  Rng* rng = nullptr;                     // QuadrantIntervention
  const PolicyTable* current = nullptr;   // KLPenalty
  const PolicyTable* reference = nullptr; // KLPenalty
};

namespace detail {

inline double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Record indices per group, and per (group, response), in input order.
inline std::map<std::size_t, std::map<std::size_t, std::vector<std::size_t>>> by_response(
    std::span<const TokenRecord> records) {
  std::map<std::size_t, std::map<std::size_t, std::vector<std::size_t>>> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    out[records[i].group_idx][records[i].response_idx].push_back(i);
  return out;
}

inline double response_reward(std::span<const TokenRecord> recs, const std::vector<std::size_t>& ix) {
  return recs[ix.front()].reward;
}

// Nearest-rank q-quantile of a sample (1-based rank ceil(q n)).
inline double nearest_rank_quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  auto r = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size()) - 1e-9));
  r = std::clamp<std::size_t>(r, 1, v.size());
  return v[r - 1];
}

inline double reference_prob(const PluginContext& ctx, const TokenRecord& r) {
  if (!ctx.reference) throw std::invalid_argument("kl_penalty: no reference policy");
  const auto& ref = *ctx.reference;
  if (ctx.current && ref.context_model() == ContextModel::Prefix) {
    const auto key = ctx.current->indexer().key(r.state_id);
    if (auto s = ref.find(key.prompt, key.prefix)) return probs(ref, *s)[r.action_id];
    std::vector<double> z(ref.vocab(), 0.0), p(ref.vocab());
    if (ref.row_init()) ref.row_init()(key, z);
    softmax_into(z, p);
    return p[r.action_id];
  }
  return probs(ref, r.state_id)[r.action_id];
}

inline Quadrant intervention_quadrant(const TokenRecord& r, const QuadrantIntervention& q) {
  if (r.advantage > 0.0 && r.p_old > q.p_hi) return Quadrant::I;
  if (r.advantage > 0.0 && r.p_old < q.p_lo) return Quadrant::II;
  if (r.advantage < 0.0 && r.p_old < q.p_lo) return Quadrant::III;
  if (r.advantage < 0.0 && r.p_old > q.p_hi) return Quadrant::IV;
  return Quadrant::None;
}

}  // namespace detail

/// Applies one plugin's transformation to a mini-batch in place. Every plugin
/// is an exact no-op at its neutral parameter.
inline void apply_plugin(const ReweightPlugin& plugin, std::span<TokenRecord> records,
                         const PluginContext& ctx) {
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, ClipDecoupled>) {
          const ClipConfig cfg{p.eps_high, p.eps_low};
          for (auto& r : records) r.clip_flag = clip_indicator(r.ratio, r.advantage, cfg);
        } else if constexpr (std::is_same_v<T, EntropyReg>) {
          if (p.beta == 0.0) return;
          for (auto& r : records) r.final_weight += p.beta * -std::log(r.p_cur);
        } else if constexpr (std::is_same_v<T, KLPenalty>) {
          if (p.beta == 0.0) return;
          for (auto& r : records) r.final_weight += p.beta * detail::reference_prob(ctx, r) / r.p_cur;
        } else if constexpr (std::is_same_v<T, WReinforce>) {
          if (p.lambda == 1.0) return;
          for (auto& r : records)
            if (r.advantage > 0.0) r.advantage *= p.lambda;
        } else if constexpr (std::is_same_v<T, PSRMask>) {
          for (auto& r : records)
            if (r.advantage < 0.0) r.final_weight = 0.0;
        } else if constexpr (std::is_same_v<T, NSRMask>) {
          for (auto& r : records)
            if (r.advantage > 0.0) r.final_weight = 0.0;
        } else if constexpr (std::is_same_v<T, EntropyAdvantage>) {
          if (p.alpha == 0.0) return;
          for (auto& r : records)
            r.advantage += std::min(p.alpha * r.entropy, std::abs(r.advantage) / p.kappa);
        } else if constexpr (std::is_same_v<T, GTPO>) {
          if (p.alpha == 0.0) return;
          for (const auto& [g, resp] : detail::by_response(records)) {
            // Tokens at position t across the group; d_t counts responses
            // long enough to reach t.
            std::map<std::size_t, std::vector<std::size_t>> at;
            for (const auto& [i, ix] : resp)
              for (std::size_t k : ix) at[records[k].position].push_back(k);
            for (const auto& [t, ix] : at) {
              double mean_h = 0.0;
              for (std::size_t k : ix) mean_h += records[k].entropy;
              mean_h /= static_cast<double>(ix.size());
              std::vector<double> shaped;
              for (std::size_t k : ix) {
                const auto& r = records[k];
                double R = r.reward;
                if (R > 0.0 && mean_h > 0.0) R += p.alpha * r.entropy / mean_h;
                shaped.push_back(R);
              }
              if (ix.size() < 2) continue;
              const auto adv = group_advantages(shaped);
              for (std::size_t j = 0; j < ix.size(); ++j) records[ix[j]].advantage = adv[j];
            }
          }
        } else if constexpr (std::is_same_v<T, EdgeGRPO>) {
          for (const auto& [g, resp] : detail::by_response(records)) {
            std::vector<double> mean_h;
            for (const auto& [i, ix] : resp) {
              double h = 0.0;
              for (std::size_t k : ix) h += records[k].entropy;
              mean_h.push_back(h / static_cast<double>(ix.size()));
            }
            const double group_mean =
                std::accumulate(mean_h.begin(), mean_h.end(), 0.0) / static_cast<double>(mean_h.size());
            if (!(group_mean > 0.0)) continue;
            std::size_t j = 0;
            for (const auto& [i, ix] : resp) {
              const double norm = std::max(mean_h[j++] / group_mean, 1e-6);
              for (std::size_t k : ix) records[k].advantage /= norm;
            }
          }
        } else if constexpr (std::is_same_v<T, PPLBased>) {
          if (p.alpha == 0.0) return;
          for (const auto& [g, resp] : detail::by_response(records))
            for (const auto& [i, ix] : resp) {
              double lp = 0.0;
              for (std::size_t k : ix) lp += std::log(records[k].p_old);
              const double log_ppl = -lp / static_cast<double>(ix.size());
              for (std::size_t k : ix) records[k].advantage *= 1.0 - p.alpha * log_ppl;
            }
        } else if constexpr (std::is_same_v<T, PositionBased>) {
          if (p.gamma == 0.0) return;
          for (auto& r : records) {
            const double rel = static_cast<double>(r.position + 1) / static_cast<double>(r.length);
            r.advantage += p.gamma * detail::sign(r.advantage) * detail::logistic(rel);
          }
        } else if constexpr (std::is_same_v<T, ForkingTokens>) {
          if (records.empty()) return;
          std::vector<double> h;
          h.reserve(records.size());
          for (const auto& r : records) h.push_back(r.entropy);
          const double tau = detail::nearest_rank_quantile(std::move(h), 1.0 - p.rho);
          for (auto& r : records)
            if (!(r.entropy > tau)) r.clip_flag = 0;
        } else if constexpr (std::is_same_v<T, Unlikeliness>) {
          if (p.beta_rank == 0.0) return;
          for (const auto& [g, resp] : detail::by_response(records)) {
            std::vector<const std::vector<std::size_t>*> rows;
            std::vector<double> loglik;
            for (const auto& [i, ix] : resp) {
              double lp = 0.0;
              for (std::size_t k : ix) lp += std::log(records[k].p_old);
              rows.push_back(&ix);
              loglik.push_back(lp / static_cast<double>(ix.size()));
            }
            const std::size_t G = rows.size();
            if (G < 2) continue;
            // rank 1 = most likely, so the least likely response keeps its
            // full reward.
            std::vector<std::size_t> order(G);
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(),
                             [&](std::size_t a, std::size_t b) { return loglik[a] > loglik[b]; });
            std::vector<double> shaped(G);
            for (std::size_t r = 0; r < G; ++r) {
              const std::size_t i = order[r];
              const double rank = static_cast<double>(r + 1);
              const double R = detail::response_reward(records, *rows[i]);
              shaped[i] = R * (1.0 - p.beta_rank * (static_cast<double>(G) - rank) / static_cast<double>(G));
            }
            const auto adv = group_advantages(shaped);
            for (std::size_t i = 0; i < G; ++i)
              for (std::size_t k : *rows[i]) records[k].advantage = adv[i];
          }
        } else if constexpr (std::is_same_v<T, QuadrantIntervention>) {
          if (p.fraction == 0.0) return;
          std::vector<std::size_t> target;
          for (std::size_t i = 0; i < records.size(); ++i)
            if (detail::intervention_quadrant(records[i], p) == p.quadrant) target.push_back(i);
          const auto count = static_cast<std::size_t>(
              std::floor(p.fraction * static_cast<double>(target.size()) + 1e-9));
          if (count == 0) return;
          if (!ctx.rng) throw std::invalid_argument("quadrant_intervention: no random stream");
          // Partial Fisher-Yates: the first `count` entries become the sample.
          for (std::size_t i = 0; i < count; ++i) {
            const std::size_t j = i + ctx.rng->below(target.size() - i);
            std::swap(target[i], target[j]);
          }
          const double factor = p.mode == InterventionMode::Mask ? 0.0 : 2.0;
          for (std::size_t i = 0; i < count; ++i) records[target[i]].final_weight *= factor;
        }
      },
      plugin);
}

/// Fixed pipeline order: advantage shaping, clip indicator (ClipDecoupled
/// replaces `clip`, ForkingTokens narrows it), base weight, weight plugins in
/// listed order. Leaves omega and STEER to the caller.
inline void run_pipeline(std::span<const ReweightPlugin> plugins, std::span<TokenRecord> records,
                         const ClipConfig& clip, const PluginContext& ctx) {
  for (const auto& p : plugins)
    if (stage_of(p) == PluginStage::AdvantageShaping) apply_plugin(p, records, ctx);

  ClipConfig active = clip;
  for (const auto& p : plugins)
    if (const auto* d = std::get_if<ClipDecoupled>(&p)) active = ClipConfig{d->eps_high, d->eps_low};
  for (auto& r : records) r.clip_flag = clip_indicator(r.ratio, r.advantage, active);
  for (const auto& p : plugins)
    if (std::holds_alternative<ForkingTokens>(p)) apply_plugin(p, records, ctx);

  for (auto& r : records) {
    r.base_weight = r.clip_flag ? r.ratio * r.advantage : 0.0;
    r.final_weight = r.base_weight;
  }
  for (const auto& p : plugins)
    if (stage_of(p) == PluginStage::Weight) apply_plugin(p, records, ctx);
}

// ---------------------------------------------------------------------------
// Configuration.

namespace detail {

inline double number(const nlohmann::json& j, const char* key, double fallback,
                     const std::string& path) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number()) throw ConfigError(path + "." + key, "expected a number");
  return v.get<double>();
}

inline void require(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw ConfigError(path, what);
}

}  // namespace detail

/// Rejects out-of-range parameters. `path` names the plugin entry.
inline void validate_plugin(const ReweightPlugin& plugin, const std::string& path) {
  using detail::require;
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, ClipDecoupled>) {
          require(p.eps_high >= 0.0, path + ".eps_high", "must be nonnegative");
          require(p.eps_low >= 0.0 && p.eps_low < 1.0, path + ".eps_low", "must lie in [0, 1)");
        } else if constexpr (std::is_same_v<T, EntropyReg> || std::is_same_v<T, KLPenalty>) {
          require(p.beta >= 0.0 && std::isfinite(p.beta), path + ".beta", "must be finite and nonnegative");
        } else if constexpr (std::is_same_v<T, WReinforce>) {
          require(p.lambda >= 0.0 && p.lambda <= 1.0, path + ".lambda", "must lie in [0, 1]");
        } else if constexpr (std::is_same_v<T, EntropyAdvantage>) {
          require(p.alpha >= 0.0, path + ".alpha", "must be nonnegative");
          require(p.kappa > 1.0, path + ".kappa", "must exceed 1");
        } else if constexpr (std::is_same_v<T, GTPO> || std::is_same_v<T, PPLBased>) {
          require(p.alpha >= 0.0 && std::isfinite(p.alpha), path + ".alpha", "must be finite and nonnegative");
        } else if constexpr (std::is_same_v<T, PositionBased>) {
          require(std::isfinite(p.gamma), path + ".gamma", "must be finite");
        } else if constexpr (std::is_same_v<T, ForkingTokens>) {
          require(p.rho > 0.0 && p.rho < 1.0, path + ".rho", "must lie in (0, 1)");
        } else if constexpr (std::is_same_v<T, Unlikeliness>) {
          require(p.beta_rank >= 0.0 && p.beta_rank <= 1.0, path + ".beta_rank", "must lie in [0, 1]");
        } else if constexpr (std::is_same_v<T, QuadrantIntervention>) {
          require(p.quadrant != Quadrant::None, path + ".quadrant", "must be I, II, III or IV");
          require(p.fraction >= 0.0 && p.fraction < 1.0, path + ".fraction", "must lie in [0, 1)");
          require(p.p_lo > 0.0 && p.p_lo < p.p_hi && p.p_hi < 1.0, path + ".p_lo",
                  "thresholds must satisfy 0 < p_lo < p_hi < 1");
        }
      },
      plugin);
}

/// The pipeline admits at most one advantage shaper and one ClipDecoupled.
inline void validate_plugins(std::span<const ReweightPlugin> plugins, const std::string& path = "plugins") {
  std::size_t shapers = 0, clips = 0;
  for (std::size_t i = 0; i < plugins.size(); ++i) {
    const auto p = path + "[" + std::to_string(i) + "]";
    validate_plugin(plugins[i], p);
    if (stage_of(plugins[i]) == PluginStage::AdvantageShaping && ++shapers > 1)
      throw ConfigError(p, "at most one advantage-shaping plugin per run");
    if (std::holds_alternative<ClipDecoupled>(plugins[i]) && ++clips > 1)
      throw ConfigError(p, "at most one clip_decoupled plugin per run");
  }
}

inline Quadrant quadrant_from_string(const std::string& s) {
  if (s == "I") return Quadrant::I;
  if (s == "II") return Quadrant::II;
  if (s == "III") return Quadrant::III;
  if (s == "IV") return Quadrant::IV;
  throw std::invalid_argument("unknown quadrant '" + s + "'");
}

inline ReweightPlugin plugin_from_json(const nlohmann::json& j, const std::string& path) {
  using detail::number;
  if (!j.is_object()) throw ConfigError(path, "expected an object");
  if (!j.contains("kind") || !j.at("kind").is_string())
    throw ConfigError(path + ".kind", "missing plugin kind");
  const auto kind = j.at("kind").get<std::string>();
  ReweightPlugin out;
  if (kind == "clip_decoupled")
    out = ClipDecoupled{number(j, "eps_high", 0.28, path), number(j, "eps_low", 0.2, path)};
  else if (kind == "entropy_reg")
    out = EntropyReg{number(j, "beta", 0.0, path)};
  else if (kind == "kl_penalty")
    out = KLPenalty{number(j, "beta", 0.0, path)};
  else if (kind == "w_reinforce")
    out = WReinforce{number(j, "lambda", 1.0, path)};
  else if (kind == "psr_mask")
    out = PSRMask{};
  else if (kind == "nsr_mask")
    out = NSRMask{};
  else if (kind == "entropy_advantage")
    out = EntropyAdvantage{number(j, "alpha", 0.0, path), number(j, "kappa", 2.0, path)};
  else if (kind == "gtpo")
    out = GTPO{number(j, "alpha", 0.0, path)};
  else if (kind == "edge_grpo")
    out = EdgeGRPO{};
  else if (kind == "ppl_based")
    out = PPLBased{number(j, "alpha", 0.0, path)};
  else if (kind == "position_based")
    out = PositionBased{number(j, "gamma", 0.0, path)};
  else if (kind == "forking_tokens")
    out = ForkingTokens{number(j, "rho", 0.2, path)};
  else if (kind == "unlikeliness")
    out = Unlikeliness{number(j, "beta_rank", 0.0, path)};
  else if (kind == "quadrant_intervention") {
    QuadrantIntervention q;
    try {
      q.quadrant = quadrant_from_string(j.value("quadrant", std::string("I")));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(path + ".quadrant", e.what());
    }
    const auto mode = j.value("mode", std::string("mask"));
    if (mode == "mask")
      q.mode = InterventionMode::Mask;
    else if (mode == "upweight2x")
      q.mode = InterventionMode::Upweight2x;
    else
      throw ConfigError(path + ".mode", "expected 'mask' or 'upweight2x'");
    q.fraction = number(j, "fraction", 0.1, path);
    q.p_hi = number(j, "p_hi", 0.8, path);
    q.p_lo = number(j, "p_lo", 0.2, path);
    out = q;
  } else {
    throw ConfigError(path + ".kind", "unknown plugin kind '" + kind + "'");
  }
  validate_plugin(out, path);
  return out;
}

inline nlohmann::json plugin_to_json(const ReweightPlugin& plugin) {
  nlohmann::json j = {{"kind", kind_of(plugin)}};
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, ClipDecoupled>) {
          j["eps_high"] = p.eps_high;
          j["eps_low"] = p.eps_low;
        } else if constexpr (std::is_same_v<T, EntropyReg> || std::is_same_v<T, KLPenalty>) {
          j["beta"] = p.beta;
        } else if constexpr (std::is_same_v<T, WReinforce>) {
          j["lambda"] = p.lambda;
        } else if constexpr (std::is_same_v<T, EntropyAdvantage>) {
          j["alpha"] = p.alpha;
          j["kappa"] = p.kappa;
        } else if constexpr (std::is_same_v<T, GTPO> || std::is_same_v<T, PPLBased>) {
          j["alpha"] = p.alpha;
        } else if constexpr (std::is_same_v<T, PositionBased>) {
          j["gamma"] = p.gamma;
        } else if constexpr (std::is_same_v<T, ForkingTokens>) {
          j["rho"] = p.rho;
        } else if constexpr (std::is_same_v<T, Unlikeliness>) {
          j["beta_rank"] = p.beta_rank;
        } else if constexpr (std::is_same_v<T, QuadrantIntervention>) {
          j["quadrant"] = to_string(p.quadrant);
          j["fraction"] = p.fraction;
          j["mode"] = p.mode == InterventionMode::Mask ? "mask" : "upweight2x";
          j["p_hi"] = p.p_hi;
          j["p_lo"] = p.p_lo;
        }
      },
      plugin);
  return j;
}

}  // namespace entlab
