#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "entlab/advantage.hpp"
#include "entlab/clip.hpp"
#include "entlab/entropy.hpp"
#include "entlab/errors.hpp"
#include "entlab/plugins.hpp"
#include "entlab/policy.hpp"
#include "entlab/records.hpp"
#include "entlab/rng.hpp"
#include "entlab/steer.hpp"
#include "entlab/tasks.hpp"

namespace entlab {

struct TrainerConfig {
  std::size_t group_size = 8;  // G
  std::size_t prompts_per_step = 32;
  std::size_t minibatches = 4;
  double learning_rate = 0.05;
  ClipConfig clip;
  std::vector<ReweightPlugin> plugins;
  std::optional<SteerConfig> steer;

  void validate() const {
    if (group_size < 2) throw ConfigError("trainer.G", "must be at least 2");
    if (prompts_per_step == 0) throw ConfigError("trainer.prompts_per_step", "must be positive");
    if (minibatches == 0 || prompts_per_step % minibatches != 0)
      throw ConfigError("trainer.minibatches", "must divide prompts_per_step");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw ConfigError("trainer.learning_rate", "must be finite and nonnegative");
    try {
      clip.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError("clip", e.what());
    }
    validate_plugins(plugins);
    if (steer) {
      try {
        steer->validate();
      } catch (const std::invalid_argument& e) {
        throw ConfigError("steer", e.what());
      }
    }
  }
};

/// Prompt ids for the groups of one step. Prompts are visited in epochs; each
/// epoch is a seeded permutation of the suite, so with prompts_per_step > Q a
/// prompt recurs within a step (and across its mini-batches).
inline std::vector<std::size_t> step_prompts(std::uint64_t seed, std::size_t step,
                                             std::size_t prompts_per_step, std::size_t Q) {
  std::vector<std::size_t> out;
  out.reserve(prompts_per_step);
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<std::size_t> perm(Q);
  for (std::size_t j = 0; j < prompts_per_step; ++j) {
    const std::size_t g = step * prompts_per_step + j;
    const std::size_t epoch = g / Q;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), 0);
      Rng rng(derive_seed(seed, Stream::Schedule, {epoch}));
      for (std::size_t i = Q; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
      cached_epoch = epoch;
    }
    out.push_back(perm[g % Q]);
  }
  return out;
}

struct StepReport {
  std::size_t step = 0;
  double entropy_before = 0.0;  // policy entropy of the step's rollouts
  double entropy_after = 0.0;
  double accuracy = 0.0;  // fraction of correct training responses
  std::vector<std::size_t> clip_counts;  // by p_old over (0,.2], (.2,.8], (.8,1]
  std::array<double, 4> quadrant_fraction{};
  double mean_abs_omega = 0.0;
  double lambda_min = 1.0;
  double lambda_median = 1.0;
  double lambda_mean = 1.0;
  // Mini-batches in which STEER changed at least one weight, and those among
  // them whose smallest multiplier equals lambda_min exactly and is attained
  // exactly at the tokens of maximal |omega|.
  std::size_t steer_minibatches = 0;
  std::size_t steer_min_exact = 0;
  std::size_t minibatches = 0;
  std::size_t tokens = 0;
  std::size_t degenerate_groups = 0;
};

struct StepResult {
  std::vector<RolloutGroup> groups;
  std::vector<TokenRecord> records;
  StepReport report;
};

/// Snapshot handed to an observer around every mini-batch update.
struct MinibatchView {
  std::size_t index = 0;
  const PolicyTable& before;
  const PolicyTable& after;
  std::span<const TokenRecord> records;
  double effective_eta = 0.0;
};

using MinibatchObserver = std::function<void(const MinibatchView&)>;

struct StepContext {
  std::uint64_t seed = 0;
  std::size_t step = 0;
  const PolicyTable* reference = nullptr;  // KLPenalty reference snapshot
  const MinibatchObserver* observer = nullptr;
};

namespace detail {

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 1.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline bool steer_min_is_exact(std::span<const TokenRecord> mb, double lambda_min) {
  double max_abs = 0.0, min_lambda = 1.0;
  for (const auto& r : mb) {
    max_abs = std::max(max_abs, std::abs(r.omega.value_or(0.0)));
    min_lambda = std::min(min_lambda, r.lambda);
  }
  if (min_lambda != lambda_min) return false;
  for (const auto& r : mb)
    if ((r.lambda == lambda_min) != (std::abs(r.omega.value_or(0.0)) == max_abs)) return false;
  return true;
}

}  // namespace detail

/// One GRPO generation step: sample groups from the frozen pre-step policy,
/// compute group advantages, then update mini-batch by mini-batch in order.
/// Each mini-batch recomputes p_cur, ratio and clip against the current
/// policy, runs the plugin pipeline, fills delta and omega, applies STEER if
/// configured, and takes one gradient step normalized by its token count.
/// The policy is updated in place.
inline StepResult train_step(PolicyTable& policy, const TaskSuite& suite, const TrainerConfig& cfg,
                             const StepContext& ctx) {
  cfg.validate();
  StepResult out;
  auto& rep = out.report;
  rep.step = ctx.step;

  const auto prompt_ids = step_prompts(ctx.seed, ctx.step, cfg.prompts_per_step, suite.size());
  out.groups.reserve(prompt_ids.size());
  for (std::size_t slot = 0; slot < prompt_ids.size(); ++slot) {
    Rng rng(derive_seed(ctx.seed, Stream::Rollout, {ctx.step, slot, prompt_ids[slot]}));
    auto g = generate_rollouts(policy, suite.prompt(prompt_ids[slot]), cfg.group_size, rng);
    g.advantages = group_advantages(g.rewards);
    if (std::all_of(g.advantages.begin(), g.advantages.end(), [](double a) { return a == 0.0; }))
      ++rep.degenerate_groups;
    out.groups.push_back(std::move(g));
  }
  rep.entropy_before = policy_entropy(policy, out.groups);
  std::size_t correct = 0, responses = 0;
  for (const auto& g : out.groups)
    for (double r : g.rewards) {
      correct += r > 0.0;
      ++responses;
    }
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(responses);

  const std::size_t per_mb = cfg.prompts_per_step / cfg.minibatches;
  rep.minibatches = cfg.minibatches;
  for (std::size_t mb = 0; mb < cfg.minibatches; ++mb) {
    const std::size_t first = out.records.size();
    std::map<StateId, std::pair<std::vector<double>, double>> cur;  // probs, entropy
    for (std::size_t slot = mb * per_mb; slot < (mb + 1) * per_mb; ++slot) {
      const auto& g = out.groups[slot];
      for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t t = 0; t < g.responses[i].size(); ++t) {
          const StateId s = g.states[i][t];
          auto it = cur.find(s);
          if (it == cur.end()) {
            auto p = probs(policy, s);
            const double h = entropy_of(p);
            it = cur.emplace(s, std::make_pair(std::move(p), h)).first;
          }
          TokenRecord r;
          r.prompt_id = g.prompt_id;
          r.group_idx = slot;
          r.response_idx = i;
          r.position = t;
          r.length = g.responses[i].size();
          r.minibatch = mb;
          r.state_id = s;
          r.action_id = g.responses[i][t];
          r.reward = g.rewards[i];
          r.p_old = g.old_probs[i][t];
          r.p_cur = it->second.first[static_cast<std::size_t>(r.action_id)];
          r.ratio = r.p_cur / r.p_old;
          r.advantage = g.advantages[i];
          r.entropy = it->second.second;
          out.records.push_back(r);
        }
    }
    std::span<TokenRecord> batch(out.records.data() + first, out.records.size() - first);
    if (batch.empty()) continue;

    Rng plugin_rng(derive_seed(ctx.seed, Stream::Plugin, {ctx.step, mb}));
    PluginContext pctx{&plugin_rng, &policy, ctx.reference};
    run_pipeline(cfg.plugins, batch, cfg.clip, pctx);

    const double eff_eta = cfg.learning_rate / static_cast<double>(batch.size());
    for (auto& r : batch) {
      if (!std::isfinite(r.final_weight))
        throw StepAborted("step " + std::to_string(ctx.step) + ", mini-batch " + std::to_string(mb) +
                          ": non-finite weight at state " + std::to_string(r.state_id) +
                          " (advantage " + std::to_string(r.advantage) + ", ratio " +
                          std::to_string(r.ratio) + ")");
      r.delta = delta_indicator(r.p_cur, r.entropy);
      r.omega = omega_hat(r, eff_eta);
      r.lambda = 1.0;
    }
    if (cfg.steer) {
      apply_steer(batch, *cfg.steer);
      const bool active = std::any_of(batch.begin(), batch.end(), [](const TokenRecord& r) { return r.lambda != 1.0; });
      if (active) {
        ++rep.steer_minibatches;
        if (detail::steer_min_is_exact(batch, cfg.steer->lambda_min)) ++rep.steer_min_exact;
      }
    }

    if (ctx.observer) {
      const PolicyTable before = policy;
      apply_update_inplace(policy, batch, cfg.learning_rate, batch.size());
      (*ctx.observer)(MinibatchView{mb, before, policy, batch, eff_eta});
    } else {
      apply_update_inplace(policy, batch, cfg.learning_rate, batch.size());
    }
  }

  rep.entropy_after = policy_entropy(policy, out.groups);
  rep.tokens = out.records.size();
  rep.clip_counts = clip_histogram(out.records, default_clip_bins());
  std::array<std::size_t, 4> quad{};
  double abs_omega = 0.0, lam_sum = 0.0;
  std::vector<double> lambdas;
  lambdas.reserve(out.records.size());
  rep.lambda_min = 1.0;
  for (const auto& r : out.records) {
    const auto q = classify_quadrant(r.advantage, r.delta);
    if (q != Quadrant::None) ++quad[static_cast<int>(q) - 1];
    abs_omega += std::abs(r.omega.value_or(0.0));
    lam_sum += r.lambda;
    rep.lambda_min = std::min(rep.lambda_min, r.lambda);
    lambdas.push_back(r.lambda);
  }
  if (!out.records.empty()) {
    const double n = static_cast<double>(out.records.size());
    for (int k = 0; k < 4; ++k) rep.quadrant_fraction[k] = static_cast<double>(quad[k]) / n;
    rep.mean_abs_omega = abs_omega / n;
    rep.lambda_mean = lam_sum / n;
    rep.lambda_median = detail::median_of(std::move(lambdas));
  }
  return out;
}

}  // namespace entlab
