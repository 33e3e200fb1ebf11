#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <span>

#include "entlab/policy.hpp"
#include "entlab/rng.hpp"
#include "entlab/tasks.hpp"

namespace entlab {

/// Prior over logits standing in for a pretrained model. Answer j of a
/// prompt gets a logit boost answer_bias * bias_decay^j at its token for each
/// position, every logit gets Gaussian noise, and each prompt carries `decoys`
/// wrong sequences boosted by decoy_bias, the model's confident mistakes. In
/// Prefix mode a state on no answer or decoy path gets one random token
/// boosted by offpath_bias, so the model stays confident after an error.
struct InitConfig {
  double noise = 1.0;
  double answer_bias = 3.0;
  double bias_decay = 0.5;
  std::size_t decoys = 0;
  double decoy_bias = 3.0;
  double offpath_bias = 0.0;
};

namespace detail {

inline std::uint64_t hash_prefix(std::span<const Token> prefix) {
  std::uint64_t h = 0x8f3d2a1b7c6e5f40ULL;
  for (Token t : prefix) h = mix64(h ^ static_cast<std::uint64_t>(t + 1));
  return h;
}

inline constexpr std::uint64_t kDecoyTag = 0xdec0ULL;

/// Wrong sequences of a prompt, distinct from its answers and each other.
/// Fewer than `count` are returned only when the sequence space is exhausted.
inline std::vector<Sequence> decoy_sequences(const TaskSuite& suite, std::size_t prompt,
                                             std::size_t count, std::uint64_t seed) {
  std::vector<Sequence> out;
  if (count == 0) return out;
  const auto& spec = suite.prompt(prompt);
  const std::size_t space = bounded_power(suite.vocab, suite.horizon, spec.answers.size() + count + 1);
  const std::size_t target = std::min(count, space - std::min(space, spec.answers.size()));
  Rng rng(derive_seed(seed, Stream::Init, {prompt, kDecoyTag}));
  while (out.size() < target) {
    Sequence s(suite.horizon);
    for (auto& t : s) t = static_cast<Token>(rng.below(suite.vocab));
    if (spec.accepts(s) || std::find(out.begin(), out.end(), s) != out.end()) continue;
    out.push_back(std::move(s));
  }
  return out;
}

inline bool extends(const StateKey& key, const Sequence& path, ContextModel mode) {
  return mode == ContextModel::Positional ||
         std::equal(key.prefix.begin(), key.prefix.end(), path.begin(), path.begin() + key.position);
}

}  // namespace detail

/// Deterministic initial logits for one state. In Prefix mode only sequences
/// consistent with the prefix are boosted, and the decay exponent counts only
/// consistent answers, so a committed continuation gets the full bias.
inline void init_row(const TaskSuite& suite, const InitConfig& cfg, ContextModel mode,
                     std::uint64_t seed, const StateKey& key, std::span<double> row,
                     std::span<const Sequence> decoys = {}) {
  const std::uint64_t salt = mode == ContextModel::Prefix ? detail::hash_prefix(key.prefix) : 0;
  Rng rng(derive_seed(seed, Stream::Init, {key.prompt, key.position, salt}));
  for (auto& z : row) z = cfg.noise * rng.normal();
  bool on_path = false;
  double boost = cfg.answer_bias;
  for (const auto& ans : suite.prompt(key.prompt).answers) {
    if (!detail::extends(key, ans, mode)) continue;
    row[static_cast<std::size_t>(ans[key.position])] += boost;
    boost *= cfg.bias_decay;
    on_path = true;
  }
  for (const auto& d : decoys) {
    if (!detail::extends(key, d, mode)) continue;
    row[static_cast<std::size_t>(d[key.position])] += cfg.decoy_bias;
    on_path = true;
  }
  if (!on_path && cfg.offpath_bias != 0.0) row[rng.below(row.size())] += cfg.offpath_bias;
}

inline PolicyTable make_initial_policy(const TaskSuite& suite, const InitConfig& cfg,
                                       ContextModel mode, std::size_t prefix_cap,
                                       std::uint64_t seed) {
  ContextIndexer ix(mode, suite.size(), suite.horizon, suite.vocab,
                    mode == ContextModel::Prefix ? prefix_cap : 0);
  auto policy = PolicyTable::zeros(std::move(ix));
  auto shared = std::make_shared<const TaskSuite>(suite);
  auto decoys = std::make_shared<std::vector<std::vector<Sequence>>>();
  for (std::size_t q = 0; q < suite.size(); ++q)
    decoys->push_back(detail::decoy_sequences(suite, q, cfg.decoys, seed));
  RowInit init = [shared, decoys, cfg, mode, seed](const StateKey& key, std::span<double> row) {
    init_row(*shared, cfg, mode, seed, key, row, (*decoys)[key.prompt]);
  };
  if (mode == ContextModel::Positional)
    for (StateId s = 0; s < policy.states(); ++s) init(policy.indexer().key(s), policy.logits(s));
  policy.set_row_init(std::move(init));
  return policy;
}

}  // namespace entlab
