#pragma once

#include <algorithm>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "entlab/policy.hpp"
#include "entlab/records.hpp"
#include "entlab/rng.hpp"

namespace entlab {

struct PromptSpec {
  std::size_t prompt_id = 0;
  std::vector<Sequence> answers;  // distinct, each of length T

  std::size_t difficulty() const noexcept { return answers.size(); }
  bool accepts(std::span<const Token> response) const {
    return std::any_of(answers.begin(), answers.end(),
                       [&](const Sequence& a) { return std::equal(a.begin(), a.end(), response.begin(), response.end()); });
  }
};

struct TaskConfig {
  std::size_t prompts = 8;  // Q
  std::size_t vocab = 16;   // V
  std::size_t horizon = 6;  // T
  std::size_t k_min = 2;
  std::size_t k_max = 8;
};

struct TaskSuite {
  std::vector<PromptSpec> prompts;
  std::size_t vocab = 0;
  std::size_t horizon = 0;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return prompts.size(); }
  const PromptSpec& prompt(std::size_t id) const {
    if (id >= prompts.size()) throw std::out_of_range("TaskSuite: prompt id out of range");
    return prompts[id];
  }
};

namespace detail {
// V^T saturated at `cap`.
inline std::size_t bounded_power(std::size_t v, std::size_t t, std::size_t cap) {
  std::size_t r = 1;
  for (std::size_t i = 0; i < t; ++i) {
    if (r > cap / v) return cap;
    r *= v;
  }
  return r;
}
}  // namespace detail

/// Draws a prompt suite: each prompt gets K uniform on [k_min, k_max] and K
/// distinct uniformly random answer sequences.
inline TaskSuite make_task(std::uint64_t seed, const TaskConfig& cfg) {
  if (cfg.vocab < 2) throw std::invalid_argument("make_task: V must be at least 2");
  if (cfg.horizon < 1) throw std::invalid_argument("make_task: T must be at least 1");
  if (cfg.prompts < 1) throw std::invalid_argument("make_task: Q must be at least 1");
  if (cfg.k_min < 1 || cfg.k_min > cfg.k_max || cfg.k_max > cfg.vocab)
    throw std::invalid_argument("make_task: K-range must satisfy 1 <= k_min <= k_max <= V");
  if (detail::bounded_power(cfg.vocab, cfg.horizon, cfg.k_max) < cfg.k_max)
    throw std::invalid_argument("make_task: K exceeds V^T distinct sequences");

  Rng rng(derive_seed(seed, Stream::Task));
  TaskSuite suite;
  suite.vocab = cfg.vocab;
  suite.horizon = cfg.horizon;
  suite.seed = seed;
  for (std::size_t q = 0; q < cfg.prompts; ++q) {
    PromptSpec p;
    p.prompt_id = q;
    const std::size_t k = cfg.k_min + rng.below(cfg.k_max - cfg.k_min + 1);
    std::set<Sequence> seen;
    while (p.answers.size() < k) {
      Sequence s(cfg.horizon);
      for (auto& tok : s) tok = static_cast<Token>(rng.below(cfg.vocab));
      if (seen.insert(s).second) p.answers.push_back(std::move(s));
    }
    suite.prompts.push_back(std::move(p));
  }
  return suite;
}

/// Binary verifier: +1 iff the response is in the answer set.
inline double verify(std::span<const Token> response, const PromptSpec& prompt) {
  if (prompt.answers.empty()) throw std::invalid_argument("verify: prompt has no answers");
  if (response.size() != prompt.answers.front().size())
    throw std::invalid_argument("verify: response length " + std::to_string(response.size()) +
                                " does not match horizon " +
                                std::to_string(prompt.answers.front().size()));
  return prompt.accepts(response) ? 1.0 : -1.0;
}

/// Samples G independent responses for one prompt. Prefix-mode states are
/// materialized on first visit. Advantages are left empty.
inline RolloutGroup generate_rollouts(PolicyTable& policy, const PromptSpec& prompt,
                                      std::size_t G, Rng& rng) {
  if (G < 2) throw std::invalid_argument("generate_rollouts: G must be at least 2");
  const std::size_t T = policy.indexer().horizon();
  RolloutGroup g;
  g.prompt_id = prompt.prompt_id;
  g.responses.reserve(G);
  std::vector<double> p(policy.vocab());
  for (std::size_t i = 0; i < G; ++i) {
    Sequence resp;
    std::vector<StateId> states;
    std::vector<double> old;
    resp.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
      const StateId s = policy.resolve(prompt.prompt_id, resp);
      softmax_into(policy.logits(s), p);
      const Token a = sample_from(p, rng);
      states.push_back(s);
      old.push_back(p[static_cast<std::size_t>(a)]);
      resp.push_back(a);
    }
    g.rewards.push_back(verify(resp, prompt));
    g.responses.push_back(std::move(resp));
    g.states.push_back(std::move(states));
    g.old_probs.push_back(std::move(old));
  }
  return g;
}

/// Exact probability that one sampled response is correct. Answer sequences
/// are disjoint events, so this is a sum of path probabilities. States never
/// visited in Prefix mode are evaluated with the row initializer.
inline double exact_correct_probability(const PolicyTable& policy, const PromptSpec& prompt) {
  double total = 0.0;
  std::vector<double> p(policy.vocab()), scratch(policy.vocab());
  for (const auto& ans : prompt.answers) {
    double path = 1.0;
    for (std::size_t t = 0; t < ans.size(); ++t) {
      std::span<const Token> prefix(ans.data(), t);
      if (auto s = policy.find(prompt.prompt_id, prefix)) {
        softmax_into(policy.logits(*s), p);
      } else {
        std::fill(scratch.begin(), scratch.end(), 0.0);
        if (policy.row_init())
          policy.row_init()(StateKey{prompt.prompt_id, t, Sequence(prefix.begin(), prefix.end())},
                            scratch);
        softmax_into(scratch, p);
      }
      path *= p[static_cast<std::size_t>(ans[t])];
    }
    total += path;
  }
  return total;
}

/// Mean over the prompts present in `groups` of the fraction of that prompt's
/// answers realized by at least one response.
inline double answer_coverage(std::span<const RolloutGroup> groups, const TaskSuite& suite) {
  std::map<std::size_t, std::set<Sequence>> hit;
  for (const auto& g : groups) {
    const auto& prompt = suite.prompt(g.prompt_id);
    auto& h = hit[g.prompt_id];
    for (const auto& r : g.responses)
      if (prompt.accepts(r)) h.insert(r);
  }
  if (hit.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& [id, h] : hit)
    sum += static_cast<double>(h.size()) / static_cast<double>(suite.prompt(id).difficulty());
  return sum / static_cast<double>(hit.size());
}

// ---------------------------------------------------------------------------

inline nlohmann::json suite_to_json(const TaskSuite& suite) {
  nlohmann::json prompts = nlohmann::json::array();
  for (const auto& p : suite.prompts) prompts.push_back({{"id", p.prompt_id}, {"answers", p.answers}});
  return {{"seed", suite.seed},
          {"Q", suite.prompts.size()},
          {"V", suite.vocab},
          {"T", suite.horizon},
          {"prompts", prompts}};
}

inline TaskSuite suite_from_json(const nlohmann::json& j) {
  TaskSuite s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.vocab = j.at("V").get<std::size_t>();
  s.horizon = j.at("T").get<std::size_t>();
  for (const auto& p : j.at("prompts")) {
    PromptSpec spec;
    spec.prompt_id = p.at("id").get<std::size_t>();
    spec.answers = p.at("answers").get<std::vector<Sequence>>();
    if (spec.prompt_id != s.prompts.size())
      throw std::invalid_argument("suite_from_json: prompt ids must be 0..Q-1 in order");
    for (const auto& a : spec.answers) {
      if (a.size() != s.horizon) throw std::invalid_argument("suite_from_json: answer length != T");
      for (Token t : a)
        if (t < 0 || static_cast<std::size_t>(t) >= s.vocab)
          throw std::invalid_argument("suite_from_json: token out of vocabulary");
    }
    s.prompts.push_back(std::move(spec));
  }
  if (s.prompts.size() != j.at("Q").get<std::size_t>())
    throw std::invalid_argument("suite_from_json: Q does not match prompt count");
  return s;
}

/// One JSONL line per response.
inline std::string rollouts_to_jsonl(std::span<const RolloutGroup> groups, std::size_t step) {
  std::string out;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    for (std::size_t i = 0; i < g.size(); ++i) {
      nlohmann::json j = {{"step", step},
                          {"group", gi},
                          {"prompt_id", g.prompt_id},
                          {"response_idx", i},
                          {"tokens", g.responses[i]},
                          {"old_probs", g.old_probs[i]},
                          {"reward", g.rewards[i]}};
      if (!g.advantages.empty()) j["advantage"] = g.advantages[i];
      out += j.dump() + "\n";
    }
  }
  return out;
}

}  // namespace entlab
