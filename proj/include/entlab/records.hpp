#pragma once

#include <cstddef>
#include <optional>
#include <vector>

namespace entlab {

using StateId = std::size_t;
using Token = int;
using Sequence = std::vector<Token>;

/// One prompt's group of sampled responses.
struct RolloutGroup {
  std::size_t prompt_id = 0;
  std::vector<Sequence> responses;
  // State visited at every token, parallel to `responses`.
  std::vector<std::vector<StateId>> states;
  // Probability of every sampled token under the sampling policy.
  std::vector<std::vector<double>> old_probs;
  std::vector<double> rewards;
  // Empty until group advantages are computed.
  std::vector<double> advantages;

  std::size_t size() const noexcept { return responses.size(); }
  std::size_t token_count() const noexcept {
    std::size_t n = 0;
    for (const auto& r : responses) n += r.size();
    return n;
  }
};

/// One (state, action) training event and everything derived from it on the
/// way to the logit update.
struct TokenRecord {
  std::size_t prompt_id = 0;
  std::size_t group_idx = 0;  // slot of the group within the step
  std::size_t response_idx = 0;
  std::size_t position = 0;  // 0-based
  std::size_t length = 0;    // |o_i|
  std::size_t minibatch = 0;
  StateId state_id = 0;
  Token action_id = 0;

  double reward = 0.0;
  double p_old = 1.0;
  double p_cur = 1.0;
  double ratio = 1.0;
  double advantage = 0.0;  // after advantage-shaping plugins
  int clip_flag = 1;
  double base_weight = 0.0;  // clip_flag * ratio * advantage
  double entropy = 0.0;      // H of the current state distribution
  double delta = 0.0;
  std::optional<double> omega;
  double lambda = 1.0;
  double final_weight = 0.0;
};

}  // namespace entlab
