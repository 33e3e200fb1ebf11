#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "entlab/records.hpp"
#include "entlab/rng.hpp"

namespace entlab {

enum class ContextModel { Positional, Prefix };

inline const char* to_string(ContextModel m) {
  return m == ContextModel::Positional ? "positional" : "prefix";
}

inline ContextModel context_model_from_string(const std::string& s) {
  if (s == "positional") return ContextModel::Positional;
  if (s == "prefix") return ContextModel::Prefix;
  throw std::invalid_argument("unknown context model '" + s + "'");
}

/// Identity of a context: the prompt, the position and (Prefix mode only) the
/// tokens generated so far.
struct StateKey {
  std::size_t prompt = 0;
  std::size_t position = 0;
  Sequence prefix;
};

/// Maps (prompt, position[, prefix]) to dense state ids.
///
/// Positional mode allocates exactly Q*T states up front. Prefix mode
/// materializes a state the first time its prefix is seen and refuses to grow
/// past `prefix_cap`.
class ContextIndexer {
 public:
  ContextIndexer(ContextModel mode, std::size_t prompt_count, std::size_t horizon,
                 std::size_t vocab, std::size_t prefix_cap = 0)
      : mode_(mode), prompts_(prompt_count), horizon_(horizon), vocab_(vocab), cap_(prefix_cap) {
    if (prompt_count == 0 || horizon == 0 || vocab == 0)
      throw std::invalid_argument("ContextIndexer: Q, T and V must be positive");
    if (mode == ContextModel::Prefix && prefix_cap == 0)
      throw std::invalid_argument("ContextIndexer: prefix_cap must be positive in Prefix mode");
  }

  ContextModel mode() const noexcept { return mode_; }
  std::size_t prompt_count() const noexcept { return prompts_; }
  std::size_t horizon() const noexcept { return horizon_; }
  std::size_t vocab() const noexcept { return vocab_; }
  std::size_t prefix_cap() const noexcept { return cap_; }

  std::size_t size() const noexcept {
    return mode_ == ContextModel::Positional ? prompts_ * horizon_ : keys_.size();
  }

  /// Looks up a state without creating it.
  std::optional<StateId> find(std::size_t prompt, std::span<const Token> prefix) const {
    check(prompt, prefix.size());
    if (mode_ == ContextModel::Positional) return prompt * horizon_ + prefix.size();
    auto it = ids_.find(encode(prompt, prefix));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  /// Looks up a state, creating it in Prefix mode. Returns the id and whether
  /// it was newly created.
  std::pair<StateId, bool> materialize(std::size_t prompt, std::span<const Token> prefix) {
    check(prompt, prefix.size());
    if (mode_ == ContextModel::Positional) return {prompt * horizon_ + prefix.size(), false};
    auto code = encode(prompt, prefix);
    if (auto it = ids_.find(code); it != ids_.end()) return {it->second, false};
    if (keys_.size() >= cap_)
      throw std::length_error("ContextIndexer: prefix_cap of " + std::to_string(cap_) +
                              " states exceeded");
    StateId id = keys_.size();
    ids_.emplace(std::move(code), id);
    keys_.push_back(StateKey{prompt, prefix.size(), Sequence(prefix.begin(), prefix.end())});
    return {id, true};
  }

  StateKey key(StateId s) const {
    if (s >= size()) throw std::out_of_range("ContextIndexer: state id out of range");
    if (mode_ == ContextModel::Positional) return StateKey{s / horizon_, s % horizon_, {}};
    return keys_[s];
  }

 private:
  void check(std::size_t prompt, std::size_t position) const {
    if (prompt >= prompts_) throw std::out_of_range("ContextIndexer: prompt out of range");
    if (position >= horizon_) throw std::out_of_range("ContextIndexer: position out of range");
  }

  static std::vector<Token> encode(std::size_t prompt, std::span<const Token> prefix) {
    std::vector<Token> code;
    code.reserve(prefix.size() + 1);
    code.push_back(static_cast<Token>(prompt));
    code.insert(code.end(), prefix.begin(), prefix.end());
    return code;
  }

  ContextModel mode_;
  std::size_t prompts_, horizon_, vocab_, cap_;
  std::map<std::vector<Token>, StateId> ids_;
  std::vector<StateKey> keys_;
};

/// Fills the logits of a freshly materialized Prefix-mode state.
using RowInit = std::function<void(const StateKey&, std::span<double>)>;

// Numerically stable softmax of one logit row.
inline void softmax_into(std::span<const double> logits, std::span<double> out) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t a = 0; a < logits.size(); ++a) {
    out[a] = std::exp(logits[a] - mx);
    sum += out[a];
  }
  for (auto& p : out) p /= sum;
}

// Shannon entropy in nats with 0 ln 0 = 0.
inline double entropy_of(std::span<const double> p) {
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= x * std::log(x);
  return h;
}

/// Tabular softmax policy: one independent logit vector per context.
class PolicyTable {
 public:
  PolicyTable(ContextIndexer indexer, std::vector<double> logits)
      : indexer_(std::move(indexer)), logits_(std::move(logits)) {
    if (logits_.size() != indexer_.size() * indexer_.vocab())
      throw std::invalid_argument("PolicyTable: logits size does not match S x V");
    for (double z : logits_)
      if (!std::isfinite(z)) throw std::invalid_argument("PolicyTable: non-finite logit");
  }

  static PolicyTable zeros(ContextIndexer indexer) {
    std::vector<double> z(indexer.size() * indexer.vocab(), 0.0);
    return PolicyTable(std::move(indexer), std::move(z));
  }

  const ContextIndexer& indexer() const noexcept { return indexer_; }
  ContextModel context_model() const noexcept { return indexer_.mode(); }
  std::size_t states() const noexcept { return indexer_.size(); }
  std::size_t vocab() const noexcept { return indexer_.vocab(); }
  std::span<const double> raw() const noexcept { return logits_; }

  std::span<const double> logits(StateId s) const {
    check(s);
    return {logits_.data() + s * vocab(), vocab()};
  }
  std::span<double> logits(StateId s) {
    check(s);
    return {logits_.data() + s * vocab(), vocab()};
  }

  void set_row_init(RowInit init) { row_init_ = std::move(init); }
  const RowInit& row_init() const noexcept { return row_init_; }

  std::optional<StateId> find(std::size_t prompt, std::span<const Token> prefix) const {
    return indexer_.find(prompt, prefix);
  }

  /// Resolves the state for a context, materializing it (Prefix mode) with
  /// the row initializer, or zero logits when none is set.
  StateId resolve(std::size_t prompt, std::span<const Token> prefix) {
    auto [id, fresh] = indexer_.materialize(prompt, prefix);
    if (fresh) {
      logits_.resize(logits_.size() + vocab(), 0.0);
      if (row_init_) {
        auto row = logits(id);
        row_init_(indexer_.key(id), row);
        for (double z : row)
          if (!std::isfinite(z)) throw std::invalid_argument("PolicyTable: non-finite init logit");
      }
    }
    return id;
  }

 private:
  void check(StateId s) const {
    if (s >= states()) throw std::out_of_range("PolicyTable: state id out of range");
  }

  ContextIndexer indexer_;
  std::vector<double> logits_;
  RowInit row_init_;
};

/// Next-token distribution at a state.
inline std::vector<double> probs(const PolicyTable& policy, StateId s) {
  auto z = policy.logits(s);
  std::vector<double> p(z.size());
  softmax_into(z, p);
  return p;
}

// Inverse-CDF draw from a probability vector.
inline Token sample_from(std::span<const double> p, Rng& rng) {
  const double u = rng.uniform();
  double c = 0.0;
  for (std::size_t a = 0; a + 1 < p.size(); ++a) {
    c += p[a];
    if (u < c) return static_cast<Token>(a);
  }
  // Guard against round-off leaving u above the accumulated mass: fall back
  // to the last action with positive probability.
  for (std::size_t a = p.size(); a-- > 0;)
    if (p[a] > 0.0) return static_cast<Token>(a);
  return 0;
}

inline Token sample(const PolicyTable& policy, StateId s, Rng& rng) {
  return sample_from(probs(policy, s), rng);
}

inline double state_entropy(const PolicyTable& policy, StateId s) {
  return entropy_of(probs(policy, s));
}

/// Token-count-weighted mean of state entropy over every token of every
/// response, evaluated at the current policy.
inline double policy_entropy(const PolicyTable& policy, std::span<const RolloutGroup> rollouts) {
  std::map<StateId, double> cache;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& g : rollouts)
    for (const auto& row : g.states)
      for (StateId s : row) {
        auto it = cache.find(s);
        if (it == cache.end()) it = cache.emplace(s, state_entropy(policy, s)).first;
        sum += it->second;
        ++n;
      }
  if (n == 0) throw std::invalid_argument("policy_entropy: empty rollout set");
  return sum / static_cast<double>(n);
}

/// Per-state logit displacement produced by a batch of weighted records:
/// for each record, (lr / normalizer) * w * (1{a'=a} - pi(a'|s)) at the
/// pre-update policy. Keys are ordered so accumulation order is fixed.
inline std::map<StateId, std::vector<double>> logit_displacement(
    const PolicyTable& policy, std::span<const TokenRecord> records, double learning_rate,
    std::size_t token_normalizer) {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw std::invalid_argument("apply_update: learning rate must be finite and nonnegative");
  if (token_normalizer == 0) throw std::invalid_argument("apply_update: zero token normalizer");
  const double scale = learning_rate / static_cast<double>(token_normalizer);
  const std::size_t V = policy.vocab();

  std::map<StateId, std::vector<double>> delta;
  std::map<StateId, std::vector<double>> pcache;
  for (const auto& r : records) {
    if (!std::isfinite(r.final_weight))
      throw std::invalid_argument("apply_update: non-finite weight at state " +
                                  std::to_string(r.state_id));
    if (r.final_weight == 0.0) continue;
    if (r.action_id < 0 || static_cast<std::size_t>(r.action_id) >= V)
      throw std::out_of_range("apply_update: action out of range");
    auto pit = pcache.find(r.state_id);
    if (pit == pcache.end()) pit = pcache.emplace(r.state_id, probs(policy, r.state_id)).first;
    auto& d = delta[r.state_id];
    if (d.empty()) d.assign(V, 0.0);
    const double c = scale * r.final_weight;
    const auto& p = pit->second;
    for (std::size_t a = 0; a < V; ++a)
      d[a] += c * ((static_cast<std::size_t>(r.action_id) == a ? 1.0 : 0.0) - p[a]);
  }
  return delta;
}

/// In-place gradient-ascent step on the sampled-token log-probabilities.
inline void apply_update_inplace(PolicyTable& policy, std::span<const TokenRecord> records,
                                 double learning_rate, std::size_t token_normalizer) {
  auto delta = logit_displacement(policy, records, learning_rate, token_normalizer);
  for (const auto& [s, d] : delta) {
    auto row = policy.logits(s);
    for (std::size_t a = 0; a < row.size(); ++a) row[a] += d[a];
  }
}

inline PolicyTable apply_update(PolicyTable policy, std::span<const TokenRecord> records,
                                double learning_rate, std::size_t token_normalizer) {
  apply_update_inplace(policy, records, learning_rate, token_normalizer);
  return policy;
}

// ---------------------------------------------------------------------------
// Snapshot format: {"context_model","Q","T","V","logits":[row-major]} with
// every logit printed to 17 significant digits. Prefix-mode snapshots add
// "prefix_cap" and "keys":[[prompt, tok...], ...] in state-id order.

inline std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string policy_to_json(const PolicyTable& policy) {
  const auto& ix = policy.indexer();
  std::string out = "{\"context_model\":\"";
  out += to_string(ix.mode());
  out += "\",\"Q\":" + std::to_string(ix.prompt_count()) + ",\"T\":" + std::to_string(ix.horizon()) +
         ",\"V\":" + std::to_string(ix.vocab());
  if (ix.mode() == ContextModel::Prefix) {
    out += ",\"prefix_cap\":" + std::to_string(ix.prefix_cap()) + ",\"keys\":[";
    for (StateId s = 0; s < ix.size(); ++s) {
      auto k = ix.key(s);
      out += (s ? ",[" : "[") + std::to_string(k.prompt);
      for (Token t : k.prefix) out += "," + std::to_string(t);
      out += "]";
    }
    out += "]";
  }
  out += ",\"logits\":[";
  auto raw = policy.raw();
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (i) out += ",";
    out += format_double(raw[i]);
  }
  out += "]}";
  return out;
}

inline PolicyTable policy_from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  auto mode = context_model_from_string(j.at("context_model").get<std::string>());
  const auto Q = j.at("Q").get<std::size_t>();
  const auto T = j.at("T").get<std::size_t>();
  const auto V = j.at("V").get<std::size_t>();
  std::size_t cap = mode == ContextModel::Prefix ? j.at("prefix_cap").get<std::size_t>() : 0;
  ContextIndexer ix(mode, Q, T, V, cap);
  if (mode == ContextModel::Prefix) {
    for (const auto& k : j.at("keys")) {
      auto v = k.get<std::vector<Token>>();
      if (v.empty()) throw std::invalid_argument("policy_from_json: empty state key");
      Sequence prefix(v.begin() + 1, v.end());
      auto [id, fresh] = ix.materialize(static_cast<std::size_t>(v[0]), prefix);
      if (!fresh) throw std::invalid_argument("policy_from_json: duplicate state key");
      (void)id;
    }
  }
  return PolicyTable(std::move(ix), j.at("logits").get<std::vector<double>>());
}

}  // namespace entlab
