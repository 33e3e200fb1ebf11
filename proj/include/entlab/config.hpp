#pragma once

#include <cstdint>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "entlab/errors.hpp"
#include "entlab/grpo.hpp"
#include "entlab/init.hpp"
#include "entlab/plugins.hpp"
#include "entlab/policy.hpp"
#include "entlab/steer.hpp"
#include "entlab/tasks.hpp"

namespace entlab {

inline constexpr int kSchemaVersion = 1;

/// Parameters of the sweep subcommands.
struct SweepConfig {
  std::vector<Quadrant> quadrants{Quadrant::I, Quadrant::II, Quadrant::III, Quadrant::IV};
  std::vector<InterventionMode> modes{InterventionMode::Mask, InterventionMode::Upweight2x};
  std::vector<double> fractions{0.1};
  std::vector<double> eps_high{0.2, 0.28};
  std::vector<double> eps_low{0.2, 0.4};
  bool include_extreme = true;  // adds eps_high=5, eps_low=0.99 to the clip grid
  std::size_t comparison_step = 150;
};

/// Experiment defaults: a prefix-context suite whose initial policy already
/// prefers one answer per prompt, trained with a step size large enough for
/// the ratios to leave the clip range and for entropy to collapse in 200 steps.
struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  TaskConfig task;
  InitConfig init{.noise = 1.5, .answer_bias = 6.0, .bias_decay = 0.7, .decoys = 1, .decoy_bias = 6.0};
  ContextModel context_model = ContextModel::Prefix;
  std::size_t prefix_cap = 200000;
  TrainerConfig trainer = [] {
    TrainerConfig t;
    t.learning_rate = 16.0;
    return t;
  }();
  std::size_t steps = 200;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  double ema_s = 0.4;
  std::size_t eval_rollouts = 32;
  std::size_t probe_steps = 10;
  SweepConfig sweep;

  void validate() const {
    if (schema_version != kSchemaVersion) throw ConfigError("schema_version", "unsupported schema version");
    if (task.vocab < 2) throw ConfigError("task.V", "must be at least 2");
    if (task.horizon < 1) throw ConfigError("task.T", "must be at least 1");
    if (task.prompts < 1) throw ConfigError("task.Q", "must be at least 1");
    if (task.k_min < 1 || task.k_min > task.k_max || task.k_max > task.vocab)
      throw ConfigError("task.k_max", "K-range must satisfy 1 <= k_min <= k_max <= V");
    if (!(init.noise >= 0.0)) throw ConfigError("task.init.noise", "must be nonnegative");
    trainer.validate();
    if (!(ema_s > 0.0 && ema_s <= 1.0)) throw ConfigError("ema_s", "must lie in (0, 1]");
    if (eval_rollouts < 2) throw ConfigError("eval.rollouts_per_prompt", "must be at least 2");
    if (probe_steps < 1) throw ConfigError("validation.probe_steps", "must be at least 1");
    if (seeds.empty()) throw ConfigError("seeds", "must list at least one seed");
    for (double f : sweep.fractions)
      if (!(f > 0.0 && f < 1.0)) throw ConfigError("sweep.fractions", "fractions must lie in (0, 1)");
  }
};

namespace detail {

class Reader {
 public:
  Reader(const nlohmann::json& j, std::string path, std::set<std::string> allowed)
      : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    for (const auto& [k, v] : j.items())
      if (!allowed.count(k)) throw ConfigError(at(k), "unknown field");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }
  const nlohmann::json& raw(const std::string& key) const { return j_.at(key); }

  template <class T>
  void get(const std::string& key, T& out) const {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(at(key), "expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.get<long long>() < 0))
        throw ConfigError(at(key), "expected a nonnegative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(at(key), "expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(at(key), "expected a string");
    }
    try {
      out = v.get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(at(key), e.what());
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
};

}  // namespace detail

inline SteerConfig steer_from_json(const nlohmann::json& j, const std::string& path = "steer") {
  detail::Reader r(j, path, {"mapping", "lambda_min", "lambda_max", "xi"});
  SteerConfig s;
  std::string mapping = "exponential";
  r.get("mapping", mapping);
  try {
    s.mapping = steer_mapping_from_string(mapping);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(r.at("mapping"), e.what());
  }
  r.get("lambda_min", s.lambda_min);
  r.get("lambda_max", s.lambda_max);
  r.get("xi", s.xi);
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path, e.what());
  }
  return s;
}

inline nlohmann::json steer_to_json(const SteerConfig& s) {
  return {{"mapping", to_string(s.mapping)},
          {"lambda_min", s.lambda_min},
          {"lambda_max", s.lambda_max},
          {"xi", s.xi}};
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::Reader;
  ExperimentConfig c;
  Reader root(j, "",
              {"schema_version", "task", "trainer", "clip", "plugins", "steer", "seeds", "ema_s",
               "eval", "validation", "sweep"});
  root.get("schema_version", c.schema_version);
  if (c.schema_version != kSchemaVersion) throw ConfigError("schema_version", "unsupported schema version");

  if (root.has("task")) {
    Reader t(root.raw("task"), "task", {"Q", "V", "T", "k_min", "k_max", "context_model", "prefix_cap", "init"});
    t.get("Q", c.task.prompts);
    t.get("V", c.task.vocab);
    t.get("T", c.task.horizon);
    t.get("k_min", c.task.k_min);
    t.get("k_max", c.task.k_max);
    std::string mode = to_string(c.context_model);
    t.get("context_model", mode);
    try {
      c.context_model = context_model_from_string(mode);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("task.context_model", e.what());
    }
    t.get("prefix_cap", c.prefix_cap);
    if (t.has("init")) {
      Reader i(t.raw("init"), "task.init",
               {"noise", "answer_bias", "bias_decay", "decoys", "decoy_bias", "offpath_bias"});
      i.get("noise", c.init.noise);
      i.get("answer_bias", c.init.answer_bias);
      i.get("bias_decay", c.init.bias_decay);
      i.get("decoys", c.init.decoys);
      i.get("decoy_bias", c.init.decoy_bias);
      i.get("offpath_bias", c.init.offpath_bias);
    }
  }
  if (root.has("trainer")) {
    Reader t(root.raw("trainer"), "trainer",
             {"G", "prompts_per_step", "minibatches", "learning_rate", "steps"});
    t.get("G", c.trainer.group_size);
    t.get("prompts_per_step", c.trainer.prompts_per_step);
    t.get("minibatches", c.trainer.minibatches);
    t.get("learning_rate", c.trainer.learning_rate);
    t.get("steps", c.steps);
  }
  if (root.has("clip")) {
    Reader t(root.raw("clip"), "clip", {"eps_high", "eps_low"});
    t.get("eps_high", c.trainer.clip.eps_high);
    t.get("eps_low", c.trainer.clip.eps_low);
  }
  if (root.has("plugins")) {
    const auto& arr = root.raw("plugins");
    if (!arr.is_array()) throw ConfigError("plugins", "expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i)
      c.trainer.plugins.push_back(plugin_from_json(arr[i], "plugins[" + std::to_string(i) + "]"));
  }
  if (root.has("steer")) c.trainer.steer = steer_from_json(root.raw("steer"));
  if (root.has("seeds")) {
    c.seeds.clear();
    const auto& arr = root.raw("seeds");
    if (!arr.is_array()) throw ConfigError("seeds", "expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      if (!arr[i].is_number_integer() || arr[i].get<long long>() < 0)
        throw ConfigError("seeds[" + std::to_string(i) + "]", "expected a nonnegative integer");
      c.seeds.push_back(arr[i].get<std::uint64_t>());
    }
  }
  root.get("ema_s", c.ema_s);
  if (root.has("eval")) {
    Reader e(root.raw("eval"), "eval", {"rollouts_per_prompt"});
    e.get("rollouts_per_prompt", c.eval_rollouts);
  }
  if (root.has("validation")) {
    Reader v(root.raw("validation"), "validation", {"probe_steps"});
    v.get("probe_steps", c.probe_steps);
  }
  if (root.has("sweep")) {
    Reader s(root.raw("sweep"), "sweep",
             {"quadrants", "modes", "fractions", "eps_high", "eps_low", "include_extreme", "comparison_step"});
    if (s.has("quadrants")) {
      c.sweep.quadrants.clear();
      std::vector<std::string> names;
      s.get("quadrants", names);
      for (const auto& n : names) {
        try {
          c.sweep.quadrants.push_back(quadrant_from_string(n));
        } catch (const std::invalid_argument& e) {
          throw ConfigError("sweep.quadrants", e.what());
        }
      }
    }
    if (s.has("modes")) {
      c.sweep.modes.clear();
      std::vector<std::string> names;
      s.get("modes", names);
      for (const auto& n : names) {
        if (n == "mask")
          c.sweep.modes.push_back(InterventionMode::Mask);
        else if (n == "upweight2x")
          c.sweep.modes.push_back(InterventionMode::Upweight2x);
        else
          throw ConfigError("sweep.modes", "expected 'mask' or 'upweight2x'");
      }
    }
    s.get("fractions", c.sweep.fractions);
    s.get("eps_high", c.sweep.eps_high);
    s.get("eps_low", c.sweep.eps_low);
    s.get("include_extreme", c.sweep.include_extreme);
    s.get("comparison_step", c.sweep.comparison_step);
  }
  c.validate();
  return c;
}

/// Canonical serialization; every field is written so the config alone
/// reproduces a run.
inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json plugins = nlohmann::json::array();
  for (const auto& p : c.trainer.plugins) plugins.push_back(plugin_to_json(p));
  std::vector<std::string> quadrants, modes;
  for (auto q : c.sweep.quadrants) quadrants.push_back(to_string(q));
  for (auto m : c.sweep.modes) modes.push_back(m == InterventionMode::Mask ? "mask" : "upweight2x");
  nlohmann::json j = {
      {"schema_version", c.schema_version},
      {"task",
       {{"Q", c.task.prompts},
        {"V", c.task.vocab},
        {"T", c.task.horizon},
        {"k_min", c.task.k_min},
        {"k_max", c.task.k_max},
        {"context_model", to_string(c.context_model)},
        {"prefix_cap", c.prefix_cap},
        {"init",
         {{"noise", c.init.noise},
          {"answer_bias", c.init.answer_bias},
          {"bias_decay", c.init.bias_decay},
          {"decoys", c.init.decoys},
          {"decoy_bias", c.init.decoy_bias},
          {"offpath_bias", c.init.offpath_bias}}}}},
      {"trainer",
       {{"G", c.trainer.group_size},
        {"prompts_per_step", c.trainer.prompts_per_step},
        {"minibatches", c.trainer.minibatches},
        {"learning_rate", c.trainer.learning_rate},
        {"steps", c.steps}}},
      {"clip", {{"eps_high", c.trainer.clip.eps_high}, {"eps_low", c.trainer.clip.eps_low}}},
      {"plugins", plugins},
      {"steer", c.trainer.steer ? steer_to_json(*c.trainer.steer) : nlohmann::json(nullptr)},
      {"seeds", c.seeds},
      {"ema_s", c.ema_s},
      {"eval", {{"rollouts_per_prompt", c.eval_rollouts}}},
      {"validation", {{"probe_steps", c.probe_steps}}},
      {"sweep",
       {{"quadrants", quadrants},
        {"modes", modes},
        {"fractions", c.sweep.fractions},
        {"eps_high", c.sweep.eps_high},
        {"eps_low", c.sweep.eps_low},
        {"include_extreme", c.sweep.include_extreme},
        {"comparison_step", c.sweep.comparison_step}}}};
  return j;
}

// FNV-1a over the canonical dump.
inline std::string config_hash(const ExperimentConfig& c) {
  const std::string s = config_to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace entlab
