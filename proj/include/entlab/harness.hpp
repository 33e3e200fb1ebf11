#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <istream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "entlab/config.hpp"
#include "entlab/entropy.hpp"
#include "entlab/errors.hpp"
#include "entlab/grpo.hpp"
#include "entlab/init.hpp"
#include "entlab/steer.hpp"
#include "entlab/tasks.hpp"

namespace entlab {

/// y_0 = x_0, y_t = s x_t + (1 - s) y_{t-1}.
inline std::vector<double> ema(std::span<const double> series, double s) {
  if (series.empty()) throw std::invalid_argument("ema: empty series");
  if (!(s > 0.0 && s <= 1.0)) throw std::invalid_argument("ema: s must lie in (0, 1]");
  std::vector<double> y(series.size());
  y[0] = series[0];
  for (std::size_t t = 1; t < series.size(); ++t) y[t] = s * series[t] + (1.0 - s) * y[t - 1];
  return y;
}

/// Metrics after `step` updates. Row 0 describes the initial policy and has
/// no training statistics.
struct MetricsRow {
  std::size_t step = 0;
  double entropy = 0.0;  // policy entropy on the held-out rollouts
  double entropy_ema = 0.0;
  double entropy_change = 0.0;  // on the step's own rollouts, after minus before
  double accuracy = 0.0;        // held-out
  double train_accuracy = 0.0;
  double answer_coverage = 0.0;  // held-out
  double mean_abs_omega = 0.0;
  std::size_t clip_low = 0, clip_mid = 0, clip_high = 0;
  std::array<double, 4> quadrant{};
  double lambda_min = 1.0, lambda_median = 1.0, lambda_mean = 1.0;
  std::size_t steer_minibatches = 0;
  std::size_t steer_min_exact = 0;
  std::size_t minibatches = 0;
  std::size_t degenerate_groups = 0;
};

struct MetricsLog {
  std::string run_id;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<std::string> plugins;
  std::vector<MetricsRow> rows;
  double wall_seconds = 0.0;  // informational; never serialized

  std::vector<double> series(double MetricsRow::*field) const {
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(r.*field);
    return out;
  }
};

inline nlohmann::json row_to_json(const MetricsRow& r, const std::vector<std::string>& plugins) {
  return {{"step", r.step},
          {"entropy", r.entropy},
          {"entropy_ema", r.entropy_ema},
          {"entropy_change", r.entropy_change},
          {"accuracy", r.accuracy},
          {"train_accuracy", r.train_accuracy},
          {"answer_coverage", r.answer_coverage},
          {"mean_abs_omega", r.mean_abs_omega},
          {"clip_low", r.clip_low},
          {"clip_mid", r.clip_mid},
          {"clip_high", r.clip_high},
          {"q1", r.quadrant[0]},
          {"q2", r.quadrant[1]},
          {"q3", r.quadrant[2]},
          {"q4", r.quadrant[3]},
          {"lambda_min", r.lambda_min},
          {"lambda_median", r.lambda_median},
          {"lambda_mean", r.lambda_mean},
          {"steer_minibatches", r.steer_minibatches},
          {"steer_min_exact", r.steer_min_exact},
          {"minibatches", r.minibatches},
          {"degenerate_groups", r.degenerate_groups},
          {"plugins", plugins}};
}

inline std::string log_to_jsonl(const MetricsLog& log) {
  std::string out;
  for (const auto& r : log.rows) out += row_to_json(r, log.plugins).dump() + "\n";
  return out;
}

struct EvalResult {
  double entropy = 0.0;
  double accuracy = 0.0;
  double coverage = 0.0;
};

/// Fresh rollouts from every prompt at the current policy.
inline EvalResult evaluate(PolicyTable& policy, const TaskSuite& suite, std::size_t rollouts,
                           std::uint64_t seed, std::size_t step) {
  std::vector<RolloutGroup> groups;
  groups.reserve(suite.size());
  std::size_t correct = 0, total = 0;
  for (std::size_t q = 0; q < suite.size(); ++q) {
    Rng rng(derive_seed(seed, Stream::Eval, {step, q}));
    groups.push_back(generate_rollouts(policy, suite.prompt(q), rollouts, rng));
    for (double r : groups.back().rewards) {
      correct += r > 0.0;
      ++total;
    }
  }
  EvalResult e;
  e.entropy = policy_entropy(policy, groups);
  e.accuracy = static_cast<double>(correct) / static_cast<double>(total);
  e.coverage = answer_coverage(groups, suite);
  return e;
}

struct RunState {
  TaskSuite suite;
  PolicyTable policy;
  PolicyTable reference;
};

inline RunState initial_state(const ExperimentConfig& cfg, std::uint64_t seed) {
  auto suite = make_task(seed, cfg.task);
  auto policy = make_initial_policy(suite, cfg.init, cfg.context_model, cfg.prefix_cap, seed);
  auto reference = policy;
  return RunState{std::move(suite), std::move(policy), std::move(reference)};
}

using RowSink = std::function<void(const MetricsRow&)>;

/// Runs cfg.steps training steps. Each row is handed to `sink` as soon as it
/// is complete, so a StepAborted leaves the sink holding every finished row.
inline MetricsLog run_training(const ExperimentConfig& cfg, std::uint64_t seed,
                               const RowSink& sink = {}) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  MetricsLog log;
  log.seed = seed;
  log.config_hash = config_hash(cfg);
  for (const auto& p : cfg.trainer.plugins) log.plugins.push_back(kind_of(p));

  auto st = initial_state(cfg, seed);
  auto push = [&](MetricsRow row) {
    row.entropy_ema = log.rows.empty()
                          ? row.entropy
                          : cfg.ema_s * row.entropy + (1.0 - cfg.ema_s) * log.rows.back().entropy_ema;
    log.rows.push_back(row);
    if (sink) sink(log.rows.back());
  };

  {
    const auto e = evaluate(st.policy, st.suite, cfg.eval_rollouts, seed, 0);
    MetricsRow row;
    row.entropy = e.entropy;
    row.accuracy = e.accuracy;
    row.answer_coverage = e.coverage;
    push(row);
  }
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    StepContext ctx{seed, step, &st.reference, nullptr};
    const auto res = train_step(st.policy, st.suite, cfg.trainer, ctx);
    const auto& rep = res.report;
    const auto e = evaluate(st.policy, st.suite, cfg.eval_rollouts, seed, step + 1);
    MetricsRow row;
    row.step = step + 1;
    row.entropy = e.entropy;
    row.accuracy = e.accuracy;
    row.answer_coverage = e.coverage;
    row.entropy_change = rep.entropy_after - rep.entropy_before;
    row.train_accuracy = rep.accuracy;
    row.mean_abs_omega = rep.mean_abs_omega;
    row.clip_low = rep.clip_counts[0];
    row.clip_mid = rep.clip_counts[1];
    row.clip_high = rep.clip_counts[2];
    row.quadrant = rep.quadrant_fraction;
    row.lambda_min = rep.lambda_min;
    row.lambda_median = rep.lambda_median;
    row.lambda_mean = rep.lambda_mean;
    row.steer_minibatches = rep.steer_minibatches;
    row.steer_min_exact = rep.steer_min_exact;
    row.minibatches = rep.minibatches;
    row.degenerate_groups = rep.degenerate_groups;
    push(row);
  }
  log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return log;
}

// ---------------------------------------------------------------------------
// Estimator validation.

/// One (mini-batch, state) pair: the summed first-order estimates of every
/// token at that state against the exact entropy change of the update.
struct FidelityPair {
  std::size_t step = 0;
  std::size_t minibatch = 0;
  StateId state = 0;
  std::size_t tokens = 0;
  double omega = 0.0;
  double delta_h_true = 0.0;
  double delta_h_taylor = 0.0;  // exact first-order term of the actual displacement
  Quadrant quadrant = Quadrant::None;  // of the token with the largest |omega|
};

struct ValidationResult {
  FidelityReport report;
  std::vector<FidelityPair> pairs;
  double mean_taylor_residual = 0.0;  // mean |delta_h_true - delta_h_taylor|
};

inline std::vector<FidelityPair> collect_pairs(const MinibatchView& v, std::size_t step) {
  std::map<StateId, FidelityPair> by_state;
  std::map<StateId, double> best;
  for (const auto& r : v.records) {
    auto& p = by_state[r.state_id];
    p.step = step;
    p.minibatch = v.index;
    p.state = r.state_id;
    ++p.tokens;
    const double w = r.omega.value_or(0.0);
    p.omega += w;
    auto [it, fresh] = best.emplace(r.state_id, std::abs(w));
    if (fresh || std::abs(w) > it->second) {
      it->second = std::abs(w);
      p.quadrant = classify_quadrant(r.advantage, r.delta);
    }
  }
  std::vector<StateId> states;
  for (const auto& [s, p] : by_state) states.push_back(s);
  const auto dh = exact_entropy_change(v.before, v.after, states);
  std::vector<std::vector<double>> disp;
  disp.reserve(states.size());
  for (StateId s : states) {
    std::vector<double> d(v.before.vocab());
    const auto a = v.after.logits(s);
    const auto b = v.before.logits(s);
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = a[k] - b[k];
    disp.push_back(std::move(d));
  }
  const auto taylor = first_order_taylor(v.before, disp, states);
  std::vector<FidelityPair> out;
  out.reserve(states.size());
  for (std::size_t i = 0; i < states.size(); ++i) {
    auto p = by_state[states[i]];
    p.delta_h_true = dh[i];
    p.delta_h_taylor = taylor[i];
    out.push_back(p);
  }
  return out;
}

/// Trains for `probe_steps` steps, snapshotting every mini-batch update.
inline ValidationResult run_estimator_validation(const ExperimentConfig& cfg, std::uint64_t seed,
                                                 std::size_t probe_steps) {
  if (probe_steps < 1) throw std::invalid_argument("run_estimator_validation: probe_steps must be >= 1");
  cfg.validate();
  auto st = initial_state(cfg, seed);
  ValidationResult res;
  std::size_t current_step = 0;
  MinibatchObserver obs = [&](const MinibatchView& v) {
    auto pairs = collect_pairs(v, current_step);
    res.pairs.insert(res.pairs.end(), pairs.begin(), pairs.end());
  };
  for (std::size_t step = 0; step < probe_steps; ++step) {
    current_step = step;
    StepContext ctx{seed, step, &st.reference, &obs};
    train_step(st.policy, st.suite, cfg.trainer, ctx);
  }
  std::vector<double> om, dh;
  double resid = 0.0;
  for (const auto& p : res.pairs) {
    om.push_back(p.omega);
    dh.push_back(p.delta_h_true);
    resid += std::abs(p.delta_h_true - p.delta_h_taylor);
  }
  if (res.pairs.size() >= 2) res.report = fidelity(om, dh);
  if (!res.pairs.empty()) res.mean_taylor_residual = resid / static_cast<double>(res.pairs.size());
  return res;
}

/// Pools several validation results into one report.
inline FidelityReport pooled_fidelity(std::span<const ValidationResult> results) {
  std::vector<double> om, dh;
  for (const auto& r : results)
    for (const auto& p : r.pairs) {
      om.push_back(p.omega);
      dh.push_back(p.delta_h_true);
    }
  return fidelity(om, dh);
}

inline std::string pairs_to_csv(std::span<const FidelityPair> pairs) {
  std::string out = "step,minibatch,state,tokens,omega_hat,delta_h_true,delta_h_taylor,quadrant\n";
  for (const auto& p : pairs)
    out += std::to_string(p.step) + "," + std::to_string(p.minibatch) + "," + std::to_string(p.state) + "," +
           std::to_string(p.tokens) + "," + format_double(p.omega) + "," + format_double(p.delta_h_true) +
           "," + format_double(p.delta_h_taylor) + "," + to_string(p.quadrant) + "\n";
  return out;
}

inline nlohmann::json fidelity_to_json(const FidelityReport& r) {
  return {{"mse", r.mse},
          {"pcc", r.pcc ? nlohmann::json(*r.pcc) : nlohmann::json(nullptr)},
          {"srcc", r.srcc ? nlohmann::json(*r.srcc) : nlohmann::json(nullptr)},
          {"n", r.n}};
}

// ---------------------------------------------------------------------------
// Sweeps.

struct RunSpec {
  std::string run_id;
  ExperimentConfig config;
};

inline std::string fmt_param(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", x);
  return buf;
}

inline RunSpec baseline_spec(const ExperimentConfig& base) { return RunSpec{"baseline", base}; }

/// Baseline plus one run per (quadrant, mode, fraction).
inline std::vector<RunSpec> quadrant_sweep_specs(const ExperimentConfig& base,
                                                 std::span<const Quadrant> quadrants,
                                                 std::span<const InterventionMode> modes,
                                                 std::span<const double> fractions) {
  std::vector<RunSpec> out{baseline_spec(base)};
  for (Quadrant q : quadrants)
    for (InterventionMode m : modes)
      for (double f : fractions) {
        if (!(f > 0.0 && f < 1.0)) throw ConfigError("sweep.fractions", "fractions must lie in (0, 1)");
        RunSpec r{std::string(m == InterventionMode::Mask ? "mask" : "upweight2x") + "_q" + to_string(q) +
                      "_f" + fmt_param(f),
                  base};
        QuadrantIntervention qi;
        qi.quadrant = q;
        qi.fraction = f;
        qi.mode = m;
        r.config.trainer.plugins.push_back(qi);
        r.config.validate();
        out.push_back(std::move(r));
      }
  return out;
}

/// Full eps_high x eps_low grid, plus the near-unclipped extreme point when
/// requested and not already on the grid.
inline std::vector<RunSpec> clip_sweep_specs(const ExperimentConfig& base, std::span<const double> eps_high,
                                             std::span<const double> eps_low, bool include_extreme) {
  std::vector<std::pair<double, double>> grid;
  for (double h : eps_high)
    for (double l : eps_low) grid.emplace_back(h, l);
  if (include_extreme && std::find(grid.begin(), grid.end(), std::make_pair(5.0, 0.99)) == grid.end())
    grid.emplace_back(5.0, 0.99);
  std::vector<RunSpec> out;
  for (auto [h, l] : grid) {
    RunSpec r{"clip_h" + fmt_param(h) + "_l" + fmt_param(l), base};
    r.config.trainer.clip = ClipConfig{h, l};
    try {
      r.config.trainer.clip.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError("sweep", e.what());
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<RunSpec> psr_nsr_specs(const ExperimentConfig& base) {
  std::vector<RunSpec> out{RunSpec{"grpo", base}, RunSpec{"psr", base}, RunSpec{"nsr", base}};
  out[1].config.trainer.plugins.push_back(PSRMask{});
  out[2].config.trainer.plugins.push_back(NSRMask{});
  for (auto& r : out) r.config.validate();
  return out;
}

inline std::vector<RunSpec> mapping_ablation_specs(const ExperimentConfig& base) {
  std::vector<RunSpec> out;
  for (SteerMapping m : {SteerMapping::Exponential, SteerMapping::Linear, SteerMapping::Binary}) {
    RunSpec r{std::string("steer_") + to_string(m), base};
    SteerConfig s = base.trainer.steer.value_or(SteerConfig{});
    s.mapping = m;
    s.lambda_min = 0.7;
    r.config.trainer.steer = s;
    r.config.validate();
    out.push_back(std::move(r));
  }
  return out;
}

/// Executes every (spec, seed) pair on up to `jobs` threads. Results are
/// ordered spec-major, seed-minor, regardless of completion order.
inline std::vector<MetricsLog> run_family(std::span<const RunSpec> specs, std::span<const std::uint64_t> seeds,
                                          std::size_t jobs = 1) {
  const std::size_t n = specs.size() * seeds.size();
  std::vector<MetricsLog> logs(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      const auto& spec = specs[i / seeds.size()];
      try {
        logs[i] = run_training(spec.config, seeds[i % seeds.size()]);
        logs[i].run_id = spec.run_id;
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return logs;
}

inline std::vector<MetricsLog> run_quadrant_sweep(const ExperimentConfig& base, Quadrant quadrant,
                                                  InterventionMode mode, std::span<const double> fractions,
                                                  std::uint64_t seed, std::size_t jobs = 1) {
  const Quadrant qs[] = {quadrant};
  const InterventionMode ms[] = {mode};
  const auto specs = quadrant_sweep_specs(base, qs, ms, fractions);
  const std::uint64_t seeds[] = {seed};
  return run_family(specs, seeds, jobs);
}

inline std::vector<MetricsLog> run_clip_sweep(const ExperimentConfig& base, std::span<const double> eps_high,
                                              std::span<const double> eps_low, std::uint64_t seed,
                                              bool include_extreme = true, std::size_t jobs = 1) {
  const auto specs = clip_sweep_specs(base, eps_high, eps_low, include_extreme);
  const std::uint64_t seeds[] = {seed};
  return run_family(specs, seeds, jobs);
}

// ---------------------------------------------------------------------------
// CSV outputs.

inline std::string summary_csv(std::span<const MetricsLog> logs) {
  std::string out =
      "run_id,seed,step,entropy,entropy_ema,accuracy,coverage,mean_abs_omega,clip_low,clip_mid,clip_high,"
      "q1,q2,q3,q4\n";
  for (const auto& log : logs)
    for (const auto& r : log.rows) {
      out += log.run_id + "," + std::to_string(log.seed) + "," + std::to_string(r.step);
      for (double v : {r.entropy, r.entropy_ema, r.accuracy, r.answer_coverage, r.mean_abs_omega})
        out += "," + format_double(v);
      for (std::size_t c : {r.clip_low, r.clip_mid, r.clip_high}) out += "," + std::to_string(c);
      for (double q : r.quadrant) out += "," + format_double(q);
      out += "\n";
    }
  return out;
}

/// delta over an n_p x n_h grid with p in (0, 1] and H in [0, ln V].
inline std::string delta_surface_csv(std::size_t n_p, std::size_t n_h, double h_max) {
  std::string out = "p,H,delta\n";
  for (std::size_t i = 1; i <= n_p; ++i) {
    const double p = static_cast<double>(i) / static_cast<double>(n_p);
    for (std::size_t j = 0; j < n_h; ++j) {
      const double H = h_max * static_cast<double>(j) / static_cast<double>(n_h - 1);
      out += format_double(p) + "," + format_double(H) + "," + format_double(delta_indicator(p, H)) + "\n";
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Offline analysis of token logs from another trainer.

struct IngestedToken {
  std::size_t line = 0;
  std::uint64_t batch = 0;
  double p = 0.0, advantage = 0.0, entropy = 0.0, ratio = 1.0, eta = 0.0;
  int clip_flag = 1;
  double delta = 0.0, omega = 0.0, lambda = 1.0;
  Quadrant quadrant = Quadrant::None;
};

struct IngestReport {
  std::vector<IngestedToken> tokens;
  nlohmann::json batches = nlohmann::json::array();
};

/// Reads one JSON object per line with fields p, advantage, entropy, ratio,
/// clip_flag and eta (the effective step size; an optional integer `batch`
/// groups records for the hypothetical STEER multipliers). Blank lines are
/// skipped.
inline IngestReport ingest_external_log(std::istream& in, const SteerConfig& steer = SteerConfig{}) {
  IngestReport rep;
  std::string text;
  std::size_t line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError(line_no, "expected a JSON object");
    auto num = [&](const char* key) {
      if (!j.contains(key)) throw ParseError(line_no, std::string("missing field '") + key + "'");
      if (!j.at(key).is_number()) throw ParseError(line_no, std::string("field '") + key + "' must be a number");
      const double v = j.at(key).get<double>();
      if (!std::isfinite(v)) throw ParseError(line_no, std::string("field '") + key + "' must be finite");
      return v;
    };
    IngestedToken t;
    t.line = line_no;
    t.p = num("p");
    t.advantage = num("advantage");
    t.entropy = num("entropy");
    t.ratio = num("ratio");
    t.eta = num("eta");
    const double flag = num("clip_flag");
    if (flag != 0.0 && flag != 1.0) throw ParseError(line_no, "field 'clip_flag' must be 0 or 1");
    t.clip_flag = static_cast<int>(flag);
    if (j.contains("batch")) {
      if (!j.at("batch").is_number_unsigned()) throw ParseError(line_no, "field 'batch' must be a nonnegative integer");
      t.batch = j.at("batch").get<std::uint64_t>();
    }
    if (!(t.p > 0.0 && t.p <= 1.0)) throw ParseError(line_no, "field 'p' must lie in (0, 1]");
    if (t.entropy < 0.0) throw ParseError(line_no, "field 'entropy' must be nonnegative");
    t.delta = delta_indicator(t.p, t.entropy);
    t.omega = omega_hat(t.clip_flag * t.ratio * t.advantage, t.p, t.entropy, t.eta);
    t.quadrant = classify_quadrant(t.advantage, t.delta);
    rep.tokens.push_back(t);
  }
  if (rep.tokens.empty()) throw ParseError(line_no, "no token records");

  std::map<std::uint64_t, std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < rep.tokens.size(); ++i) batches[rep.tokens[i].batch].push_back(i);
  for (const auto& [id, ix] : batches) {
    std::vector<double> om;
    for (auto i : ix) om.push_back(rep.tokens[i].omega);
    const auto lam = steer_weights(om, steer);
    std::array<std::size_t, 5> quad{};
    double abs_omega = 0.0, sum_omega = 0.0, lam_min = 1.0;
    for (std::size_t k = 0; k < ix.size(); ++k) {
      auto& t = rep.tokens[ix[k]];
      t.lambda = lam[k];
      ++quad[static_cast<int>(t.quadrant)];
      abs_omega += std::abs(t.omega);
      sum_omega += t.omega;
      lam_min = std::min(lam_min, t.lambda);
    }
    const double n = static_cast<double>(ix.size());
    rep.batches.push_back({{"batch", id},
                           {"tokens", ix.size()},
                           {"omega_sum", sum_omega},
                           {"mean_abs_omega", abs_omega / n},
                           {"lambda_min", lam_min},
                           {"q1", quad[1] / n},
                           {"q2", quad[2] / n},
                           {"q3", quad[3] / n},
                           {"q4", quad[4] / n},
                           {"none", quad[0] / n}});
  }
  return rep;
}

inline std::string ingest_tokens_jsonl(const IngestReport& rep) {
  std::string out;
  for (const auto& t : rep.tokens)
    out += nlohmann::json{{"line", t.line},
                          {"batch", t.batch},
                          {"delta", t.delta},
                          {"omega_hat", t.omega},
                          {"quadrant", to_string(t.quadrant)},
                          {"lambda", t.lambda}}
               .dump() +
           "\n";
  return out;
}

}  // namespace entlab
