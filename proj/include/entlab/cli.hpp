#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "entlab/config.hpp"
#include "entlab/errors.hpp"
#include "entlab/harness.hpp"

namespace entlab::cli {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { Ok = 0, ConfigFailure = 1, RuntimeAbort = 2 };

struct Command {
  std::string subcommand;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string input;
  std::size_t jobs = 1;
  bool force = false;
};

namespace fs = std::filesystem;

/// Collects every file a subcommand writes so the manifest can list them.
class OutputTree {
 public:
  explicit OutputTree(fs::path root) : root_(std::move(root)) {}

  const fs::path& root() const { return root_; }

  std::ofstream open(const std::string& rel) {
    const fs::path p = root_ / rel;
    fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    files_.push_back(rel);
    return f;
  }

  void write(const std::string& rel, const std::string& content) {
    auto f = open(rel);
    f << content;
  }

  const std::vector<std::string>& files() const { return files_; }

 private:
  fs::path root_;
  std::vector<std::string> files_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("--config", "cannot read '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline ExperimentConfig load_config(const std::string& path) {
  if (path.empty()) return ExperimentConfig{};
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<root>", std::string("invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline void prepare_out_dir(const Command& cmd) {
  if (cmd.out_dir.empty()) throw ConfigError("--out", "an output directory is required");
  const fs::path p(cmd.out_dir);
  if (fs::exists(p)) {
    if (!fs::is_directory(p)) throw ConfigError("--out", "'" + cmd.out_dir + "' is not a directory");
    if (!fs::is_empty(p) && !cmd.force)
      throw ConfigError("--out", "'" + cmd.out_dir + "' is not empty; pass --force to overwrite");
  }
  fs::create_directories(p);
}

inline std::vector<std::uint64_t> seeds_for(const Command& cmd, const ExperimentConfig& cfg) {
  if (cmd.seed) return {*cmd.seed};
  return cfg.seeds;
}

inline void write_manifest(OutputTree& out, const Command& cmd, const ExperimentConfig& cfg,
                           const std::vector<std::uint64_t>& seeds, const nlohmann::json& extra = {}) {
  nlohmann::json m = {{"artifact", "entlab"},
                      {"version", kVersion},
                      {"subcommand", cmd.subcommand},
                      {"config", config_to_json(cfg)},
                      {"config_hash", config_hash(cfg)},
                      {"seeds", seeds},
                      {"outputs", out.files()}};
  if (!extra.is_null())
    for (auto& [k, v] : extra.items()) m[k] = v;
  const fs::path p = out.root() / "manifest.json";
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << m.dump(2) << "\n";
}

inline std::string seed_tag(std::uint64_t seed) { return "seed" + std::to_string(seed); }

// ---------------------------------------------------------------------------

inline int cmd_train(const Command& cmd, OutputTree& out) {
  const auto cfg = load_config(cmd.config_path);
  const auto seeds = seeds_for(cmd, cfg);
  std::vector<MetricsLog> logs;
  for (auto seed : seeds) {
    const auto suite = make_task(seed, cfg.task);
    out.write("task_" + seed_tag(seed) + ".json", suite_to_json(suite).dump(2) + "\n");
    auto f = out.open("metrics_" + seed_tag(seed) + ".jsonl");
    std::vector<std::string> plugins;
    for (const auto& p : cfg.trainer.plugins) plugins.push_back(kind_of(p));
    RowSink sink = [&](const MetricsRow& r) { f << row_to_json(r, plugins).dump() << "\n" << std::flush; };
    auto log = run_training(cfg, seed, sink);
    log.run_id = "train";
    std::cerr << "train seed " << seed << ": " << log.rows.size() - 1 << " steps in " << log.wall_seconds
              << " s\n";
    logs.push_back(std::move(log));
  }
  out.write("summary.csv", summary_csv(logs));
  write_manifest(out, cmd, cfg, seeds);
  return Ok;
}

inline int cmd_validate(const Command& cmd, OutputTree& out) {
  const auto cfg = load_config(cmd.config_path);
  const auto seeds = seeds_for(cmd, cfg);
  std::vector<ValidationResult> results;
  nlohmann::json per_seed = nlohmann::json::array();
  for (auto seed : seeds) {
    auto r = run_estimator_validation(cfg, seed, cfg.probe_steps);
    out.write("pairs_" + seed_tag(seed) + ".csv", pairs_to_csv(r.pairs));
    per_seed.push_back({{"seed", seed},
                        {"fidelity", fidelity_to_json(r.report)},
                        {"mean_taylor_residual", r.mean_taylor_residual}});
    results.push_back(std::move(r));
  }
  nlohmann::json rep = {{"probe_steps", cfg.probe_steps}, {"per_seed", per_seed}};
  std::size_t pooled_n = 0;
  for (const auto& r : results) pooled_n += r.pairs.size();
  rep["pooled"] = pooled_n >= 2 ? fidelity_to_json(pooled_fidelity(results)) : nlohmann::json(nullptr);
  out.write("fidelity.json", rep.dump(2) + "\n");
  write_manifest(out, cmd, cfg, seeds);
  return Ok;
}

/// Mean EMA entropy at the comparison step per run, with the difference to
/// the first spec.
inline std::string comparison_csv(std::span<const RunSpec> specs, std::span<const MetricsLog> logs,
                                  std::size_t n_seeds, std::size_t step) {
  std::string out = "run_id,seeds,step,entropy_ema,delta_vs_" + specs.front().run_id +
                    ",accuracy_final,coverage_final\n";
  double reference = 0.0;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    double h = 0.0, acc = 0.0, cov = 0.0;
    for (std::size_t k = 0; k < n_seeds; ++k) {
      const auto& log = logs[i * n_seeds + k];
      const std::size_t s = std::min(step, log.rows.size() - 1);
      h += log.rows[s].entropy_ema;
      acc += log.rows.back().accuracy;
      cov += log.rows.back().answer_coverage;
    }
    const double n = static_cast<double>(n_seeds);
    h /= n;
    if (i == 0) reference = h;
    out += specs[i].run_id + "," + std::to_string(n_seeds) + "," + std::to_string(step) + "," + format_double(h) +
           "," + format_double(h - reference) + "," + format_double(acc / n) + "," + format_double(cov / n) + "\n";
  }
  return out;
}

inline int run_specs(const Command& cmd, OutputTree& out, const ExperimentConfig& cfg,
                     const std::vector<RunSpec>& specs) {
  const auto seeds = seeds_for(cmd, cfg);
  const auto logs = run_family(specs, seeds, cmd.jobs);
  for (std::size_t i = 0; i < logs.size(); ++i)
    out.write("runs/" + logs[i].run_id + "_" + seed_tag(logs[i].seed) + ".jsonl", log_to_jsonl(logs[i]));
  out.write("summary.csv", summary_csv(logs));
  const std::size_t step = std::min(cfg.sweep.comparison_step, cfg.steps);
  out.write("comparison.csv", comparison_csv(specs, logs, seeds.size(), step));
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& s : specs) runs.push_back({{"run_id", s.run_id}, {"config_hash", config_hash(s.config)}});
  write_manifest(out, cmd, cfg, seeds, {{"runs", runs}});
  return Ok;
}

inline int cmd_sweep_quadrant(const Command& cmd, OutputTree& out) {
  const auto cfg = load_config(cmd.config_path);
  return run_specs(cmd, out, cfg,
                   quadrant_sweep_specs(cfg, cfg.sweep.quadrants, cfg.sweep.modes, cfg.sweep.fractions));
}

inline int cmd_sweep_clip(const Command& cmd, OutputTree& out) {
  const auto cfg = load_config(cmd.config_path);
  return run_specs(cmd, out, cfg,
                   clip_sweep_specs(cfg, cfg.sweep.eps_high, cfg.sweep.eps_low, cfg.sweep.include_extreme));
}

inline int cmd_sweep_psr_nsr(const Command& cmd, OutputTree& out) {
  const auto cfg = load_config(cmd.config_path);
  return run_specs(cmd, out, cfg, psr_nsr_specs(cfg));
}

inline int cmd_ablate_mapping(const Command& cmd, OutputTree& out) {
  const auto cfg = load_config(cmd.config_path);
  return run_specs(cmd, out, cfg, mapping_ablation_specs(cfg));
}

inline int cmd_ingest(const Command& cmd, OutputTree& out) {
  if (cmd.input.empty()) throw ConfigError("--input", "a token log is required");
  std::ifstream in(cmd.input, std::ios::binary);
  if (!in) throw ConfigError("--input", "cannot read '" + cmd.input + "'");
  const auto cfg = load_config(cmd.config_path);
  SteerConfig steer = cfg.trainer.steer.value_or(SteerConfig{});
  steer.lambda_min = cfg.trainer.steer ? steer.lambda_min : 0.7;
  const auto rep = ingest_external_log(in, steer);
  out.write("tokens.jsonl", ingest_tokens_jsonl(rep));
  out.write("batches.json", rep.batches.dump(2) + "\n");
  write_manifest(out, cmd, cfg, {}, {{"input", cmd.input}, {"steer", steer_to_json(steer)}});
  return Ok;
}

/// Rebuilds the summary CSV from a directory of metrics JSONL files and
/// writes the delta surface grid.
inline int cmd_report(const Command& cmd, OutputTree& out) {
  const auto cfg = load_config(cmd.config_path);
  std::vector<MetricsLog> logs;
  if (!cmd.input.empty()) {
    if (!fs::is_directory(cmd.input)) throw ConfigError("--input", "'" + cmd.input + "' is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(cmd.input))
      if (e.is_regular_file() && e.path().extension() == ".jsonl") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
      MetricsLog log;
      log.run_id = fs::relative(p, cmd.input).replace_extension().generic_string();
      std::ifstream f(p);
      std::string line;
      std::size_t line_no = 0;
      while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
          j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
          throw ParseError(line_no, p.string() + ": " + e.what());
        }
        if (!j.contains("step") || !j.contains("entropy_ema")) continue;  // not a metrics file
        MetricsRow r;
        r.step = j.at("step").get<std::size_t>();
        r.entropy = j.value("entropy", 0.0);
        r.entropy_ema = j.value("entropy_ema", 0.0);
        r.accuracy = j.value("accuracy", 0.0);
        r.answer_coverage = j.value("answer_coverage", 0.0);
        r.mean_abs_omega = j.value("mean_abs_omega", 0.0);
        r.clip_low = j.value("clip_low", std::size_t{0});
        r.clip_mid = j.value("clip_mid", std::size_t{0});
        r.clip_high = j.value("clip_high", std::size_t{0});
        r.quadrant = {j.value("q1", 0.0), j.value("q2", 0.0), j.value("q3", 0.0), j.value("q4", 0.0)};
        log.rows.push_back(r);
      }
      if (!log.rows.empty()) logs.push_back(std::move(log));
    }
  }
  out.write("summary.csv", summary_csv(logs));
  out.write("delta_surface.csv", delta_surface_csv(200, 200, std::log(static_cast<double>(cfg.task.vocab))));
  write_manifest(out, cmd, cfg, {}, {{"input", cmd.input}});
  return Ok;
}

// ---------------------------------------------------------------------------

inline int dispatch(const Command& cmd, std::ostream& err = std::cerr) {
  try {
    prepare_out_dir(cmd);
    OutputTree out(cmd.out_dir);
    if (cmd.subcommand == "train") return cmd_train(cmd, out);
    if (cmd.subcommand == "validate-estimator") return cmd_validate(cmd, out);
    if (cmd.subcommand == "sweep-quadrant") return cmd_sweep_quadrant(cmd, out);
    if (cmd.subcommand == "sweep-clip") return cmd_sweep_clip(cmd, out);
    if (cmd.subcommand == "sweep-psr-nsr") return cmd_sweep_psr_nsr(cmd, out);
    if (cmd.subcommand == "ablate-mapping") return cmd_ablate_mapping(cmd, out);
    if (cmd.subcommand == "ingest") return cmd_ingest(cmd, out);
    if (cmd.subcommand == "report") return cmd_report(cmd, out);
    err << "error: unknown subcommand '" << cmd.subcommand << "'\n";
    return ConfigFailure;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return ConfigFailure;
  } catch (const ParseError& e) {
    err << "input error: " << e.what() << "\n";
    return ConfigFailure;
  } catch (const StepAborted& e) {
    err << "run aborted: " << e.what() << "\n";
    return RuntimeAbort;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return RuntimeAbort;
  }
}

inline int main(int argc, char** argv) {
  CLI::App app{"Token-level entropy dynamics laboratory for group policy-gradient training"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1, 1);
  Command cmd;
  const std::vector<std::pair<std::string, std::string>> subs = {
      {"train", "Train and log per-step metrics"},
      {"validate-estimator", "Compare first-order entropy estimates to exact changes"},
      {"sweep-quadrant", "Mask or upweight token quadrants against a baseline"},
      {"sweep-clip", "Grid over decoupled clip thresholds"},
      {"sweep-psr-nsr", "Compare GRPO with positive-only and negative-only training"},
      {"ablate-mapping", "Compare the exponential, linear and binary STEER mappings"},
      {"ingest", "Analyze a token log produced by another trainer"},
      {"report", "Summarize metrics files and write the delta surface"}};
  for (const auto& [name, help] : subs) {
    auto* sc = app.add_subcommand(name, help);
    sc->add_option("--config", cmd.config_path, "Run config JSON")->check(CLI::ExistingFile);
    sc->add_option("--seed", cmd.seed, "Run a single seed instead of the config's seed list");
    sc->add_option("--out", cmd.out_dir, "Output directory")->required();
    sc->add_option("--jobs", cmd.jobs, "Maximum concurrent runs")->check(CLI::PositiveNumber);
    sc->add_flag("--force", cmd.force, "Allow writing into a non-empty output directory");
    if (name == "ingest" || name == "report")
      sc->add_option("--input", cmd.input, name == "ingest" ? "Token log JSONL" : "Directory of metrics JSONL");
    sc->callback([&cmd, name = name] { cmd.subcommand = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? Ok : ConfigFailure;
  }
  return dispatch(cmd);
}

}  // namespace entlab::cli
