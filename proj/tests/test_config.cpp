#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "entlab/config.hpp"

using namespace entlab;
using nlohmann::json;

namespace {

std::string field_of(const json& j) {
  try {
    config_from_json(j);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "<accepted>";
}

}  // namespace

TEST(Config, EmptyObjectGivesDefaults) {
  const auto c = config_from_json(json::object());
  const ExperimentConfig d;
  EXPECT_EQ(config_to_json(c), config_to_json(d));
  EXPECT_EQ(c.steps, 200u);
  EXPECT_EQ(c.trainer.group_size, 8u);
  EXPECT_EQ(c.ema_s, 0.4);
  EXPECT_EQ(c.eval_rollouts, 32u);
  EXPECT_EQ(c.probe_steps, 10u);
  EXPECT_EQ(c.sweep.comparison_step, 150u);
  EXPECT_FALSE(c.trainer.steer.has_value());
}

TEST(Config, RoundTripThroughCanonicalJson) {
  json j = {{"schema_version", 1},
            {"task", {{"Q", 6}, {"V", 10}, {"T", 5}, {"k_min", 1}, {"k_max", 3}, {"context_model", "prefix"},
                      {"prefix_cap", 5000}, {"init", {{"noise", 0.5}, {"decoys", 2}}}}},
            {"trainer", {{"G", 4}, {"prompts_per_step", 12}, {"minibatches", 3}, {"learning_rate", 2.5}, {"steps", 17}}},
            {"clip", {{"eps_high", 0.28}, {"eps_low", 0.4}}},
            {"plugins", {{{"kind", "entropy_advantage"}, {"alpha", 0.2}, {"kappa", 2.0}}, {{"kind", "psr_mask"}}}},
            {"steer", {{"mapping", "binary"}, {"lambda_min", 0.6}, {"xi", 0.9}}},
            {"seeds", {3, 1, 4}},
            {"ema_s", 0.5},
            {"eval", {{"rollouts_per_prompt", 16}}},
            {"validation", {{"probe_steps", 3}}},
            {"sweep", {{"quadrants", {"II", "IV"}}, {"modes", {"upweight2x"}}, {"fractions", {0.05, 0.2}},
                       {"include_extreme", false}, {"comparison_step", 12}}}};
  const auto c = config_from_json(j);
  EXPECT_EQ(c.task.prompts, 6u);
  EXPECT_EQ(c.context_model, ContextModel::Prefix);
  EXPECT_EQ(c.init.decoys, 2u);
  EXPECT_EQ(c.trainer.minibatches, 3u);
  EXPECT_EQ(c.steps, 17u);
  EXPECT_EQ(c.trainer.plugins.size(), 2u);
  ASSERT_TRUE(c.trainer.steer.has_value());
  EXPECT_EQ(c.trainer.steer->mapping, SteerMapping::Binary);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{3, 1, 4}));
  EXPECT_EQ(c.sweep.quadrants, (std::vector<Quadrant>{Quadrant::II, Quadrant::IV}));
  EXPECT_FALSE(c.sweep.include_extreme);

  const auto canon = config_to_json(c);
  const auto again = config_from_json(canon);
  EXPECT_EQ(config_to_json(again), canon);
  EXPECT_EQ(config_hash(again), config_hash(c));
}

TEST(Config, HashIsFnv1aOfCanonicalDump) {
  const ExperimentConfig c;
  const auto s = config_to_json(c).dump();
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char ch : s) h = (h ^ ch) * 1099511628211ULL;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  EXPECT_EQ(config_hash(c), buf);
  EXPECT_EQ(config_hash(c).size(), 16u);
}

TEST(Config, HashChangesWithAnyField) {
  ExperimentConfig a, b;
  b.trainer.learning_rate *= 1.0000001;
  EXPECT_NE(config_hash(a), config_hash(b));
  b = a;
  b.seeds.push_back(99);
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_EQ(field_of({{"schema_version", 2}}), "schema_version");
  EXPECT_EQ(field_of({{"bogus", 1}}), "bogus");
  EXPECT_EQ(field_of({{"task", {{"Vocab", 3}}}}), "task.Vocab");
  EXPECT_EQ(field_of({{"task", {{"V", "sixteen"}}}}), "task.V");
  EXPECT_EQ(field_of({{"task", {{"V", -3}}}}), "task.V");
  EXPECT_EQ(field_of({{"task", {{"context_model", "tree"}}}}), "task.context_model");
  EXPECT_EQ(field_of({{"task", {{"init", {{"noise", -1.0}}}}}}), "task.init.noise");
  EXPECT_EQ(field_of({{"task", {{"init", {{"spice", 1.0}}}}}}), "task.init.spice");
  EXPECT_EQ(field_of({{"task", {{"k_min", 5}, {"k_max", 2}}}}), "task.k_max");
  EXPECT_EQ(field_of({{"trainer", {{"minibatches", 5}}}}), "trainer.minibatches");
  EXPECT_EQ(field_of({{"trainer", {{"learning_rate", "fast"}}}}), "trainer.learning_rate");
  EXPECT_EQ(field_of({{"clip", {{"eps_low", 1.5}}}}), "clip");
  EXPECT_EQ(field_of({{"plugins", {{{"kind", "psr_mask"}}, {{"kind", "teleport"}}}}}), "plugins[1].kind");
  EXPECT_EQ(field_of({{"plugins", {{{"kind", "w_reinforce"}, {"lambda", 2.0}}}}}), "plugins[0].lambda");
  EXPECT_EQ(field_of({{"plugins", 3}}), "plugins");
  EXPECT_EQ(field_of({{"steer", {{"mapping", "cubic"}}}}), "steer.mapping");
  EXPECT_EQ(field_of({{"steer", {{"lambda_min", 0.0}}}}), "steer");
  EXPECT_EQ(field_of({{"seeds", {1, -2}}}), "seeds[1]");
  EXPECT_EQ(field_of({{"seeds", json::array()}}), "seeds");
  EXPECT_EQ(field_of({{"ema_s", 0.0}}), "ema_s");
  EXPECT_EQ(field_of({{"eval", {{"rollouts_per_prompt", 1}}}}), "eval.rollouts_per_prompt");
  EXPECT_EQ(field_of({{"validation", {{"probe_steps", 0}}}}), "validation.probe_steps");
  EXPECT_EQ(field_of({{"sweep", {{"quadrants", {"V"}}}}}), "sweep.quadrants");
  EXPECT_EQ(field_of({{"sweep", {{"modes", {"triple"}}}}}), "sweep.modes");
  EXPECT_EQ(field_of({{"sweep", {{"fractions", {1.2}}}}}), "sweep.fractions");
  EXPECT_EQ(field_of(json::array()), "<root>");
}

TEST(Config, MessagesIncludeTheField) {
  try {
    config_from_json({{"plugins", {{{"kind", "teleport"}}}}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("plugins[0].kind"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("teleport"), std::string::npos);
  }
}

TEST(Config, NullSteerMeansNone) {
  const auto c = config_from_json({{"steer", nullptr}});
  EXPECT_FALSE(c.trainer.steer.has_value());
}

TEST(Config, ShippedConfigsLoad) {
  std::size_t n = 0;
  for (const auto& e : std::filesystem::directory_iterator(ENTLAB_CONFIG_DIR)) {
    if (e.path().extension() != ".json") continue;
    std::ifstream f(e.path());
    EXPECT_NO_THROW(config_from_json(json::parse(f))) << e.path();
    ++n;
  }
  EXPECT_GE(n, 8u);
}

TEST(Config, DefaultJsonMatchesDefaults) {
  std::ifstream f(std::filesystem::path(ENTLAB_CONFIG_DIR) / "default.json");
  EXPECT_EQ(config_hash(config_from_json(json::parse(f))), config_hash(ExperimentConfig{}));
}
