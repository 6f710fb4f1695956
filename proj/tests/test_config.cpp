#include <filesystem>
#include <fstream>

#include "dit/config.hpp"
#include "doctest.h"

using namespace dit;
using nlohmann::json;

TEST_CASE("an empty config is the default run") {
  const RunConfig c = RunConfig::from_json(json::object());
  CHECK(c.model.vit.depth == 12);
  CHECK(c.model.vit.hidden == 768);
  CHECK(c.model.tokenizer.codebook_size == 8192);
  CHECK(c.task.mask_ratio == 0.4);
  CHECK(c.schedule.pretrain.batch == 2048);
  CHECK(c.schedule.detect.lr == doctest::Approx(1e-4f));
  CHECK(c.optimizer.layer_decay == doctest::Approx(0.75f));
  CHECK(c.task.categories == std::vector<int>{4, 5});
}

TEST_CASE("unknown keys are rejected at every level") {
  CHECK_THROWS_AS(RunConfig::from_json(json{{"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json{{"data", {{"bogus", 1}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json{{"model", {{"vit", {{"layers", 3}}}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json{{"schedule", {{"pretrain", {{"epoch", 3}}}}}}), ConfigError);
}

TEST_CASE("type and range errors") {
  CHECK_THROWS_AS(RunConfig::from_json(json{{"data", {{"n", "many"}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json{{"task", {{"mask_ratio", 1.5}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json{{"task", {{"anchors", "round"}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json{{"model", {{"vit", {{"preset", "huge"}}}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json{{"model", {{"vit", {{"hidden", 100}, {"heads", 3}}}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json{{"schedule", {{"classify", {{"lr", -1.0}}}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json::array()), ConfigError);
}

TEST_CASE("presets then overrides") {
  const RunConfig c = RunConfig::from_json(
      json{{"model", {{"vit", {{"preset", "tiny"}, {"depth", 6}}}, {"tokenizer", {{"preset", "tiny"}}}}}});
  CHECK(c.model.vit.hidden == 64);
  CHECK(c.model.vit.depth == 6);
  CHECK(c.model.tokenizer.codebook_size == 64);
}

TEST_CASE("JSON roundtrip keeps the hash; any change moves it") {
  const RunConfig a = RunConfig::from_json(json{{"data", {{"n", 10}}}, {"task", {{"seed", 3}}}});
  const RunConfig b = RunConfig::from_json(a.to_json());
  CHECK(a.to_json() == b.to_json());
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 8);
  RunConfig c = a;
  c.task.seed = 4;
  CHECK(c.hash() != a.hash());
}

TEST_CASE("load reports bad files as config errors") {
  const auto dir = std::filesystem::temp_directory_path();
  CHECK_THROWS_AS(RunConfig::load(dir / "dit_no_such_config.json"), ConfigError);
  const auto bad = dir / "dit_bad_config.json";
  std::ofstream(bad) << "{ not json";
  CHECK_THROWS_AS(RunConfig::load(bad), ConfigError);
}

TEST_CASE("the shipped tiny config parses") {
  const RunConfig c = RunConfig::load(std::filesystem::path(DIT_SOURCE_DIR) / "configs" / "tiny.json");
  CHECK(c.model.vit_preset == "tiny");
}
