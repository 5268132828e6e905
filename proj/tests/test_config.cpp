#include <doctest.h>

#include <fstream>

#include "posediff/config.hpp"
#include "posediff/errors.hpp"
#include "support.hpp"

using namespace posediff;

TEST_CASE("empty object gives the defaults") {
  const auto c = parse_config_text("{}");
  CHECK(c.seed == 0);
  CHECK(c.diffusion.steps == 1000);
  CHECK(c.sampler.refresh_tail == 100);
  CHECK(c.model == DenoiserConfig{});
  CHECK(c.dataset.train_scenes == 64);
  CHECK(c.dataset.eval_scenes == 8);
  CHECK(c.training.steps == 2000);
  CHECK(serialize_config(c) == serialize_config(RunConfig{}));
}

TEST_CASE("values override defaults and survive a round trip") {
  const auto c = parse_config_text(R"({
    "seed": 7,
    "sampler": {"inference_steps": 50, "refresh_tail": 10},
    "model": {"base_channels": 16, "attention": "cross_view"},
    "training": {"learning_rate": 0.001, "batch_size": 4},
    "dataset": {"trajectory": {"lateral": 0.5}},
    "interpolate": {"anchors": [0, 3, 7]}
  })");
  CHECK(c.seed == 7);
  CHECK(c.sampler.inference_steps == 50);
  CHECK(c.sampler.refresh_tail == 10);
  CHECK(c.model.base_channels == 16);
  CHECK(c.model.attention == AttentionMode::cross_view);
  CHECK(c.training.adam.lr == 0.001);
  CHECK(c.training.batch_size == 4);
  CHECK(c.dataset.trajectory.lateral == 0.5);
  CHECK(c.interpolate.anchors == std::vector<std::size_t>{0, 3, 7});

  const auto text = serialize_config(c).dump();
  const auto again = parse_config_text(text);
  CHECK(serialize_config(again) == serialize_config(c));
  CHECK(config_hash(again) == config_hash(c));
  CHECK(config_hash(c) != config_hash(RunConfig{}));
  CHECK(config_hash(c).size() == 16);
}

TEST_CASE("fnv1a reference values") {
  CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("refresh tail beyond the inference steps is rejected") {
  CHECK_THROWS_AS(parse_config_text(R"({"sampler": {"inference_steps": 50, "refresh_tail": 51}})"), InvalidValue);
  CHECK_THROWS_AS(parse_config_text(R"({"sampler": {"inference_steps": 1001}})"), InvalidValue);
}

TEST_CASE("bad inputs raise typed errors") {
  CHECK_THROWS_AS(parse_config_text(R"({"sede": 1})"), UnknownKey);
  CHECK_THROWS_AS(parse_config_text(R"({"model": {"channels": 4}})"), UnknownKey);
  CHECK_THROWS_AS(parse_config_text(R"({"seed": -1})"), InvalidValue);
  CHECK_THROWS_AS(parse_config_text(R"({"seed": "one"})"), InvalidValue);
  CHECK_THROWS_AS(parse_config_text(R"({"model": {"attention": "dense"}})"), InvalidValue);
  CHECK_THROWS_AS(parse_config_text(R"({"model": {"groups": 5}})"), InvalidValue);
  CHECK_THROWS_AS(parse_config_text(R"({"model": {"image_size": 8}})"), InvalidValue);
  CHECK_THROWS_AS(parse_config_text(R"({"interpolate": {"anchors": [3, 1]}})"), InvalidValue);
  CHECK_THROWS_AS(parse_config_text(R"({"training": {"learning_rate": 0}})"), InvalidValue);
  CHECK_THROWS_AS(parse_config_text("[1, 2]"), InvalidValue);
  CHECK_THROWS_AS(parse_config(testing::scratch_dir("cfg_missing") / "none.json"), IoFailure);
}

TEST_CASE("parse errors report the line") {
  try {
    parse_config_text("{\n  \"seed\": 1,\n  \"model\": {\n    \"base_channels\": ,\n  }\n}");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line 4") != std::string::npos);
  }
}

TEST_CASE("config files parse like text") {
  const auto p = testing::scratch_dir("cfg_file") / "run.json";
  std::ofstream(p) << R"({"seed": 3, "training": {"steps": 10}})";
  const auto c = parse_config(p);
  CHECK(c.seed == 3);
  CHECK(c.training.steps == 10);
  CHECK(c.train_dataset().seed != c.eval_dataset().seed);
  CHECK(c.train_dataset().scenes == 64);
  CHECK(c.eval_dataset().scenes == 8);
}
