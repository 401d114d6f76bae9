#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "panoptes/config.hpp"

using namespace panoptes;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PANOPTES_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("run configuration") {
  RunConfig a, b;
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 16);
  b.policy.lr = 5e-4;
  CHECK(a.hash() != b.hash());

  nlohmann::json j = a;
  CHECK(j.get<RunConfig>().hash() == a.hash());
  // Partial documents keep defaults.
  const auto partial = nlohmann::json{{"env", {{"episode_seconds", 30.0}}}}.get<RunConfig>();
  CHECK(partial.env.episode_seconds == 30.0);
  CHECK(partial.policy.train_steps == a.policy.train_steps);

  j["policy"]["mystery"] = 3;
  CHECK_THROWS_AS(j.get<RunConfig>(), InvalidInput);
  CHECK_THROWS_AS((nlohmann::json{{"envv", {}}}.get<RunConfig>()), InvalidInput);

  CHECK(fnv1a_hex("") == "cbf29ce484222325");
  CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
}

TEST_CASE("presets and suites") {
  RunConfig c;
  apply_train_preset(c, "no-pose");
  CHECK_FALSE(c.policy.encoder.use_pose);
  c = {};
  apply_train_preset(c, "no-blink");
  CHECK(c.policy.blink_p == 0.0);
  c = {};
  apply_train_preset(c, "topdown");
  CHECK(c.env.num_cameras() == 1);
  CHECK_THROWS_AS(apply_train_preset(c, "fancy"), InvalidInput);

  c = {};
  c.env.faults.seed = 42;
  apply_eval_suite(c, "dropout");
  CHECK(c.env.faults.dropout_p == 0.05);
  CHECK(c.env.faults.latency_p == 0.0);
  CHECK(c.env.faults.seed == 42);
  apply_eval_suite(c, "latency");
  CHECK(c.env.faults.dropout_p == 0.0);
  CHECK(c.env.faults.latency_p == 0.10);
  CHECK(c.env.faults.max_delay_s == 0.5);
  apply_eval_suite(c, "baseline");
  CHECK(c.env.faults.latency_p == 0.0);
  CHECK_THROWS_AS(apply_eval_suite(c, "chaos"), InvalidInput);

  const pol::PolicyConfig base;
  CHECK_NOTHROW(check_suite_compatible(base, "baseline"));
  CHECK_NOTHROW(check_suite_compatible(base, "dropout"));
  CHECK_THROWS_AS(check_suite_compatible(base, "no-pose"), InvalidInput);
  CHECK_THROWS_AS(check_suite_compatible(base, "no-blink"), InvalidInput);
  CHECK_THROWS_AS(check_suite_compatible(base, "topdown"), InvalidInput);

  for (int i = 0; i < 100; ++i)
    for (int k = 0; k < 100; ++k) CHECK(demo_scene_seed(1, i) != eval_scene_seed(1, k));
}

TEST_CASE("command line" * doctest::timeout(900)) {
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("") == 2);
  CHECK(run_cli("fly") == 2);
  CHECK(run_cli("train --bogus") == 2);
  CHECK(run_cli("demo-expert") == 2);
  CHECK(run_cli("eval --ckpt /nonexistent --suite baseline") == 2);

  const auto work = fs::temp_directory_path() / "panoptes_cli_test";
  fs::remove_all(work);
  fs::create_directories(work);
  const auto cfg = work / "cfg.json";
  std::ofstream(cfg) << R"({"env": {"episode_seconds": 6.0}, "policy": {"train_steps": 3, "batch_size": 4}})";
  std::ofstream(work / "bad.json") << R"({"policy": {"learning_rate": 1}})";
  CHECK(run_cli("--config " + (work / "bad.json").string() + " demo-expert --episodes 1 --out " +
                (work / "x").string()) == 2);

  const auto demos = work / "demos";
  REQUIRE(run_cli("--config " + cfg.string() + " demo-expert --episodes 1 --seed 2 --out " + demos.string()) == 0);
  CHECK(fs::exists(demos / "run.json"));
  CHECK(fs::exists(demos / "ep_0000" / "meta.json"));
  CHECK(run_cli("replay --episode " + (demos / "ep_0000").string()) == 0);

  const auto ckpt = work / "ckpt.bin";
  REQUIRE(run_cli("--config " + cfg.string() + " train --data " + demos.string() + " --out " + ckpt.string()) == 0);
  CHECK(fs::exists(ckpt));
  CHECK(fs::exists(work / "ckpt.bin.log.csv"));
  CHECK(run_cli("eval --ckpt " + ckpt.string() + " --suite no-pose --episodes 1") == 2);
  CHECK(run_cli("eval --ckpt " + ckpt.string() + " --suite baseline --episodes 1 --out " + (work / "eval").string()) == 0);
  CHECK(fs::exists(work / "eval" / "metrics.csv"));
  fs::remove_all(work);
}
