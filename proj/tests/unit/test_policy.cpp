#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "panoptes/config.hpp"
#include "panoptes/policy.hpp"
#include "panoptes/rollout.hpp"

using namespace panoptes;
using namespace panoptes::pol;
namespace fs = std::filesystem;

namespace {

PolicyConfig small_config() {
  PolicyConfig cfg;
  cfg.seed = 3;
  cfg.encoder.num_cameras = 2;
  cfg.encoder.token_dim = 16;
  cfg.encoder.image_feat_dim = 8;
  cfg.encoder.pose_embed_dim = 4;
  cfg.encoder.head_hidden = 8;
  cfg.blocks = 1;
  cfg.heads = 2;
  cfg.ffn_mult = 2;
  return cfg;
}

std::vector<ObsStep> random_steps(const PolicyConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ObsStep> steps(static_cast<std::size_t>(cfg.horizons.obs));
  for (auto& s : steps) {
    s.cam_input.assign(static_cast<std::size_t>(cfg.encoder.num_cameras),
                       std::vector<float>(static_cast<std::size_t>(cfg.encoder.backbone_dim())));
    for (auto& c : s.cam_input)
      for (auto& v : c) v = static_cast<float>(rng.uniform());
    s.poses.resize(static_cast<std::size_t>(cfg.encoder.num_cameras));
    for (auto& p : s.poses)
      for (auto& v : p) v = static_cast<float>(rng.uniform(-1, 1));
    for (auto& v : s.joints) v = static_cast<float>(rng.uniform(-1, 1));
  }
  return steps;
}

std::vector<const ObsStep*> ptrs(const std::vector<ObsStep>& s) {
  std::vector<const ObsStep*> out;
  for (const auto& x : s) out.push_back(&x);
  return out;
}

}  // namespace

TEST_CASE("noise schedules") {
  const auto lin = make_schedule(2, "linear", 1e-4, 0.02);
  CHECK(lin.alpha_bar(0) == 1.0);
  CHECK(lin.alpha_bar(1) == doctest::Approx(0.9999).epsilon(1e-12));
  CHECK(lin.alpha_bar(2) == doctest::Approx(0.979902).epsilon(1e-12));

  for (const char* kind : {"linear", "squared-cosine"}) {
    const auto s = make_schedule(100, kind);
    for (int k = 1; k <= s.K; ++k) CHECK(s.alpha_bar(k) < s.alpha_bar(k - 1));
  }
  CHECK(make_schedule(100, "squared-cosine").alpha_bar(100) < 0.01);
  CHECK_THROWS_AS(make_schedule(0, "linear"), InvalidInput);
  CHECK_THROWS_AS(make_schedule(10, "quadratic"), InvalidInput);
}

TEST_CASE("add_noise") {
  const auto s = make_schedule(100, "squared-cosine");
  const std::vector<double> x0{0.5, -0.25}, eps{1.0, 2.0};
  const auto x1 = add_noise(x0, 1, eps, s);
  const double a = std::sqrt(s.alpha_bar(1)), b = std::sqrt(1 - s.alpha_bar(1));
  CHECK(x1[0] == doctest::Approx(a * 0.5 + b * 1.0));
  CHECK(x1[1] == doctest::Approx(a * -0.25 + b * 2.0));
  // At the last step almost nothing of x0 survives.
  const auto xK = add_noise(x0, 100, eps, s);
  CHECK(std::abs(xK[0] - eps[0]) < 0.05);
  CHECK(add_noise(x0, 50, std::vector<double>{0, 0}, s)[0] == doctest::Approx(std::sqrt(s.alpha_bar(50)) * 0.5));
  CHECK_THROWS_AS(add_noise(x0, 0, eps, s), InvalidInput);
  CHECK_THROWS_AS(add_noise(x0, 101, eps, s), InvalidInput);
  CHECK_THROWS_AS(add_noise(x0, 5, std::vector<double>{1.0}, s), DimensionError);
}

TEST_CASE("sampling an untrained policy") {
  const auto cfg = small_config();
  DiffusionPolicy<float> policy(cfg);
  const auto steps = random_steps(cfg, 1);
  const auto a = policy.sample_actions(ptrs(steps), 42);
  REQUIRE(a.size() == static_cast<std::size_t>(cfg.horizons.pred));
  for (const auto& act : a)
    for (float v : act) {
      CHECK(std::isfinite(v));
      CHECK(std::abs(v) <= kJointLimit + 1e-6);
    }
  const auto b = policy.sample_actions(ptrs(steps), 42);
  CHECK(a == b);
  const auto c = policy.sample_actions(ptrs(steps), 43);
  CHECK(a != c);

  // A missing camera is masked rather than rejected.
  auto gap = steps;
  gap[1].cam_input[0].clear();
  CHECK_NOTHROW(policy.sample_actions(ptrs(gap), 42));
}

TEST_CASE("config validation and JSON") {
  auto cfg = small_config();
  nlohmann::json j = cfg;
  const auto back = j.get<PolicyConfig>();
  CHECK(nlohmann::json(back) == j);

  j["unknown_knob"] = 1;
  CHECK_THROWS_AS(j.get<PolicyConfig>(), InvalidInput);

  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), InvalidInput);
  cfg = small_config();
  cfg.horizons.act = cfg.horizons.pred + 1;
  CHECK_THROWS_AS(cfg.validate(), InvalidInput);
}

TEST_CASE("checkpoint save and load") {
  const auto cfg = small_config();
  const auto path = fs::temp_directory_path() / "panoptes_policy_test.bin";
  DiffusionPolicy<float> a(cfg);
  a.save(path, {{"note", "unit"}});
  CHECK(fs::exists(fs::path(path.string() + ".json")));

  auto other = cfg;
  other.seed = 99;
  DiffusionPolicy<float> b(other);
  const auto steps = random_steps(cfg, 2);
  CHECK(a.sample_actions(ptrs(steps), 5) != b.sample_actions(ptrs(steps), 5));
  b.load(path);
  CHECK(a.sample_actions(ptrs(steps), 5) == b.sample_actions(ptrs(steps), 5));

  auto wider = cfg;
  wider.encoder.token_dim = 32;
  wider.encoder.image_feat_dim = 24;
  DiffusionPolicy<float> c(wider);
  CHECK_THROWS(c.load(path));
  fs::remove(path);
  fs::remove(fs::path(path.string() + ".json"));
}

TEST_CASE("training lowers the loss on a fixed batch") {
  const auto cfg = small_config();
  DiffusionPolicy<float> policy(cfg);
  const auto steps = random_steps(cfg, 3);
  Sample s{ptrs(steps), {}};
  for (int i = 0; i < cfg.horizons.pred; ++i) {
    Action a;
    a.fill(0.3f);
    s.actions.push_back(a);
  }
  auto eval = [&] {
    NoGrad<float> guard(policy.params());
    Rng r(1);
    return policy.loss({s, s, s, s}, r, 0.0).item();
  };
  const float before = eval();
  Trainer<float> trainer(policy, 4);
  for (int i = 0; i < 200; ++i) trainer.train_step({s});
  CHECK(eval() < before);
}

TEST_CASE("action horizon equal to prediction horizon: plans never overlap" * doctest::timeout(300)) {
  RunConfig cfg;
  cfg.policy.horizons.pred = 8;
  cfg.policy.horizons.act = 8;
  cfg.policy.inference_steps = 2;
  DiffusionPolicy<float> policy(cfg.policy);
  SimEnv env(cfg.env, 11);
  const double seconds = 4.0;
  const auto log = receding_horizon_run(env, policy, seconds, 1);
  const auto record_steps = static_cast<std::size_t>(std::lround(seconds * cfg.env.record_hz));
  CHECK(log.executed_actions == record_steps);
  CHECK(log.plans == static_cast<int>((record_steps + 7) / 8));
}
