#include <fmt/format.h>

#include <CLI11.hpp>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <thread>

#include "panoptes/checks.hpp"
#include "panoptes/config.hpp"
#include "panoptes/datastore.hpp"
#include "panoptes/rollout.hpp"
#include "panoptes/teleop.hpp"
#include "panoptes/workflows.hpp"

using namespace panoptes;
namespace fs = std::filesystem;

namespace {

volatile std::sig_atomic_t g_stop = 0;
void on_signal(int) { g_stop = 1; }

void progress(const std::string& msg) { fmt::print(stderr, "{}\n", msg); }

RunConfig base_config(const std::string& path) { return path.empty() ? RunConfig{} : load_run_config(path); }

void write_run_meta(const fs::path& dir, const RunConfig& cfg, const std::string& command, std::uint64_t seed,
                    const nlohmann::json& result) {
  fs::create_directories(dir);
  std::ofstream(dir / "run.json") << nlohmann::json{{"command", command},
                                                     {"config_hash", cfg.hash()},
                                                     {"seed", seed},
                                                     {"config", cfg},
                                                     {"result", result}}
                                         .dump(2)
                                  << "\n";
}

int cmd_serve(const std::string& config, std::uint64_t seed, std::optional<int> port) {
  RunConfig cfg = base_config(config);
  if (port) cfg.server.port = *port;
  cfg.validate();
  teleop::TeleopServer server(cfg.server, cfg.env, seed);
  server.start();
  fmt::print("listening on ws://{}:{}\n", cfg.server.address, server.port());
  std::fflush(stdout);
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  if (auto ep = server.last_episode()) fmt::print("last episode: {}\n", ep->string());
  return 0;
}

int cmd_demo(const std::string& config, int episodes, std::uint64_t seed, const fs::path& out) {
  const RunConfig cfg = base_config(config);
  const auto s = wf::run_demos(cfg, episodes, seed, out, progress);
  double mean = 0;
  for (double v : s.success) mean += v;
  mean /= static_cast<double>(s.success.size());
  write_run_meta(out, cfg, "demo-expert", seed,
                 {{"episodes", episodes}, {"steps", s.steps}, {"success", s.success}, {"mean_success", mean}});
  fmt::print("{} episodes, {} steps, mean expert success {:.3f}, {:.0f} s\n", episodes, s.steps, mean, s.seconds);
  return 0;
}

int cmd_train(const std::string& config, const std::string& preset, std::optional<std::uint64_t> seed,
              std::optional<int> steps, const fs::path& data, const fs::path& out) {
  RunConfig cfg = base_config(config);
  apply_train_preset(cfg, preset);
  if (seed) cfg.policy.seed = *seed;
  if (steps) cfg.policy.train_steps = *steps;
  const auto s = wf::run_training(cfg, data, out, progress);
  fmt::print("{} windows, final loss {:.5f}, {:.0f} s -> {}\n", s.windows, s.losses.back(), s.seconds, out.string());
  return 0;
}

int cmd_rollout(const fs::path& ckpt, int episodes, std::uint64_t seed, const std::string& faults,
                const fs::path& out) {
  RunConfig cfg = wf::checkpoint_config(ckpt);
  const std::string suite = faults == "none" ? "baseline" : faults;
  if (suite != "baseline" && suite != "dropout" && suite != "latency")
    throw InvalidInput("--faults must be none, dropout or latency");
  apply_eval_suite(cfg, suite);
  cfg.env.faults.seed = seed;
  pol::DiffusionPolicy<float> policy(cfg.policy);
  policy.load(ckpt);
  fs::create_directories(out);
  nlohmann::json results = nlohmann::json::array();
  for (int i = 0; i < episodes; ++i) {
    const auto scene = eval_scene_seed(seed, i);
    pol::SimEnv env(cfg.env, scene);
    const auto log = pol::receding_horizon_run(env, policy, cfg.env.episode_seconds, Rng::mix(seed, 0x65, scene));
    std::ofstream f(out / fmt::format("rollout_{:04d}.csv", i));
    f << "# config_hash=" << cfg.hash() << " seed=" << seed << " scene=" << scene << "\n";
    f << "t_us,valid_cameras,metric";
    for (int j = 0; j < kNumJoints; ++j) f << ",q" << j;
    for (int j = 0; j < kNumJoints; ++j) f << ",target" << j;
    f << "\n";
    for (const auto& s : log.steps) {
      f << s.t_us << ',' << s.valid_cameras << ',' << fmt::format("{:.6f}", s.metric);
      for (float v : s.joints) f << ',' << fmt::format("{:.6f}", v);
      for (float v : s.targets) f << ',' << fmt::format("{:.6f}", v);
      f << "\n";
    }
    std::ofstream ff(out / fmt::format("faults_{:04d}.csv", i));
    bus::FaultInjector::write_log_csv(ff, log.fault_events);
    results.push_back({{"scene_seed", scene}, {"metric", log.final_metric}, {"plans", log.plans}});
    fmt::print("episode {} scene {} metric {:.3f}\n", i, scene, log.final_metric);
  }
  write_run_meta(out, cfg, "rollout", seed, results);
  return 0;
}

int cmd_eval(const fs::path& ckpt, const std::string& suite, int episodes, std::uint64_t seed, fs::path out) {
  if (out.empty()) out = ckpt.parent_path() / ("eval_" + suite);
  const auto s = wf::run_eval(ckpt, suite, episodes, seed, out, progress);
  fmt::print("suite {}: mean success {:.3f} over {} episodes -> {}\n", suite, s.mean, episodes,
             (out / "metrics.csv").string());
  return 0;
}

int cmd_replay(const fs::path& dir, bool paced) {
  const auto ep = data::load_episode(dir, true);
  fmt::print("episode {} seed {} hash {} cameras {} ({}) steps {}{}\n", ep.meta.id, ep.meta.seed, ep.meta.config_hash,
             ep.meta.num_cameras, ep.meta.camera_set, ep.steps.size(), ep.truncated ? " [truncated]" : "");
  std::size_t invalid = 0;
  const auto n = data::replay(
      ep,
      [&](const data::StepRecord& s, const std::vector<data::FrameRecord>& frames) {
        for (const auto& f : frames) invalid += f.valid ? 0 : 1;
        fmt::print("{}", s.t_us);
        for (float v : s.follower) fmt::print(",{:.5f}", v);
        fmt::print("\n");
      },
      paced);
  fmt::print("replayed {} steps, {} invalid frames\n", n, invalid);
  return 0;
}

int cmd_check(const fs::path& work) {
  bool ok = true;
  for (const auto& r : chk::invariant_suite(work)) {
    fmt::print("{} {} ({:.1f} s): {}\n", r.pass ? "PASS" : "FAIL", r.name, r.seconds, r.detail);
    ok = ok && r.pass;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-camera snake-arm teleoperation and diffusion policy toolkit"};
  app.require_subcommand(1);
  std::string config;
  app.add_option("--config", config, "JSON run configuration")->check(CLI::ExistingFile);

  std::uint64_t seed = 1;
  int episodes = 1;
  std::optional<int> port;
  auto* serve = app.add_subcommand("serve", "Run the WebSocket teleoperation service");
  serve->add_option("--seed", seed, "Scene seed");
  serve->add_option("--port", port, "Listening port (0 picks a free one)");

  fs::path out;
  auto* demo = app.add_subcommand("demo-expert", "Record scripted-expert demonstrations");
  demo->add_option("--episodes", episodes)->required()->check(CLI::PositiveNumber);
  demo->add_option("--seed", seed);
  demo->add_option("--out", out)->default_val("data/demos");

  fs::path data_dir;
  std::string preset = "baseline";
  std::optional<std::uint64_t> train_seed;
  std::optional<int> steps;
  auto* train = app.add_subcommand("train", "Train a diffusion policy on recorded episodes");
  train->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", out, "Checkpoint path")->required();
  train->add_option("--preset", preset)->check(CLI::IsMember({"baseline", "no-pose", "no-blink", "topdown"}));
  train->add_option("--seed", train_seed);
  train->add_option("--steps", steps)->check(CLI::PositiveNumber);

  fs::path ckpt;
  std::string faults = "none";
  auto* rollout = app.add_subcommand("rollout", "Closed-loop rollouts of a checkpoint");
  rollout->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
  rollout->add_option("--episodes", episodes)->check(CLI::PositiveNumber);
  rollout->add_option("--seed", seed);
  rollout->add_option("--faults", faults)->check(CLI::IsMember({"none", "dropout", "latency"}));
  rollout->add_option("--out", out)->default_val("runs/rollout");

  std::string suite;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a comparison suite");
  eval->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
  eval->add_option("--suite", suite)
      ->required()
      ->check(CLI::IsMember({"baseline", "dropout", "latency", "topdown", "no-pose", "no-blink"}));
  eval->add_option("--episodes", episodes)->default_val(10)->check(CLI::PositiveNumber);
  eval->add_option("--seed", seed);
  eval->add_option("--out", out);

  fs::path episode;
  bool paced = false;
  auto* replay = app.add_subcommand("replay", "Replay a recorded episode");
  replay->add_option("--episode", episode)->required()->check(CLI::ExistingDirectory);
  replay->add_flag("--paced", paced, "Wait out recorded timing");

  fs::path work = "runs/check";
  auto* check = app.add_subcommand("check", "Run the invariant suite");
  check->add_option("--work", work);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*serve) return cmd_serve(config, seed, port);
    if (*demo) return cmd_demo(config, episodes, seed, out);
    if (*train) return cmd_train(config, preset, train_seed, steps, data_dir, out);
    if (*rollout) return cmd_rollout(ckpt, episodes, seed, faults, out);
    if (*eval) return cmd_eval(ckpt, suite, episodes, seed, out);
    if (*replay) return cmd_replay(episode, paced);
    if (*check) return cmd_check(work);
  } catch (const InvalidInput& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 2;
}
