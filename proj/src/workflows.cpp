#include "panoptes/workflows.hpp"

#include <fmt/format.h>

#include <chrono>
#include <fstream>

namespace panoptes::wf {

namespace {

double since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void say(const Progress& p, const std::string& msg) {
  if (p) p(msg);
}

}  // namespace

DemoSummary run_demos(const RunConfig& cfg, int episodes, std::uint64_t seed, const fs::path& out,
                      const Progress& progress) {
  if (episodes < 1) throw InvalidInput("need at least one episode");
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(out);
  DemoSummary s;
  const std::string hash = cfg.hash();
  for (int i = 0; i < episodes; ++i) {
    const fs::path dir = out / fmt::format("ep_{:04d}", i);
    const auto scene = demo_scene_seed(seed, i);
    const auto r = pol::record_expert_episode(cfg.env, scene, dir, hash);
    s.episodes.push_back(dir);
    s.success.push_back(r.success);
    s.steps += r.steps;
    say(progress, fmt::format("demo {}/{} scene {} steps {} success {:.3f}", i + 1, episodes, scene, r.steps, r.success));
  }
  s.seconds = since(t0);
  return s;
}

TrainSummary run_training(const RunConfig& cfg, const fs::path& data_dir, const fs::path& ckpt,
                          const Progress& progress) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  pol::DiffusionPolicy<float> policy(cfg.policy);
  const auto ts = pol::build_training_set(data::list_episodes(data_dir), policy, cfg.env);
  say(progress, fmt::format("dataset: {} episodes, {} steps, {} windows{}", ts.obs.size(), ts.steps,
                            ts.samples.size(), ts.any_truncated ? " (some episodes truncated)" : ""));
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  std::ofstream log(ckpt.string() + ".log.csv");
  log << "# config_hash=" << cfg.hash() << " seed=" << cfg.policy.seed << "\n";
  log << "step,loss,wallclock\n";

  pol::Trainer<float> trainer(policy, Rng::mix(cfg.policy.seed, 0x747261));
  TrainSummary s;
  s.windows = ts.samples.size();
  for (int i = 0; i < cfg.policy.train_steps; ++i) {
    const double l = trainer.train_step(ts.samples);
    s.losses.push_back(l);
    log << i << ',' << fmt::format("{:.9g}", l) << ',' << fmt::format("{:.3f}", since(t0)) << '\n';
    if ((i + 1) % 250 == 0 || i + 1 == cfg.policy.train_steps)
      say(progress, fmt::format("step {}/{} loss {:.5f}", i + 1, cfg.policy.train_steps, l));
  }
  nlohmann::json extra = {{"run_config", cfg},
                          {"config_hash", cfg.hash()},
                          {"norm_stats", ts.stats},
                          {"dataset", {{"dir", data_dir.string()}, {"windows", ts.samples.size()}}}};
  policy.save(ckpt, extra);
  s.seconds = since(t0);
  return s;
}

RunConfig checkpoint_config(const fs::path& ckpt) {
  std::ifstream f(ckpt.string() + ".json");
  if (!f) throw CheckpointError("missing checkpoint sidecar " + ckpt.string() + ".json");
  const auto side = nlohmann::json::parse(f);
  if (!side.contains("run_config")) throw CheckpointError("sidecar without run_config: " + ckpt.string());
  RunConfig cfg;
  from_json(side.at("run_config"), cfg);
  return cfg;
}

EvalSummary run_eval(const fs::path& ckpt, const std::string& suite, int episodes, std::uint64_t seed,
                     const fs::path& out_dir, const Progress& progress) {
  if (episodes < 1) throw InvalidInput("need at least one episode");
  RunConfig cfg = checkpoint_config(ckpt);
  check_suite_compatible(cfg.policy, suite);
  apply_eval_suite(cfg, suite);
  cfg.env.faults.seed = seed;
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  pol::DiffusionPolicy<float> policy(cfg.policy);
  policy.load(ckpt);

  fs::create_directories(out_dir);
  std::ofstream metrics(out_dir / "metrics.csv"), faults(out_dir / "faults.csv");
  const std::string header = fmt::format("# config_hash={} seed={} suite={} ckpt={}\n", cfg.hash(), seed, suite,
                                         ckpt.string());
  metrics << header << "episode,scene_seed,metric,plans,actions,fault_events\n";
  faults << header << "episode,tick,cam_id,event,delay_us\n";

  EvalSummary s;
  for (int i = 0; i < episodes; ++i) {
    const auto scene = eval_scene_seed(seed, i);
    pol::SimEnv env(cfg.env, scene);
    const auto log = pol::receding_horizon_run(env, policy, cfg.env.episode_seconds, Rng::mix(seed, 0x65, scene));
    s.scene_seeds.push_back(scene);
    s.metrics.push_back(log.final_metric);
    metrics << i << ',' << scene << ',' << fmt::format("{:.6f}", log.final_metric) << ',' << log.plans << ','
            << log.executed_actions << ',' << log.fault_events.size() << '\n';
    for (const auto& e : log.fault_events)
      faults << i << ',' << e.tick << ',' << e.cam_id << ',' << (e.kind == bus::FaultEvent::kDropout ? "dropout" : "latency")
             << ',' << e.delay_us << '\n';
    say(progress, fmt::format("{} episode {}/{} scene {} metric {:.3f}", suite, i + 1, episodes, scene,
                              log.final_metric));
  }
  double sum = 0;
  for (double m : s.metrics) sum += m;
  s.mean = sum / static_cast<double>(s.metrics.size());
  metrics << "# mean=" << fmt::format("{:.6f}", s.mean) << "\n";
  s.seconds = since(t0);
  return s;
}

}  // namespace panoptes::wf
