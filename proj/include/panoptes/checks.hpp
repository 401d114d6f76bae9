#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "panoptes/workflows.hpp"

namespace panoptes::chk {

namespace fs = std::filesystem;

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

/// FK against an independent homogeneous-transform composition, including
/// all camera mounts.
CheckResult fk_oracle(int configs = 1000, std::uint64_t seed = 1);
CheckResult rot6d_roundtrip(int rotations = 1000, std::uint64_t seed = 2);
/// Analytic P(any of 21 dropped) plus a Monte Carlo estimate through the
/// fault injector.
CheckResult blink_statistics(int ticks = 100000, std::uint64_t seed = 3);
CheckResult latency_injection(int ticks = 100000, std::uint64_t seed = 4);
/// Central finite differences in double precision: every tensor op, then
/// the desk-scale policy loss.
CheckResult gradient_checks(std::uint64_t seed = 5);
/// Two-mode action dataset must yield both modes; add_noise second moment.
CheckResult diffusion_sanity(std::uint64_t seed = 6);
/// One scripted episode, 2000 training steps, loss ratio and action error.
CheckResult overfit(const fs::path& work_dir, std::uint64_t seed = 7);
/// 21 producers at `fps` for `seconds` against a slow reader.
CheckResult bus_stress(double seconds = 10.0, int fps = 30);
/// Record/replay and train/eval reruns compared bit for bit.
CheckResult determinism(const fs::path& work_dir, std::uint64_t seed = 8);

struct PipelineOptions {
  int demos = 50;
  int eval_episodes = 10;
  std::uint64_t seed = 1;
  /// Keep demos, checkpoints and eval results already present in work_dir.
  bool reuse = false;
  wf::Progress progress;
};

struct PipelineResult {
  double baseline = 0.0;         // full policy, no faults
  double dropout_blink = 0.0;    // full policy, 5% dropout
  double dropout_noblink = 0.0;  // no-blink policy, 5% dropout
  double no_pose = 0.0;          // no-pose policy, no faults
  double expert_success = 0.0;   // mean over the demonstrations
  double seconds = 0.0;
  bool reused = false;
};

/// Demonstrations, three trainings (baseline, no-blink, no-pose) and four
/// evaluation suites.
PipelineResult run_pipeline(const fs::path& work_dir, const PipelineOptions& opts);

CheckResult closed_loop(const PipelineResult& r);
CheckResult blink_ablation(const PipelineResult& r);
CheckResult pose_ablation(const PipelineResult& r);

/// Fast invariants used by `panoptes check`.
std::vector<CheckResult> invariant_suite(const fs::path& work_dir);

}  // namespace panoptes::chk
