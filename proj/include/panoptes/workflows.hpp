#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "panoptes/config.hpp"

namespace panoptes::wf {

namespace fs = std::filesystem;

using Progress = std::function<void(const std::string&)>;

struct DemoSummary {
  std::vector<fs::path> episodes;
  std::vector<double> success;
  std::size_t steps = 0;
  double seconds = 0.0;
};

/// Records `episodes` scripted-expert demonstrations under out/ep_NNNN.
DemoSummary run_demos(const RunConfig& cfg, int episodes, std::uint64_t seed, const fs::path& out,
                      const Progress& progress = {});

struct TrainSummary {
  std::vector<double> losses;
  std::size_t windows = 0;
  double seconds = 0.0;
};

/// Trains on every episode under data_dir. Writes the checkpoint, its JSON
/// sidecar (run config, hash, norm stats, schedule) and <ckpt>.log.csv.
TrainSummary run_training(const RunConfig& cfg, const fs::path& data_dir, const fs::path& ckpt,
                          const Progress& progress = {});

/// Run config stored next to a checkpoint.
RunConfig checkpoint_config(const fs::path& ckpt);

struct EvalSummary {
  std::vector<std::uint64_t> scene_seeds;
  std::vector<double> metrics;
  double mean = 0.0;
  double seconds = 0.0;
};

/// Rolls the checkpoint out on held-out scenes under the suite's fault and
/// camera settings. Writes metrics.csv and faults.csv into out_dir.
EvalSummary run_eval(const fs::path& ckpt, const std::string& suite, int episodes, std::uint64_t seed,
                     const fs::path& out_dir, const Progress& progress = {});

}  // namespace panoptes::wf
