#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>

#include "panoptes/policy.hpp"
#include "panoptes/rollout.hpp"
#include "panoptes/teleop.hpp"

namespace panoptes {

/// Everything that shapes a run: simulation, cameras, faults, encoder,
/// policy and server.
struct RunConfig {
  pol::EnvConfig env;
  pol::PolicyConfig policy;
  teleop::ServerConfig server;

  void validate() const;
  /// FNV-1a over the canonical JSON dump (sorted keys), as 16 hex digits.
  std::string hash() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path);

/// Training presets: baseline, no-pose, no-blink, topdown.
void apply_train_preset(RunConfig& cfg, const std::string& preset);
/// Evaluation suites: baseline, dropout, latency, topdown, no-pose,
/// no-blink. Sets the environment side (faults, cameras).
void apply_eval_suite(RunConfig& cfg, const std::string& suite);
/// Throws InvalidInput when a checkpoint's policy config cannot serve the
/// suite (e.g. no-pose with pose embeddings on).
void check_suite_compatible(const pol::PolicyConfig& trained, const std::string& suite);

/// Scene seeds: demonstrations and evaluations never share a scene.
std::uint64_t demo_scene_seed(std::uint64_t seed, int episode);
std::uint64_t eval_scene_seed(std::uint64_t seed, int episode);

std::string fnv1a_hex(const std::string& bytes);

}  // namespace panoptes
