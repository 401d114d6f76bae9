#include "panoptes/config.hpp"

#include <fmt/format.h>

#include <fstream>

namespace panoptes {

void RunConfig::validate() const {
  env.validate();
  policy.validate();
  server.validate();
  if (policy.encoder.num_cameras != env.num_cameras())
    throw InvalidInput(fmt::format("encoder expects {} cameras but camera_set {} has {}", policy.encoder.num_cameras,
                                   env.camera_set, env.num_cameras()));
  if (policy.encoder.image_size != env.image_size)
    throw InvalidInput(fmt::format("encoder image_size {} differs from env image_size {}", policy.encoder.image_size,
                                   env.image_size));
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

std::string RunConfig::hash() const { return fnv1a_hex(nlohmann::json(*this).dump()); }

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"env", c.env}, {"policy", c.policy}, {"server", c.server}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  for (const auto& [k, v] : j.items())
    if (k != "env" && k != "policy" && k != "server") throw InvalidInput("unknown config key: " + k);
  // Sections merge over defaults key by key.
  auto merged = [&](const char* key, nlohmann::json base) {
    if (j.contains(key)) base.merge_patch(j.at(key));
    return base;
  };
  c.env = merged("env", nlohmann::json(c.env)).get<pol::EnvConfig>();
  c.policy = merged("policy", nlohmann::json(c.policy)).get<pol::PolicyConfig>();
  c.server = merged("server", nlohmann::json(c.server)).get<teleop::ServerConfig>();
  c.validate();
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw InvalidInput("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInput(fmt::format("config {}: {}", path.string(), e.what()));
  }
  RunConfig c;
  from_json(j, c);
  return c;
}

void apply_train_preset(RunConfig& cfg, const std::string& preset) {
  if (preset == "baseline") return;
  if (preset == "no-pose") {
    cfg.policy.encoder.use_pose = false;
  } else if (preset == "no-blink") {
    cfg.policy.blink_p = 0.0;
  } else if (preset == "topdown") {
    cfg.env.camera_set = "topdown";
    cfg.policy.encoder.num_cameras = 1;
  } else {
    throw InvalidInput("unknown preset " + preset + " (baseline, no-pose, no-blink, topdown)");
  }
}

void apply_eval_suite(RunConfig& cfg, const std::string& suite) {
  auto& f = cfg.env.faults;
  const std::uint64_t seed = f.seed;
  f = bus::FaultModel::none();
  f.seed = seed;
  if (suite == "baseline" || suite == "no-pose") {
  } else if (suite == "dropout" || suite == "no-blink") {
    f.dropout_p = 0.05;
  } else if (suite == "latency") {
    f.latency_p = 0.10;
    f.max_delay_s = 0.5;
  } else if (suite == "topdown") {
    cfg.env.camera_set = "topdown";
  } else {
    throw InvalidInput("unknown suite " + suite + " (baseline, dropout, latency, topdown, no-pose, no-blink)");
  }
}

void check_suite_compatible(const pol::PolicyConfig& trained, const std::string& suite) {
  const bool topdown = trained.encoder.num_cameras == 1;
  if (suite == "topdown" && !topdown) throw InvalidInput("suite topdown needs a checkpoint trained with --preset topdown");
  if (suite != "topdown" && topdown) throw InvalidInput("a topdown checkpoint can only run the topdown suite");
  if (suite == "no-pose" && trained.encoder.use_pose)
    throw InvalidInput("suite no-pose needs a checkpoint trained with --preset no-pose");
  if (suite == "no-blink" && trained.blink_p != 0.0)
    throw InvalidInput("suite no-blink needs a checkpoint trained with --preset no-blink");
}

std::uint64_t demo_scene_seed(std::uint64_t seed, int episode) {
  return seed * 10000 + static_cast<std::uint64_t>(episode);
}

std::uint64_t eval_scene_seed(std::uint64_t seed, int episode) {
  return 1000000000ULL + seed * 10000 + static_cast<std::uint64_t>(episode);
}

}  // namespace panoptes
