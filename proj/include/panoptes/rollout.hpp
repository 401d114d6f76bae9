#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "panoptes/datastore.hpp"
#include "panoptes/policy.hpp"
#include "panoptes/render.hpp"
#include "panoptes/sensorbus.hpp"
#include "panoptes/worldsim.hpp"

namespace panoptes::pol {

struct EnvConfig {
  sim::SceneConfig scene;
  sim::WorldModel model;
  int image_size = 64;
  double fov_deg = 50.0;
  std::string camera_set = "body";  // "body": 21 chain cameras; "topdown": one overhead camera
  bus::FaultModel faults = bus::FaultModel::none();
  int control_hz = 30;
  int record_hz = 10;
  double episode_seconds = 120.0;

  void validate() const;
  int num_cameras() const { return camera_set == "topdown" ? 1 : kNumCameras; }
  int ticks_per_record() const { return control_hz / record_hz; }
};

void to_json(nlohmann::json& j, const EnvConfig& c);
void from_json(const nlohmann::json& j, EnvConfig& c);

/// Simulated follower with its camera pipeline: rendered frames pass
/// through a SensorBus and the fault injector before anyone sees them.
class SimEnv {
 public:
  SimEnv(const EnvConfig& cfg, std::uint64_t scene_seed);

  const EnvConfig& config() const { return cfg_; }
  const sim::WorldState& state() const { return state_; }
  std::int64_t time_us() const { return ticks_ * 1000000 / cfg_.control_hz; }
  std::int64_t ticks() const { return ticks_; }

  /// One control tick toward the (clamped) targets.
  void tick(const kin::JointVector& targets);
  /// Current camera poses (FK of the follower, or the overhead camera).
  std::vector<kin::CameraPose> camera_poses() const;
  /// Renders and publishes every camera, then returns the faulted snapshot.
  bus::FrameSet observe();
  const bus::FaultInjector& faults() const { return injector_; }

 private:
  EnvConfig cfg_;
  sim::WorldState state_;
  render::Intrinsics intrinsics_;
  std::unique_ptr<bus::SensorBus> bus_;
  bus::FaultInjector injector_;
  std::int64_t ticks_ = 0;
  std::int64_t observations_ = 0;
};

/// Encoder-ready observation. The cached path stores frozen-backbone
/// features instead of pixels.
template <typename T>
ObsStep make_obs_step(const enc::Encoder<T>& encoder, const bus::FrameSet& frames,
                      const std::vector<kin::CameraPose>& poses, const std::array<float, kNumJoints>& joints);

/// Camera poses for recorded follower joints.
std::vector<kin::CameraPose> poses_for(const EnvConfig& cfg, const std::array<float, kNumJoints>& joints);

struct DemoResult {
  std::size_t steps = 0;
  double success = 0.0;
  std::int64_t control_ticks = 0;
};

/// Runs the scripted expert on one scene and records at record_hz until the
/// expert goes idle or the episode budget runs out.
DemoResult record_expert_episode(const EnvConfig& cfg, std::uint64_t scene_seed, const data::fs::path& dir,
                                 const std::string& config_hash);

/// Recorded episodes converted to encoder-ready observations and windows.
struct TrainingSet {
  std::vector<std::vector<ObsStep>> obs;  // per episode, per step
  std::vector<Sample> samples;            // point into obs
  std::vector<data::WindowRef> windows;   // parallel to samples
  data::NormStats stats;
  std::size_t steps = 0;
  bool any_truncated = false;
};

/// Loads every episode (complete steps only). The episode camera set and
/// resolution must match the policy. Throws DatasetError for an empty or
/// unusable dataset.
template <typename T>
TrainingSet build_training_set(const std::vector<data::fs::path>& episodes, const DiffusionPolicy<T>& policy,
                               const EnvConfig& env);

struct RolloutStep {
  std::int64_t t_us = 0;
  std::array<float, kNumJoints> joints{};
  std::array<float, kNumJoints> targets{};
  int valid_cameras = 0;
  double metric = 0.0;
};

struct RolloutLog {
  std::uint64_t scene_seed = 0;
  std::vector<RolloutStep> steps;  // one per record period
  int plans = 0;
  std::size_t executed_actions = 0;
  double final_metric = 0.0;
  std::vector<bus::FaultEvent> fault_events;
};

/// Receding-horizon control: observe, sample T_p actions, execute the first
/// T_a at record_hz with linear interpolation at control_hz, repeat until
/// episode_seconds elapse.
template <typename T>
RolloutLog receding_horizon_run(SimEnv& env, const DiffusionPolicy<T>& policy, double episode_seconds,
                                std::uint64_t sample_seed);

}  // namespace panoptes::pol
