#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "panoptes/common.hpp"
#include "panoptes/sensorbus.hpp"

namespace panoptes::data {

namespace fs = std::filesystem;

inline constexpr int kFormatVersion = 1;
/// u64 t_us + 9 f32 follower + 9 f32 leader.
inline constexpr std::size_t kStateRecordBytes = 8 + 4 * 2 * kNumJoints;

using JointArray = std::array<float, kNumJoints>;

struct EpisodeMeta {
  std::string id;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string start_time;
  int control_hz = 30;
  int record_hz = 10;
  int num_cameras = kNumCameras;
  std::string camera_set = "body";  // or "topdown"
  bool complete = false;
  std::size_t steps = 0;
  nlohmann::json extra = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const EpisodeMeta& m);
void from_json(const nlohmann::json& j, EpisodeMeta& m);

struct StepRecord {
  std::uint64_t t_us = 0;
  JointArray follower{};
  JointArray leader{};
  bool operator==(const StepRecord&) const = default;
};

struct FrameRecord {
  std::uint64_t t_us = 0;
  std::uint8_t cam_id = 0;
  std::uint16_t width = 0;
  std::uint16_t height = 0;
  bool valid = false;
  std::vector<std::uint8_t> rgb;  // empty when invalid
  bool operator==(const FrameRecord&) const = default;
};

struct Episode {
  fs::path dir;
  EpisodeMeta meta;
  std::vector<StepRecord> steps;
  /// frames[i] holds the camera records of step i (empty when loaded
  /// without frames).
  std::vector<std::vector<FrameRecord>> frames;
  /// True when the files held a partial trailing step or meta said
  /// incomplete.
  bool truncated = false;
};

/// Append-only episode writer. Every append is flushed, so a crash leaves
/// all earlier steps readable. Any write failure marks the episode
/// incomplete and throws DatasetError.
class EpisodeWriter {
 public:
  EpisodeWriter(const fs::path& dir, EpisodeMeta meta);
  ~EpisodeWriter();
  EpisodeWriter(const EpisodeWriter&) = delete;
  EpisodeWriter& operator=(const EpisodeWriter&) = delete;

  /// Timestamps must strictly increase.
  void append(std::uint64_t t_us, const bus::FrameSet& frames, const JointArray& follower, const JointArray& leader);
  /// Marks the episode complete. Idempotent.
  void close();
  std::size_t steps() const { return meta_.steps; }
  const fs::path& dir() const { return dir_; }

 private:
  void write_meta();
  void fail(const std::string& why);

  fs::path dir_;
  EpisodeMeta meta_;
  std::ofstream states_, frames_;
  std::uint64_t last_t_ = 0;
  bool closed_ = false;
};

/// Loads all complete steps. A step is complete when its state record and
/// all num_cameras frame records are present.
Episode load_episode(const fs::path& dir, bool with_frames = true);

/// Episode directories (those holding meta.json) under root, sorted.
std::vector<fs::path> list_episodes(const fs::path& root);

/// Frame records of one step as a FrameSet.
bus::FrameSet to_frame_set(const std::vector<FrameRecord>& frames);

struct WindowRef {
  int episode = 0;
  int t = 0;
  bool operator==(const WindowRef&) const = default;
};

/// Windows with T_p future actions available: t in [0, steps - T_p).
std::size_t window_count(std::size_t steps, int pred_horizon);
std::vector<WindowRef> make_windows(const std::vector<std::size_t>& episode_steps, int pred_horizon);
/// Observation indices for window t, edge-replicated at the start.
std::vector<int> obs_indices(int t, int obs_horizon);
/// Action indices t+1 .. t+T_p.
std::vector<int> action_indices(int t, int pred_horizon);
/// Permutation of [0, n) that depends only on the seed.
std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed);

struct NormStats {
  JointArray min{};
  JointArray max{};
  float normalize(float v, int j) const;
  float denormalize(float x, int j) const;
};

void to_json(nlohmann::json& j, const NormStats& s);

/// Per-joint min/max over all leader targets. A joint with min == max is a
/// DatasetError unless widen > 0, which pads such ranges by ±widen.
NormStats compute_norm_stats(const std::vector<Episode>& episodes, float widen = 0.0f);

using ReplaySink = std::function<void(const StepRecord&, const std::vector<FrameRecord>&)>;

/// Emits steps in order. With pacing, waits until each step's recorded
/// offset from the first step. Returns the number of steps emitted.
std::size_t replay(const Episode& ep, const ReplaySink& sink, bool paced = false);

/// Current UTC time as ISO-8601.
std::string utc_timestamp();

}  // namespace panoptes::data
