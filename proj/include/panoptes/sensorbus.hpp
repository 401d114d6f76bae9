#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <deque>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "panoptes/common.hpp"
#include "panoptes/render.hpp"

namespace panoptes::bus {

using render::Image;

struct FrameSlot {
  std::optional<Image> image;
  std::int64_t timestamp_us = 0;
  bool valid = false;
  /// Delay injected by apply_faults, zero when none.
  std::int64_t injected_delay_us = 0;
};

struct FrameSet {
  std::vector<FrameSlot> slots;
  int valid_count() const;
};

/// Shared latest-frame buffer, one slot per camera.
///
/// Each slot is a pair of seqlocked buffers. A publish writes the buffer the
/// readers are not pointed at and then flips the index, so producers never
/// wait; readers copy and retry only if a producer lapped them mid-copy.
/// Pixel words are relaxed atomics, so concurrent reads are race-free.
/// One producer per camera is assumed; concurrent publishes to the same
/// camera are serialized by a producer-side flag.
class SensorBus {
 public:
  SensorBus(int num_cameras, int max_width, int max_height);
  ~SensorBus();
  SensorBus(const SensorBus&) = delete;
  SensorBus& operator=(const SensorBus&) = delete;

  int num_cameras() const { return static_cast<int>(slots_.size()); }

  /// Throws InvalidInput for a bad camera id or an image above capacity.
  void publish_frame(int cam_id, const Image& image, std::int64_t timestamp_us);

  FrameSet snapshot_latest() const;

  /// Number of publishes accepted for a camera so far.
  std::uint64_t publish_count(int cam_id) const;
  /// Times a publish had to wait for another publish to the same camera.
  std::uint64_t publish_waits(int cam_id) const;

 private:
  struct Buffer;
  struct Slot;
  std::vector<std::unique_ptr<Slot>> slots_;
  std::size_t capacity_words_;
};

struct FaultModel {
  double dropout_p = 0.05;
  double latency_p = 0.10;
  double max_delay_s = 0.5;
  std::uint64_t seed = 0;
  /// Dropped cameras keep their previous delivered frame instead of being
  /// masked; mimics stale hardware buffers.
  bool stale_on_dropout = false;

  void validate() const;
  static FaultModel none() { return {0.0, 0.0, 0.5, 0, false}; }
};

void to_json(nlohmann::json& j, const FaultModel& f);
void from_json(const nlohmann::json& j, FaultModel& f);

/// P(at least one of n cameras dropped in a tick).
double prob_any_dropped(double p, int n);

struct FaultEvent {
  std::int64_t tick;
  int cam_id;
  enum Kind { kDropout, kLatency } kind;
  std::int64_t delay_us;
};

/// Applies dropout and latency to successive frame sets. Keeps a short
/// per-camera history so delayed slots can replay an older frame. Draws
/// depend only on (seed, tick, camera), so a run is replay-identical.
class FaultInjector {
 public:
  explicit FaultInjector(FaultModel fm);

  FrameSet apply(const FrameSet& frames, std::int64_t tick);
  const std::vector<FaultEvent>& log() const { return log_; }
  void clear_log() { log_.clear(); }
  const FaultModel& model() const { return fm_; }

  static void write_log_csv(std::ostream& out, const std::vector<FaultEvent>& events);

 private:
  FaultModel fm_;
  std::vector<std::deque<FrameSlot>> history_;
  std::vector<FrameSlot> last_delivered_;
  std::vector<FaultEvent> log_;
};

/// Stateless form: no history, so a delayed slot is marked invalid when it
/// has no frame old enough. Equivalent to a fresh FaultInjector.
FrameSet apply_faults(const FrameSet& frames, const FaultModel& fm, std::int64_t tick);

}  // namespace panoptes::bus
