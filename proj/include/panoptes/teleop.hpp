#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <string_view>
#include <variant>

#include "panoptes/rollout.hpp"

namespace panoptes::teleop {

struct ServerConfig {
  std::string address = "127.0.0.1";
  std::uint16_t port = 8765;  // 0 picks a free port
  int control_hz = 30;
  int frame_hz = 10;
  /// Broadcast frames are downscaled by this integer factor.
  int frame_scale = 1;
  std::string record_dir;  // empty: $PANOPTES_DATA_DIR or ./data
  std::size_t max_pending_frames = 2;

  void validate() const;
};

void to_json(nlohmann::json& j, const ServerConfig& c);
void from_json(const nlohmann::json& j, ServerConfig& c);

// Inbound WireMessages.
struct JointCmd {
  std::uint64_t seq = 0;
  std::array<double, kNumJoints> targets{};
};
struct RecordCmd {
  bool start = false;
};
struct ResetCmd {
  std::uint64_t seed = 0;
};
using Inbound = std::variant<JointCmd, RecordCmd, ResetCmd>;

/// Parses and validates one inbound message. Throws InvalidInput with a
/// message naming the offending field.
Inbound parse_inbound(std::string_view text);

// Outbound WireMessages.
nlohmann::json state_message(const sim::WorldState& s, std::int64_t t_us, std::uint64_t last_seq, bool recording);
nlohmann::json frames_message(std::int64_t t_us, const bus::FrameSet& frames, int scale = 1);
nlohmann::json ack_message(std::optional<std::uint64_t> seq, const std::string& msg);
nlohmann::json error_message(std::optional<std::uint64_t> seq, const std::string& msg);

/// Per-client command filter: drops stale sequence numbers and clamps
/// targets. Returns the reply; `accepted` receives the clamped targets.
nlohmann::json apply_command(const JointCmd& cmd, std::uint64_t& last_seq, std::optional<kin::JointVector>& accepted);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

/// Record directory: explicit value, else $PANOPTES_DATA_DIR, else ./data.
std::filesystem::path default_record_dir(const std::string& configured);

/// The follower robot as a WebSocket service. The control loop ticks at
/// control_hz whether or not anyone is connected; the latest accepted
/// joint_cmd is the standing target.
class TeleopServer {
 public:
  TeleopServer(ServerConfig cfg, pol::EnvConfig env, std::uint64_t scene_seed);
  ~TeleopServer();
  TeleopServer(const TeleopServer&) = delete;
  TeleopServer& operator=(const TeleopServer&) = delete;

  /// Binds and starts both loops. Throws Error on bind failure.
  void start();
  void stop();
  /// Blocks until stop() is called from another thread or a signal.
  void wait();
  std::uint16_t port() const;

  std::int64_t ticks() const;
  std::optional<std::filesystem::path> last_episode() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace panoptes::teleop
