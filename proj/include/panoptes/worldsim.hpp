#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <optional>
#include <vector>

#include "panoptes/kinematics.hpp"

namespace panoptes::sim {

using Vec2 = Eigen::Vector2d;
using kin::JointVector;

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

struct Object {
  int id = 0;
  Vec2 position = Vec2::Zero();
  double radius = 0.015;
  double height = 0.04;
  Rgb color;
  bool toppled = false;
};

/// Axis-aligned square target region on the table.
struct Zone {
  Vec2 center = Vec2::Zero();
  double side = 0.20;
  /// Boundary inclusive.
  bool contains(const Vec2& p) const {
    const double h = 0.5 * side;
    return std::abs(p.x() - center.x()) <= h && std::abs(p.y() - center.y()) <= h;
  }
};

struct WorldState {
  double time = 0.0;
  JointVector joints;
  JointVector targets;
  std::vector<Object> objects;
  Zone zone;

  /// Bit-exact serialization, used for determinism checks.
  std::vector<std::uint8_t> to_bytes() const;
};

/// Physical constants of the tabletop. The table plane is horizontal at
/// `table_height` in the robot base frame.
struct WorldParams {
  double table_height = 0.04;
  double table_half_extent = 0.6;
  double max_joint_velocity = 2.0;  // rad/s
  double physics_rate = 120.0;      // Hz
  double max_push_per_step = 0.05;  // m per step() call
  double topple_ratio = 0.7;
  double topple_min_push = 0.001;  // grazing contacts below this never topple
  double penetration_tol = 1e-4;
  int max_projection_iters = 60;
};

struct SceneConfig {
  int object_count = 24;
  double radius_min = 0.012;
  double radius_max = 0.016;
  double height_min = 0.035;
  double height_max = 0.045;
  double spawn_r_min = 0.16;  // annulus around the base
  double spawn_r_max = 0.34;
  double min_gap = 0.002;
  double zone_side = 0.20;
  std::uint64_t seed = 0;
  int max_attempts = 20000;
};

void to_json(nlohmann::json& j, const SceneConfig& c);
void from_json(const nlohmann::json& j, SceneConfig& c);
void to_json(nlohmann::json& j, const WorldParams& p);
void from_json(const nlohmann::json& j, WorldParams& p);
void to_json(nlohmann::json& j, const WorldState& s);

/// Geometry plus physics constants; everything step() needs besides state.
struct WorldModel {
  kin::ChainGeometry geometry = kin::ChainGeometry::default_geometry();
  WorldParams params;
};

/// Home posture: the chain stands straight up.
JointVector home_posture();

/// Deterministic scene from the seed. Throws PlacementError when the spawn
/// region cannot hold all objects.
WorldState spawn_scene(const SceneConfig& cfg, const WorldModel& model = {});

/// Advances the world by dt (0 < dt <= 0.1) with quasi-static contact.
WorldState step(const WorldModel& model, const WorldState& state, const JointVector& targets, double dt);

/// Fraction of objects whose centers lie inside the zone and are upright.
/// Throws UndefinedMetric for an empty scene.
double success_metric(const WorldState& state);

struct CapsuleContact {
  bool touching = false;
  Vec2 push = Vec2::Zero();   // displacement that separates the disc
  double contact_height = 0;  // capsule axis height above the table
};

/// Contact between a vertical disc (on the table) and a 3D capsule. Only the
/// part of the capsule whose z-extent overlaps the disc's height band counts.
CapsuleContact disc_capsule_contact(const Object& obj, const kin::Vec3& a, const kin::Vec3& b,
                                    double capsule_radius, double table_height);

/// Deterministic heuristic demonstrator emitting joint targets at the
/// control rate. Aims a sweep at the farthest out-of-zone object: the chain
/// is laid down beside it, the distal yaw joints curl to wrap it and drag it
/// toward the base, then the chain lifts off. Among a handful of landing
/// headings and curl directions it picks the one whose simulated outcome
/// moves objects furthest toward the zone.
class ScriptedExpert {
 public:
  explicit ScriptedExpert(WorldModel model = {}) : model_(std::move(model)) {}

  JointVector next_targets(const WorldState& state);

  enum class Phase { kHome, kSweep };
  Phase phase() const { return phase_; }
  std::optional<int> target_object() const { return target_; }
  /// True once every object is done or no sweep is worth making; stays
  /// true until something in the scene moves.
  bool idle() const { return idle_; }

  static constexpr double kControlRate = 30.0;

  struct Candidate {
    double side;     // +1 tips the chain toward -y, -1 toward +y
    double heading;  // chain direction on the table, radians
    double dir;      // curl direction, +1 counter-clockwise
    double curl;     // final angle of the distal yaw joints
    double swing;    // extra yaw of joint 1 during the curl
    int reach = 0;   // pitch joint lifting the distal links, 0 for full length
  };
  using Plan = std::vector<JointVector>;

  Plan make_plan(const Candidate& c) const;

 private:
  static constexpr double kRaisedBase = 30.0 * kPi / 180.0;
  static constexpr double kLiftAngle = 60.0 * kPi / 180.0;
  static constexpr double kSettle = 0.03;
  static constexpr int kMaxTicksPerWaypoint = 60;
  static constexpr double kMinGain = 0.01;
  static constexpr std::size_t kFineTargets = 4;
  static constexpr int kMaxFineSearches = 6;
  static constexpr double kTopplePenalty = 3.0;

  std::vector<Candidate> candidates_for(const Vec2& target, bool fine) const;
  WorldState simulate(const WorldState& start, const Plan& plan, int* ticks) const;
  static double score(const WorldState& before, const WorldState& after);

  WorldModel model_;
  Phase phase_ = Phase::kHome;
  std::optional<int> target_;
  Plan plan_;
  std::size_t plan_index_ = 0;
  int ticks_on_waypoint_ = 0;
  int fine_searches_ = 0;
  bool stalled_ = false;
  bool idle_ = false;
  JointVector hold_;
  std::vector<double> stalled_objects_;
};

/// Bearing (radians, atan2 convention) of a point from the base.
double bearing(const Vec2& p);

}  // namespace panoptes::sim
