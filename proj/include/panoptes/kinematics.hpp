#pragma once

#include <Eigen/Dense>
#include <array>
#include <nlohmann/json.hpp>
#include <span>
#include <vector>

#include "panoptes/common.hpp"

namespace panoptes::kin {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Nine joint angles in radians, indexed base (0) to head (8).
struct JointVector {
  std::array<double, kNumJoints> angles{};

  static JointVector zeros() { return {}; }
  /// Throws InvalidInput on wrong length or non-finite values, LimitError
  /// when any angle is outside [-pi/2, pi/2].
  static JointVector from(std::span<const double> values);

  double& operator[](std::size_t i) { return angles[i]; }
  double operator[](std::size_t i) const { return angles[i]; }
  bool within_limits() const;
  /// Throws LimitError if any angle violates the limits.
  void validate() const;

  bool operator==(const JointVector&) const = default;
};

struct ClampResult {
  JointVector joints;
  bool clamped = false;
};

/// Clamps each component to the joint limits (inclusive). Non-finite input
/// is rejected with InvalidInput.
ClampResult clamp_joints(std::span<const double> q);

struct Pose {
  Vec3 position = Vec3::Zero();
  Mat3 rotation = Mat3::Identity();

  Pose operator*(const Pose& rhs) const {
    return {position + rotation * rhs.position, rotation * rhs.rotation};
  }
  Vec3 apply(const Vec3& p) const { return position + rotation * p; }
  Pose inverse() const {
    Mat3 rt = rotation.transpose();
    return {-(rt * position), rt};
  }
};

/// First two columns of a rotation matrix, stored column-major (c1, c2).
using Rot6D = std::array<double, 6>;

Rot6D rotation_to_6d(const Mat3& rotation);
/// Gram-Schmidt reconstruction; throws DegenerateRotation when the columns
/// are zero or parallel.
Mat3 rotation_from_6d(const Rot6D& v);

struct CameraPose {
  Pose pose;
  Rot6D orientation6d() const { return rotation_to_6d(pose.rotation); }
  /// Position (3) followed by the 6D orientation.
  std::array<double, 9> as_vector() const;
};

/// Rigid mount of one camera on a link frame. The camera looks along its
/// local +z, with +x to the image right and +y to the image bottom.
struct CameraMount {
  int link = 0;  // frame index: 1..8 body links, 9 head
  Vec3 offset = Vec3::Zero();
  Mat3 orientation = Mat3::Identity();
};

struct ChainGeometry {
  int n_joints = kNumJoints;
  double link_pitch = 0.06;
  double body_radius = 0.02;
  double head_length = 0.03;
  std::vector<Vec3> joint_axes;
  std::vector<CameraMount> camera_mounts;

  /// Alternating x/y axes, 16 body cameras on links 1..8 and five head cameras.
  static ChainGeometry default_geometry();
  /// Rebuilds camera mounts from the current pitch, radius and axes.
  void rebuild_camera_mounts(double head_corner_offset = 0.012);
  /// Throws InvalidInput when the structural invariants are broken.
  void validate() const;
};

/// Link frames 0..8 followed by the head frame (10 poses, base frame).
/// Frame i+1 = frame i * Trans(0, 0, pitch) * Rot(axis_i, q_i); frame 0 is
/// the fixed base link at the origin.
std::vector<Pose> forward_kinematics(const ChainGeometry& geom, const JointVector& q);

/// 21 camera poses indexed by camera id.
std::vector<CameraPose> camera_poses(const ChainGeometry& geom, const JointVector& q);
std::vector<CameraPose> camera_poses_from_frames(const ChainGeometry& geom,
                                                 const std::vector<Pose>& frames);

/// 3D body segments (capsule axes) for links 0..8 and the head.
struct Segment {
  Vec3 a;
  Vec3 b;
  int link = 0;
};
std::vector<Segment> body_segments(const ChainGeometry& geom, const std::vector<Pose>& frames);

Mat3 axis_angle(const Vec3& axis, double angle);

void to_json(nlohmann::json& j, const ChainGeometry& g);
void from_json(const nlohmann::json& j, ChainGeometry& g);

}  // namespace panoptes::kin
