#include "panoptes/kinematics.hpp"

#include <algorithm>
#include <fmt/format.h>

namespace panoptes::kin {

namespace {

Vec3 vec_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw InvalidInput("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

nlohmann::json vec_to_json(const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

// Columns x, y, z of a camera frame from its optical axis and image-down axis.
Mat3 camera_frame(const Vec3& optical_axis, const Vec3& image_down) {
  Mat3 r;
  r.col(2) = optical_axis.normalized();
  r.col(1) = image_down.normalized();
  r.col(0) = r.col(1).cross(r.col(2));
  return r;
}

}  // namespace

JointVector JointVector::from(std::span<const double> values) {
  if (values.size() != kNumJoints) {
    throw InvalidInput(fmt::format("joint vector needs {} values, got {}", kNumJoints, values.size()));
  }
  JointVector q;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) throw InvalidInput(fmt::format("joint {} is not finite", i));
    q.angles[i] = values[i];
  }
  q.validate();
  return q;
}

bool JointVector::within_limits() const {
  return std::all_of(angles.begin(), angles.end(),
                     [](double a) { return std::isfinite(a) && a >= -kJointLimit && a <= kJointLimit; });
}

void JointVector::validate() const {
  for (std::size_t i = 0; i < angles.size(); ++i) {
    const double a = angles[i];
    if (!std::isfinite(a) || a < -kJointLimit || a > kJointLimit) {
      throw LimitError(fmt::format("joint {} = {} outside [-pi/2, pi/2]", i, a));
    }
  }
}

ClampResult clamp_joints(std::span<const double> q) {
  if (q.size() != kNumJoints) {
    throw InvalidInput(fmt::format("joint vector needs {} values, got {}", kNumJoints, q.size()));
  }
  ClampResult out;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (!std::isfinite(q[i])) throw InvalidInput(fmt::format("joint {} is not finite", i));
    const double c = std::clamp(q[i], -kJointLimit, kJointLimit);
    out.clamped |= (c != q[i]);
    out.joints.angles[i] = c;
  }
  return out;
}

Rot6D rotation_to_6d(const Mat3& r) {
  return {r(0, 0), r(1, 0), r(2, 0), r(0, 1), r(1, 1), r(2, 1)};
}

Mat3 rotation_from_6d(const Rot6D& v) {
  const Vec3 a(v[0], v[1], v[2]);
  const Vec3 b(v[3], v[4], v[5]);
  for (double x : v) {
    if (!std::isfinite(x)) throw DegenerateRotation("6D rotation has non-finite entries");
  }
  const double na = a.norm();
  if (na < 1e-12) throw DegenerateRotation("first column is zero");
  const Vec3 c1 = a / na;
  const Vec3 b_perp = b - c1.dot(b) * c1;
  const double nb = b_perp.norm();
  if (nb < 1e-12 * std::max(1.0, b.norm())) throw DegenerateRotation("columns are parallel or zero");
  const Vec3 c2 = b_perp / nb;
  Mat3 r;
  r.col(0) = c1;
  r.col(1) = c2;
  r.col(2) = c1.cross(c2);
  return r;
}

std::array<double, 9> CameraPose::as_vector() const {
  const Rot6D o = orientation6d();
  return {pose.position.x(), pose.position.y(), pose.position.z(), o[0], o[1], o[2], o[3], o[4], o[5]};
}

Mat3 axis_angle(const Vec3& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

ChainGeometry ChainGeometry::default_geometry() {
  ChainGeometry g;
  g.joint_axes.clear();
  for (int i = 0; i < kNumJoints; ++i) {
    g.joint_axes.push_back(i % 2 == 0 ? Vec3::UnitX() : Vec3::UnitY());
  }
  g.rebuild_camera_mounts();
  return g;
}

void ChainGeometry::rebuild_camera_mounts(double head_corner_offset) {
  camera_mounts.clear();
  const double standoff = body_radius + 0.001;
  for (int link = 1; link <= 8; ++link) {
    const Vec3 axis = joint_axes.at(static_cast<std::size_t>(link - 1)).normalized();
    const Vec3 normal = Vec3::UnitZ().cross(axis).normalized();
    for (double side : {1.0, -1.0}) {
      CameraMount m;
      m.link = link;
      m.offset = side * standoff * normal + Vec3(0, 0, 0.5 * link_pitch);
      m.orientation = camera_frame(side * normal, -Vec3::UnitZ());
      camera_mounts.push_back(m);
    }
  }
  const double c = head_corner_offset;
  for (auto [sx, sy] : {std::pair{1.0, 1.0}, {-1.0, 1.0}, {-1.0, -1.0}, {1.0, -1.0}}) {
    CameraMount m;
    m.link = 9;
    m.offset = Vec3(sx * c, sy * c, 0.5 * head_length);
    m.orientation = camera_frame(-Vec3::UnitZ(), Vec3::UnitX());
    camera_mounts.push_back(m);
  }
  CameraMount up;
  up.link = 9;
  up.offset = Vec3(0, 0, head_length + 0.001);
  up.orientation = camera_frame(Vec3::UnitZ(), Vec3::UnitX());
  camera_mounts.push_back(up);
}

void ChainGeometry::validate() const {
  if (n_joints != kNumJoints) throw InvalidInput(fmt::format("n_joints must be {}", kNumJoints));
  if (static_cast<int>(joint_axes.size()) != n_joints) throw InvalidInput("joint_axes length mismatch");
  if (!(link_pitch > 0) || !(body_radius > 0) || !(head_length >= 0)) {
    throw InvalidInput("link_pitch and body_radius must be positive");
  }
  for (std::size_t i = 0; i < joint_axes.size(); ++i) {
    if (std::abs(joint_axes[i].norm() - 1.0) > 1e-9) throw InvalidInput(fmt::format("joint axis {} is not unit", i));
    if (i > 0 && std::abs(joint_axes[i].dot(joint_axes[i - 1])) > 1e-9) {
      throw InvalidInput(fmt::format("joint axes {} and {} are not perpendicular", i - 1, i));
    }
  }
  if (camera_mounts.size() != static_cast<std::size_t>(kNumCameras)) {
    throw InvalidInput(fmt::format("expected {} camera mounts, got {}", kNumCameras, camera_mounts.size()));
  }
  for (const auto& m : camera_mounts) {
    if (m.link < 1 || m.link > 9) throw InvalidInput("camera mount link index must be in 1..9");
    const Mat3 should_be_identity = m.orientation.transpose() * m.orientation;
    if (!should_be_identity.isIdentity(1e-9) || std::abs(m.orientation.determinant() - 1.0) > 1e-9) {
      throw InvalidInput("camera mount orientation is not a rotation");
    }
  }
}

std::vector<Pose> forward_kinematics(const ChainGeometry& geom, const JointVector& q) {
  q.validate();
  std::vector<Pose> frames;
  frames.reserve(kNumJoints + 1);
  frames.emplace_back();
  const Vec3 step(0, 0, geom.link_pitch);
  for (int i = 0; i < kNumJoints; ++i) {
    const Pose& parent = frames.back();
    Pose child;
    child.position = parent.apply(step);
    child.rotation = parent.rotation * axis_angle(geom.joint_axes[static_cast<std::size_t>(i)], q[static_cast<std::size_t>(i)]);
    frames.push_back(child);
  }
  return frames;
}

std::vector<CameraPose> camera_poses_from_frames(const ChainGeometry& geom, const std::vector<Pose>& frames) {
  std::vector<CameraPose> out;
  out.reserve(geom.camera_mounts.size());
  for (const auto& m : geom.camera_mounts) {
    const Pose& link = frames.at(static_cast<std::size_t>(m.link));
    out.push_back({link * Pose{m.offset, m.orientation}});
  }
  return out;
}

std::vector<CameraPose> camera_poses(const ChainGeometry& geom, const JointVector& q) {
  return camera_poses_from_frames(geom, forward_kinematics(geom, q));
}

std::vector<Segment> body_segments(const ChainGeometry& geom, const std::vector<Pose>& frames) {
  std::vector<Segment> segs;
  segs.reserve(frames.size());
  for (std::size_t i = 0; i + 1 < frames.size(); ++i) {
    segs.push_back({frames[i].position, frames[i + 1].position, static_cast<int>(i)});
  }
  const Pose& head = frames.back();
  segs.push_back({head.position, head.apply(Vec3(0, 0, geom.head_length)), static_cast<int>(frames.size() - 1)});
  return segs;
}

void to_json(nlohmann::json& j, const ChainGeometry& g) {
  j = nlohmann::json::object();
  j["n_joints"] = g.n_joints;
  j["link_pitch_m"] = g.link_pitch;
  j["body_radius_m"] = g.body_radius;
  j["head_length_m"] = g.head_length;
  auto axes = nlohmann::json::array();
  for (const auto& a : g.joint_axes) axes.push_back(vec_to_json(a));
  j["joint_axes"] = axes;
  auto mounts = nlohmann::json::array();
  for (const auto& m : g.camera_mounts) {
    nlohmann::json mj;
    mj["link"] = m.link;
    mj["offset_m"] = vec_to_json(m.offset);
    auto rows = nlohmann::json::array();
    for (int r = 0; r < 3; ++r) rows.push_back(vec_to_json(m.orientation.row(r).transpose()));
    mj["rotation"] = rows;
    mounts.push_back(mj);
  }
  j["camera_mounts"] = mounts;
}

void from_json(const nlohmann::json& j, ChainGeometry& g) {
  g = ChainGeometry::default_geometry();
  g.n_joints = j.value("n_joints", g.n_joints);
  g.link_pitch = j.value("link_pitch_m", g.link_pitch);
  g.body_radius = j.value("body_radius_m", g.body_radius);
  g.head_length = j.value("head_length_m", g.head_length);
  if (j.contains("joint_axes")) {
    g.joint_axes.clear();
    for (const auto& a : j.at("joint_axes")) g.joint_axes.push_back(vec_from_json(a));
  }
  if (j.contains("camera_mounts")) {
    g.camera_mounts.clear();
    for (const auto& mj : j.at("camera_mounts")) {
      CameraMount m;
      m.link = mj.at("link").get<int>();
      m.offset = vec_from_json(mj.at("offset_m"));
      const auto& rows = mj.at("rotation");
      if (!rows.is_array() || rows.size() != 3) throw InvalidInput("rotation must be 3 rows");
      for (int r = 0; r < 3; ++r) m.orientation.row(r) = vec_from_json(rows[static_cast<std::size_t>(r)]).transpose();
      g.camera_mounts.push_back(m);
    }
  } else {
    g.rebuild_camera_mounts();
  }
  g.validate();
}

}  // namespace panoptes::kin
