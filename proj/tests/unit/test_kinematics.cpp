#include <doctest.h>

#include <Eigen/Geometry>
#include <cmath>
#include <limits>

#include "panoptes/kinematics.hpp"

using namespace panoptes;
using namespace panoptes::kin;

namespace {

JointVector first_joint(double a) {
  JointVector q;
  q[0] = a;
  return q;
}

Mat3 rx(double a) { return Eigen::AngleAxisd(a, Vec3::UnitX()).toRotationMatrix(); }
Mat3 rz(double a) { return Eigen::AngleAxisd(a, Vec3::UnitZ()).toRotationMatrix(); }

}  // namespace

TEST_CASE("straight chain puts the head at nine pitches along z") {
  const auto geom = ChainGeometry::default_geometry();
  const auto frames = forward_kinematics(geom, JointVector::zeros());
  REQUIRE(frames.size() == 10);
  CHECK((frames[9].position - Vec3(0, 0, 9 * 0.06)).norm() < 1e-12);
  CHECK((frames[9].rotation - Mat3::Identity()).norm() < 1e-12);
}

TEST_CASE("base joint at pi/2 tips the rest of the chain onto -y") {
  // Joint 0 sits one pitch above the base; the remaining 8 pitches follow
  // Rx(pi/2) * z = -y.
  const auto frames = forward_kinematics(ChainGeometry::default_geometry(), first_joint(kPi / 2));
  CHECK((frames[9].position - Vec3(0, -0.48, 0.06)).norm() < 1e-12);
}

TEST_CASE("axes alternate x and y") {
  const auto geom = ChainGeometry::default_geometry();
  for (int i = 0; i < kNumJoints; ++i)
    CHECK(geom.joint_axes[static_cast<std::size_t>(i)] == (i % 2 == 0 ? Vec3::UnitX() : Vec3::UnitY()));
}

TEST_CASE("limit violations are rejected") {
  JointVector q;
  q[3] = 1.6;
  CHECK_THROWS_AS(forward_kinematics(ChainGeometry::default_geometry(), q), LimitError);
  const double bad[9] = {0, 0, std::numeric_limits<double>::quiet_NaN(), 0, 0, 0, 0, 0, 0};
  CHECK_THROWS_AS(JointVector::from(bad), InvalidInput);
  const double eight[8] = {};
  CHECK_THROWS_AS(JointVector::from(eight), InvalidInput);
}

TEST_CASE("camera poses") {
  const auto geom = ChainGeometry::default_geometry();
  const auto frames0 = forward_kinematics(geom, JointVector::zeros());
  const auto cams0 = camera_poses(geom, JointVector::zeros());
  REQUIRE(cams0.size() == kNumCameras);

  SUBCASE("body camera 0 is link pose composed with its mount") {
    const auto& m = geom.camera_mounts[0];
    const Pose expect = frames0[static_cast<std::size_t>(m.link)] * Pose{m.offset, m.orientation};
    CHECK((cams0[0].pose.position - expect.position).norm() < 1e-12);
    CHECK((cams0[0].pose.rotation - expect.rotation).norm() < 1e-12);
  }

  SUBCASE("mounts are rigid") {
    Rng rng(11);
    for (int n = 0; n < 50; ++n) {
      JointVector q;
      for (auto& a : q.angles) a = rng.uniform(-kJointLimit, kJointLimit);
      const auto frames = forward_kinematics(geom, q);
      const auto cams = camera_poses(geom, q);
      for (std::size_t c = 0; c < cams.size(); ++c) {
        const auto link = static_cast<std::size_t>(geom.camera_mounts[c].link);
        const double d0 = (cams0[c].pose.position - frames0[link].position).norm();
        CHECK(std::abs((cams[c].pose.position - frames[link].position).norm() - d0) < 1e-12);
      }
    }
  }

  SUBCASE("base joint rotates every camera about the joint-0 center") {
    const auto cams = camera_poses(geom, first_joint(kPi / 2));
    const Vec3 center(0, 0, geom.link_pitch);
    for (std::size_t c = 0; c < cams.size(); ++c) {
      REQUIRE(geom.camera_mounts[c].link >= 1);
      const Vec3 expect = center + rx(kPi / 2) * (cams0[c].pose.position - center);
      CHECK((cams[c].pose.position - expect).norm() < 1e-12);
      CHECK((cams[c].pose.rotation - rx(kPi / 2) * cams0[c].pose.rotation).norm() < 1e-12);
    }
  }

  SUBCASE("16 body cameras and 5 head cameras") {
    int head = 0;
    for (const auto& m : geom.camera_mounts) head += m.link == 9 ? 1 : 0;
    CHECK(head == 5);
    CHECK(geom.camera_mounts.size() - head == kNumBodyCameras);
  }
}

TEST_CASE("6D rotation representation") {
  const Rot6D id = rotation_to_6d(Mat3::Identity());
  CHECK(id == Rot6D{1, 0, 0, 0, 1, 0});
  const Rot6D z90 = rotation_to_6d(rz(kPi / 2));
  const Rot6D want{0, 1, 0, -1, 0, 0};
  for (int i = 0; i < 6; ++i) CHECK(z90[static_cast<std::size_t>(i)] == doctest::Approx(want[static_cast<std::size_t>(i)]).epsilon(1e-15));

  SUBCASE("round trip") {
    Rng rng(3);
    for (int n = 0; n < 1000; ++n) {
      const Mat3 r = Eigen::Quaterniond(rng.normal(), rng.normal(), rng.normal(), rng.normal()).normalized().toRotationMatrix();
      CHECK((rotation_from_6d(rotation_to_6d(r)) - r).cwiseAbs().maxCoeff() < 1e-9);
    }
  }
  SUBCASE("Gram-Schmidt output is a rotation") {
    const Mat3 r = rotation_from_6d({2, 0.1, 0, 0.5, 3, 0.2});
    CHECK((r.transpose() * r - Mat3::Identity()).norm() < 1e-12);
    CHECK(r.determinant() == doctest::Approx(1.0));
  }
  SUBCASE("degenerate inputs") {
    CHECK_THROWS_AS(rotation_from_6d({0, 0, 0, 0, 1, 0}), DegenerateRotation);
    CHECK_THROWS_AS(rotation_from_6d({1, 0, 0, 2, 0, 0}), DegenerateRotation);
    CHECK_THROWS_AS(rotation_from_6d({1, 0, 0, 0, 0, 0}), DegenerateRotation);
  }
}

TEST_CASE("clamp_joints") {
  const double over[9] = {2.0, 0, 0, 0, 0, 0, 0, 0, 0};
  auto r = clamp_joints(over);
  CHECK(r.clamped);
  CHECK(r.joints[0] == kJointLimit);

  const double zero[9] = {};
  r = clamp_joints(zero);
  CHECK_FALSE(r.clamped);
  CHECK(r.joints == JointVector::zeros());

  double edge[9];
  for (auto& v : edge) v = -kJointLimit;
  r = clamp_joints(edge);
  CHECK_FALSE(r.clamped);
  CHECK(r.joints.within_limits());

  const double inf[9] = {0, std::numeric_limits<double>::infinity(), 0, 0, 0, 0, 0, 0, 0};
  CHECK_THROWS_AS(clamp_joints(inf), InvalidInput);
}

TEST_CASE("geometry round-trips through JSON and rejects broken structure") {
  auto g = ChainGeometry::default_geometry();
  g.link_pitch = 0.07;
  g.rebuild_camera_mounts();
  const nlohmann::json j = g;
  ChainGeometry back = j.get<ChainGeometry>();
  CHECK(back.link_pitch == 0.07);
  CHECK(back.camera_mounts.size() == g.camera_mounts.size());
  g.joint_axes.pop_back();
  CHECK_THROWS_AS(g.validate(), InvalidInput);
}
