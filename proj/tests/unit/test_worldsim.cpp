#include <doctest.h>

#include <cmath>

#include "panoptes/worldsim.hpp"

using namespace panoptes;
using namespace panoptes::sim;

namespace {

JointVector lying_along_minus_y() {
  JointVector q;
  q[0] = kPi / 2;
  return q;
}

WorldState with_objects(std::vector<Vec2> centers, const JointVector& q = {}) {
  WorldState s;
  s.joints = q;
  s.targets = q;
  int id = 0;
  for (const auto& c : centers) {
    Object o;
    o.id = id++;
    o.position = c;
    s.objects.push_back(o);
  }
  return s;
}

double wrap(double a) { return std::atan2(std::sin(a), std::cos(a)); }

}  // namespace

TEST_CASE("spawn_scene") {
  SceneConfig cfg;
  cfg.seed = 7;
  const WorldModel model;
  const auto a = spawn_scene(cfg, model);
  const auto b = spawn_scene(cfg, model);
  CHECK(a.to_bytes() == b.to_bytes());
  REQUIRE(a.objects.size() == 24);
  for (std::size_t i = 0; i < a.objects.size(); ++i)
    for (std::size_t j = i + 1; j < a.objects.size(); ++j) {
      const auto& p = a.objects[i];
      const auto& q = a.objects[j];
      CHECK((p.position - q.position).norm() - p.radius - q.radius >= 0.0);
    }
  for (const auto& o : a.objects) {
    CHECK_FALSE(a.zone.contains(o.position));
    CHECK_FALSE(o.toppled);
  }

  cfg.seed = 8;
  CHECK(spawn_scene(cfg, model).to_bytes() != a.to_bytes());

  cfg.object_count = 0;
  CHECK(spawn_scene(cfg, model).objects.empty());

  cfg.object_count = 500;
  cfg.max_attempts = 2000;
  CHECK_THROWS_AS(spawn_scene(cfg, model), PlacementError);
}

TEST_CASE("step keeps still objects still and advances time") {
  SceneConfig cfg;
  cfg.seed = 3;
  const WorldModel model;
  const auto s0 = spawn_scene(cfg, model);
  const auto s1 = step(model, s0, s0.joints, 1.0 / 30);
  CHECK(s1.time == doctest::Approx(s0.time + 1.0 / 30));
  for (std::size_t i = 0; i < s0.objects.size(); ++i) CHECK(s1.objects[i].position == s0.objects[i].position);
  CHECK_THROWS_AS(step(model, s0, s0.joints, 0.0), InvalidInput);
  CHECK_THROWS_AS(step(model, s0, s0.joints, 0.5), InvalidInput);
}

TEST_CASE("disc in the sweep path is pushed out along the contact normal") {
  // Chain lying along -y at axis height 0.06; a disc whose center is 1 cm
  // off the axis overlaps by r + R - 0.01 and must end up exactly touching.
  const WorldModel model;
  const double R = model.geometry.body_radius;
  auto s = with_objects({{0.01, -0.3}}, lying_along_minus_y());
  const double r = s.objects[0].radius;
  const auto out = step(model, s, s.joints, 1.0 / 30);
  CHECK(out.objects[0].position.x() == doctest::Approx(r + R).epsilon(1e-6));
  CHECK(out.objects[0].position.y() == doctest::Approx(-0.3).epsilon(1e-9));
  CHECK_FALSE(out.objects[0].toppled);

  SUBCASE("closed-form contact") {
    Object o;
    o.position = {0.01, -0.3};
    const auto c = disc_capsule_contact(o, {0, 0, 0.06}, {0, -0.5, 0.06}, R, model.params.table_height);
    REQUIRE(c.touching);
    CHECK(c.push.x() == doctest::Approx(r + R - 0.01));
    CHECK(c.push.y() == doctest::Approx(0.0));
    CHECK(c.contact_height == doctest::Approx(0.06 - model.params.table_height));
  }
  SUBCASE("a capsule above the object's height band does not touch it") {
    Object o;
    o.position = {0.0, -0.3};
    const double z = model.params.table_height + o.height + R + 0.001;
    CHECK_FALSE(disc_capsule_contact(o, {0, 0, z}, {0, -0.5, z}, R, model.params.table_height).touching);
  }
  SUBCASE("a high contact topples the object") {
    Object o;
    o.position = {0.01, -0.3};
    o.height = 0.02;
    auto tall = with_objects({}, lying_along_minus_y());
    tall.objects.push_back(o);
    CHECK(step(model, tall, tall.joints, 1.0 / 30).objects[0].toppled);
  }
}

TEST_CASE("joints reach targets within the velocity-limit time") {
  const WorldModel model;
  auto s = with_objects({});
  JointVector target;
  target[2] = 1.0;
  target[5] = -0.5;
  const double bound = 1.0 / model.params.max_joint_velocity;
  int n = 0;
  while (s.joints[2] != target[2] || s.joints[5] != target[5]) {
    s = step(model, s, target, 1.0 / 30);
    ++n;
    REQUIRE(n < 100);
  }
  CHECK(n == static_cast<int>(std::ceil(bound * 30 - 1e-9)));
}

TEST_CASE("success metric") {
  auto s = with_objects({});
  CHECK_THROWS_AS(success_metric(s), UndefinedMetric);
  for (int i = 0; i < 24; ++i) {
    Object o;
    o.position = i < 12 ? Vec2(0.01 * (i % 4) - 0.02, 0.01 * (i / 4)) : Vec2(0.3, 0.02 * i - 0.3);
    s.objects.push_back(o);
  }
  CHECK(success_metric(s) == 0.5);

  SUBCASE("zone boundary counts as inside") {
    auto e = with_objects({{0.1, 0.0}, {0.1, 0.1}});
    CHECK(success_metric(e) == 1.0);
  }
  SUBCASE("moving one outside object inside adds exactly 1/n") {
    Rng rng(5);
    for (int n = 0; n < 50; ++n) {
      auto t = s;
      std::vector<std::size_t> outside;
      for (std::size_t i = 0; i < t.objects.size(); ++i)
        if (!t.zone.contains(t.objects[i].position)) outside.push_back(i);
      const double before = success_metric(t);
      t.objects[outside[rng.below(outside.size())]].position = {rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)};
      CHECK(success_metric(t) == doctest::Approx(before + 1.0 / 24).epsilon(1e-12));
    }
  }
  SUBCASE("all inside") {
    for (auto& o : s.objects) o.position = {0.0, 0.0};
    CHECK(success_metric(s) == 1.0);
  }
}

TEST_CASE("random stepping: deterministic, finite, on the table, isolated objects fixed") {
  const WorldModel model;
  SceneConfig cfg;
  cfg.seed = 21;
  auto s = spawn_scene(cfg, model);
  Object far;
  far.id = 99;
  far.position = {-0.55, 0.55};
  s.objects.push_back(far);
  Rng rng(9);
  for (int n = 0; n < 300; ++n) {
    JointVector q;
    for (auto& a : q.angles) a = rng.uniform(-kJointLimit, kJointLimit);
    const auto a = step(model, s, q, 1.0 / 30);
    const auto b = step(model, s, q, 1.0 / 30);
    REQUIRE(a.to_bytes() == b.to_bytes());
    s = a;
    for (const auto& o : s.objects) {
      REQUIRE(std::isfinite(o.position.x()));
      REQUIRE(std::isfinite(o.position.y()));
      CHECK(std::abs(o.position.x()) <= model.params.table_half_extent);
      CHECK(std::abs(o.position.y()) <= model.params.table_half_extent);
    }
  }
  CHECK(s.objects.back().position == far.position);
}

TEST_CASE("scripted expert") {
  const WorldModel model;
  SUBCASE("everything in the zone: home posture") {
    auto s = with_objects({{0.0, 0.05}, {-0.05, 0.0}});
    ScriptedExpert ex(model);
    CHECK(ex.next_targets(s) == home_posture());
    CHECK(ex.idle());
  }
  SUBCASE("single object in any direction is swept into the zone") {
    for (double th : {0.3, 1.2, 2.5, -0.4, -1.5, -2.8}) {
      auto s = with_objects({{0.3 * std::cos(th), 0.3 * std::sin(th)}});
      ScriptedExpert ex(model);
      for (int t = 0; t < 600 && !ex.idle(); ++t) s = step(model, s, ex.next_targets(s), 1.0 / 30);
      CHECK(ex.idle());
      CHECK_FALSE(s.objects[0].toppled);
      CHECK(success_metric(s) == 1.0);
    }
  }
  SUBCASE("deterministic") {
    SceneConfig cfg;
    cfg.seed = 4;
    auto s = spawn_scene(cfg, model);
    ScriptedExpert a(model), b(model);
    for (int t = 0; t < 60; ++t) {
      const auto qa = a.next_targets(s);
      REQUIRE(qa == b.next_targets(s));
      s = step(model, s, qa, 1.0 / 30);
    }
  }
}

// Regression bound, measured once (17 of 24 objects) and pinned.
constexpr double kExpertSeed7Bound = 0.70;

TEST_CASE("scripted expert on seed 7 clears most of the table within 3000 steps" * doctest::timeout(900)) {
  const WorldModel model;
  SceneConfig cfg;
  cfg.seed = 7;
  auto s = spawn_scene(cfg, model);
  ScriptedExpert ex(model);
  for (int t = 0; t < 3000 && !ex.idle(); ++t) s = step(model, s, ex.next_targets(s), 1.0 / 30);
  CHECK(success_metric(s) >= kExpertSeed7Bound);
}
