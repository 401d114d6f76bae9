#include "panoptes/worldsim.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fmt/format.h>

namespace panoptes::sim {

namespace {

constexpr std::array<Rgb, 8> kPalette = {{
    {230, 60, 50},
    {250, 160, 30},
    {240, 220, 40},
    {60, 190, 70},
    {40, 200, 210},
    {150, 80, 220},
    {240, 90, 180},
    {250, 250, 250},
}};

template <class T>
void put(std::vector<std::uint8_t>& out, const T& v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

Vec2 xy(const kin::Vec3& v) { return {v.x(), v.y()}; }

void clamp_to_table(Object& o, double half_extent) {
  const double lim = half_extent - o.radius;
  o.position.x() = std::clamp(o.position.x(), -lim, lim);
  o.position.y() = std::clamp(o.position.y(), -lim, lim);
}

// One Gauss-Seidel sweep over object pairs; returns the largest overlap seen.
double resolve_pairs(std::vector<Object>& objs, double half_extent) {
  double worst = 0.0;
  for (std::size_t i = 0; i < objs.size(); ++i) {
    for (std::size_t j = i + 1; j < objs.size(); ++j) {
      Vec2 d = objs[j].position - objs[i].position;
      const double min_d = objs[i].radius + objs[j].radius;
      double dist = d.norm();
      if (dist >= min_d) continue;
      const double overlap = min_d - dist;
      worst = std::max(worst, overlap);
      Vec2 n = dist > 1e-12 ? Vec2(d / dist) : Vec2(1.0, 0.0);
      objs[i].position -= 0.5 * overlap * n;
      objs[j].position += 0.5 * overlap * n;
      clamp_to_table(objs[i], half_extent);
      clamp_to_table(objs[j], half_extent);
    }
  }
  return worst;
}

}  // namespace

std::vector<std::uint8_t> WorldState::to_bytes() const {
  std::vector<std::uint8_t> out;
  put(out, time);
  for (double a : joints.angles) put(out, a);
  for (double a : targets.angles) put(out, a);
  put(out, zone.center.x());
  put(out, zone.center.y());
  put(out, zone.side);
  put(out, static_cast<std::uint32_t>(objects.size()));
  for (const auto& o : objects) {
    put(out, o.id);
    put(out, o.position.x());
    put(out, o.position.y());
    put(out, o.radius);
    put(out, o.height);
    put(out, o.color.r);
    put(out, o.color.g);
    put(out, o.color.b);
    put(out, static_cast<std::uint8_t>(o.toppled));
  }
  return out;
}

void to_json(nlohmann::json& j, const SceneConfig& c) {
  j = {{"object_count", c.object_count}, {"radius_min", c.radius_min}, {"radius_max", c.radius_max},
       {"height_min", c.height_min},     {"height_max", c.height_max}, {"spawn_r_min", c.spawn_r_min},
       {"spawn_r_max", c.spawn_r_max},   {"min_gap", c.min_gap},       {"zone_side", c.zone_side},
       {"seed", c.seed},                 {"max_attempts", c.max_attempts}};
}

void from_json(const nlohmann::json& j, SceneConfig& c) {
  static const std::vector<std::string> keys = {"object_count", "radius_min",  "radius_max", "height_min",
                                                "height_max",   "spawn_r_min", "spawn_r_max", "min_gap",
                                                "zone_side",    "seed",        "max_attempts"};
  for (const auto& [k, v] : j.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw InvalidInput("unknown scene key: " + k);
  }
  SceneConfig d;
  c.object_count = j.value("object_count", d.object_count);
  c.radius_min = j.value("radius_min", d.radius_min);
  c.radius_max = j.value("radius_max", d.radius_max);
  c.height_min = j.value("height_min", d.height_min);
  c.height_max = j.value("height_max", d.height_max);
  c.spawn_r_min = j.value("spawn_r_min", d.spawn_r_min);
  c.spawn_r_max = j.value("spawn_r_max", d.spawn_r_max);
  c.min_gap = j.value("min_gap", d.min_gap);
  c.zone_side = j.value("zone_side", d.zone_side);
  c.seed = j.value("seed", d.seed);
  c.max_attempts = j.value("max_attempts", d.max_attempts);
}

void to_json(nlohmann::json& j, const WorldParams& p) {
  j = {{"table_height", p.table_height},
       {"table_half_extent", p.table_half_extent},
       {"max_joint_velocity", p.max_joint_velocity},
       {"physics_rate", p.physics_rate},
       {"max_push_per_step", p.max_push_per_step},
       {"topple_ratio", p.topple_ratio},
       {"topple_min_push", p.topple_min_push},
       {"penetration_tol", p.penetration_tol},
       {"max_projection_iters", p.max_projection_iters}};
}

void from_json(const nlohmann::json& j, WorldParams& p) {
  WorldParams d;
  for (const auto& [k, v] : j.items()) {
    nlohmann::json probe;
    to_json(probe, d);
    if (!probe.contains(k)) throw InvalidInput("unknown world key: " + k);
  }
  p.table_height = j.value("table_height", d.table_height);
  p.table_half_extent = j.value("table_half_extent", d.table_half_extent);
  p.max_joint_velocity = j.value("max_joint_velocity", d.max_joint_velocity);
  p.physics_rate = j.value("physics_rate", d.physics_rate);
  p.max_push_per_step = j.value("max_push_per_step", d.max_push_per_step);
  p.topple_ratio = j.value("topple_ratio", d.topple_ratio);
  p.topple_min_push = j.value("topple_min_push", d.topple_min_push);
  p.penetration_tol = j.value("penetration_tol", d.penetration_tol);
  p.max_projection_iters = j.value("max_projection_iters", d.max_projection_iters);
}

void to_json(nlohmann::json& j, const WorldState& s) {
  auto objs = nlohmann::json::array();
  for (const auto& o : s.objects) {
    objs.push_back({{"id", o.id}, {"x", o.position.x()}, {"y", o.position.y()}, {"r", o.radius}});
  }
  j = {{"t", s.time},
       {"joints", s.joints.angles},
       {"targets", s.targets.angles},
       {"objects", objs},
       {"zone", {{"cx", s.zone.center.x()}, {"cy", s.zone.center.y()}, {"side", s.zone.side}}}};
}

JointVector home_posture() { return JointVector::zeros(); }

WorldState spawn_scene(const SceneConfig& cfg, const WorldModel& model) {
  if (cfg.object_count < 0) throw InvalidInput("object_count must be >= 0");
  if (!(cfg.zone_side > 0)) throw InvalidInput("zone side must be positive");
  if (!(cfg.radius_min > 0) || cfg.radius_max < cfg.radius_min) throw InvalidInput("bad radius range");
  if (!(cfg.height_min > 0) || cfg.height_max < cfg.height_min) throw InvalidInput("bad height range");
  const double base_clearance = model.geometry.body_radius + cfg.radius_max;
  if (cfg.spawn_r_min < base_clearance) {
    throw InvalidInput(fmt::format("spawn_r_min {} overlaps the robot base footprint ({})", cfg.spawn_r_min, base_clearance));
  }
  if (cfg.spawn_r_max < cfg.spawn_r_min) throw InvalidInput("spawn_r_max < spawn_r_min");
  if (cfg.spawn_r_max + cfg.radius_max > model.params.table_half_extent) {
    throw InvalidInput("spawn region exceeds the table");
  }

  WorldState s;
  s.zone.side = cfg.zone_side;
  s.joints = home_posture();
  s.targets = s.joints;
  Rng rng(cfg.seed);
  int attempts = 0;
  for (int i = 0; i < cfg.object_count; ++i) {
    Object o;
    o.id = i;
    o.radius = rng.uniform(cfg.radius_min, cfg.radius_max);
    o.height = rng.uniform(cfg.height_min, cfg.height_max);
    o.color = kPalette[rng.below(kPalette.size())];
    bool placed = false;
    while (!placed) {
      if (++attempts > cfg.max_attempts) {
        throw PlacementError(fmt::format("could not place object {} of {} within {} attempts", i,
                                         cfg.object_count, cfg.max_attempts));
      }
      // Area-uniform sampling in the annulus.
      const double r2min = cfg.spawn_r_min * cfg.spawn_r_min;
      const double r2max = cfg.spawn_r_max * cfg.spawn_r_max;
      const double r = std::sqrt(rng.uniform(r2min, r2max));
      const double th = rng.uniform(-kPi, kPi);
      o.position = Vec2(r * std::cos(th), r * std::sin(th));
      placed = std::all_of(s.objects.begin(), s.objects.end(), [&](const Object& other) {
        return (other.position - o.position).norm() >= other.radius + o.radius + cfg.min_gap;
      });
    }
    s.objects.push_back(o);
  }
  return s;
}

CapsuleContact disc_capsule_contact(const Object& obj, const kin::Vec3& a, const kin::Vec3& b,
                                    double capsule_radius, double table_height) {
  CapsuleContact out;
  // Parameter range where the capsule's vertical extent overlaps the disc.
  const double z_top = table_height + obj.height + capsule_radius;
  double t0 = 0.0, t1 = 1.0;
  const double dz = b.z() - a.z();
  if (std::abs(dz) < 1e-12) {
    if (a.z() >= z_top) return out;
  } else {
    const double t_cross = (z_top - a.z()) / dz;
    if (dz > 0) {
      t1 = std::min(t1, t_cross);
    } else {
      t0 = std::max(t0, t_cross);
    }
    if (t0 > t1) return out;
  }
  const Vec2 pa = xy(a);
  const Vec2 d = xy(b) - pa;
  const double len2 = d.squaredNorm();
  double t;
  if (len2 < 1e-14) {
    t = dz > 0 ? t0 : t1;  // lowest point of the clipped range
  } else {
    t = std::clamp((obj.position - pa).dot(d) / len2, t0, t1);
  }
  const Vec2 closest = pa + t * d;
  const Vec2 delta = obj.position - closest;
  const double dist = delta.norm();
  const double min_d = obj.radius + capsule_radius;
  if (dist >= min_d) return out;
  Vec2 n;
  if (dist > 1e-12) {
    n = delta / dist;
  } else if (len2 > 1e-14) {
    n = Vec2(-d.y(), d.x()).normalized();
  } else {
    n = Vec2(1.0, 0.0);
  }
  out.touching = true;
  out.push = (min_d - dist) * n;
  out.contact_height = std::max(0.0, a.z() + t * dz - table_height);
  return out;
}

WorldState step(const WorldModel& model, const WorldState& state, const JointVector& targets, double dt) {
  if (!(dt > 0.0) || dt > 0.1) throw InvalidInput(fmt::format("dt = {} outside (0, 0.1]", dt));
  targets.validate();
  const WorldParams& p = model.params;
  WorldState s = state;
  s.targets = targets;
  const int n_sub = std::max(1, static_cast<int>(std::ceil(dt * p.physics_rate - 1e-9)));
  const double h = dt / n_sub;
  const double max_dq = p.max_joint_velocity * h;
  const double max_push = p.max_push_per_step / n_sub;
  const double radius = model.geometry.body_radius;

  for (int sub = 0; sub < n_sub; ++sub) {
    for (int i = 0; i < kNumJoints; ++i) {
      const double err = targets[i] - s.joints[i];
      s.joints[i] += std::clamp(err, -max_dq, max_dq);
    }
    if (s.objects.empty()) continue;
    const auto frames = kin::forward_kinematics(model.geometry, s.joints);
    const auto segs = kin::body_segments(model.geometry, frames);

    for (int iter = 0; iter < p.max_projection_iters; ++iter) {
      double worst = 0.0;
      for (auto& o : s.objects) {
        for (const auto& seg : segs) {
          const CapsuleContact c = disc_capsule_contact(o, seg.a, seg.b, radius, p.table_height);
          if (!c.touching) continue;
          const double depth = c.push.norm();
          worst = std::max(worst, depth);
          Vec2 push = c.push;
          if (depth > max_push) push *= max_push / depth;
          o.position += push;
          clamp_to_table(o, p.table_half_extent);
          if (c.contact_height > p.topple_ratio * o.height && depth > p.topple_min_push) o.toppled = true;
        }
      }
      worst = std::max(worst, resolve_pairs(s.objects, p.table_half_extent));
      if (worst <= p.penetration_tol) break;
    }
  }
  // Objects pinned against the robot may leave residual pair overlap.
  for (int iter = 0; iter < 4 * p.max_projection_iters; ++iter) {
    if (resolve_pairs(s.objects, p.table_half_extent) <= 0.5 * p.penetration_tol) break;
  }
  s.time = state.time + dt;
  return s;
}

double success_metric(const WorldState& state) {
  if (state.objects.empty()) throw UndefinedMetric("success metric needs at least one object");
  const auto inside = std::count_if(state.objects.begin(), state.objects.end(),
                                    [&](const Object& o) { return !o.toppled && state.zone.contains(o.position); });
  return static_cast<double>(inside) / static_cast<double>(state.objects.size());
}

double bearing(const Vec2& p) { return std::atan2(p.y(), p.x()); }

}  // namespace panoptes::sim
