#include <algorithm>

#include "panoptes/worldsim.hpp"

namespace panoptes::sim {

namespace {

constexpr double kDeg = kPi / 180.0;

double wrap(double a) {
  while (a > kPi) a -= 2 * kPi;
  while (a < -kPi) a += 2 * kPi;
  return a;
}

double max_abs_error(const JointVector& a, const JointVector& b) {
  double e = 0;
  for (int i = 0; i < kNumJoints; ++i) e = std::max(e, std::abs(a[i] - b[i]));
  return e;
}


std::vector<double> object_snapshot(const WorldState& s) {
  std::vector<double> v;
  for (const auto& o : s.objects) {
    v.push_back(o.position.x());
    v.push_back(o.position.y());
    v.push_back(o.toppled ? 1.0 : 0.0);
  }
  return v;
}

}  // namespace


// Joint-space heading convention for a chain lying on the table. With side
// s = +1 the base joint tips the chain toward -y and joint 1 yaws about +z;
// with s = -1 toward +y and about -z. Yaw joints 3, 5, 7 turn the same way.
ScriptedExpert::Plan ScriptedExpert::make_plan(const Candidate& c) const {
  const double s = c.side;
  const double base_heading = -s * kPi / 2;
  const double q1 = std::clamp(s * wrap(c.heading - base_heading), -kJointLimit, kJointLimit);
  const double raised = s * kRaisedBase;

  Plan plan;
  JointVector w;
  w[0] = raised;
  w[1] = q1;
  plan.push_back(w);  // transit, chain raised
  w[0] = s * kJointLimit;
  plan.push_back(w);  // land
  // A shortened reach lifts the links past the given pitch joint off the
  // table; pick the sign that raises the head.
  std::vector<int> curl_joints;
  for (int j : {3, 5, 7}) {
    if (c.reach == 0 || j < c.reach) curl_joints.push_back(j);
  }
  if (c.reach > 0) {
    double best_z = -1e9;
    double best_q = 0;
    for (double sign : {1.0, -1.0}) {
      JointVector probe = w;
      probe[static_cast<std::size_t>(c.reach)] = sign * kLiftAngle;
      const double z = kin::forward_kinematics(model_.geometry, probe).back().position.z();
      if (z > best_z) {
        best_z = z;
        best_q = sign * kLiftAngle;
      }
    }
    plan.front()[static_cast<std::size_t>(c.reach)] = best_q;
    w[static_cast<std::size_t>(c.reach)] = best_q;
    plan.back() = w;
  }
  const int ramp = 4;
  for (int i = 1; i <= ramp; ++i) {
    const double u = static_cast<double>(i) / ramp;
    JointVector v = w;
    for (int j : curl_joints) v[static_cast<std::size_t>(j)] = s * c.dir * u * c.curl;
    v[1] = std::clamp(q1 + s * c.dir * u * c.swing, -kJointLimit, kJointLimit);
    plan.push_back(v);
  }
  JointVector up = plan.back();
  up[0] = raised;
  plan.push_back(up);  // lift off with the curl held
  return plan;
}

std::vector<ScriptedExpert::Candidate> ScriptedExpert::candidates_for(const Vec2& target, bool fine) const {
  static const std::vector<double> kCoarseOffsets{10, 30, 50}, kFineOffsets{0, 5, 20, 40, 60, 75};
  static const std::vector<int> kCoarseReach{0, 4}, kFineReach{0, 4, 6};
  static const std::vector<double> kCoarseCurl{45, 90}, kFineCurl{0, 20, 45, 90};
  static const std::vector<double> kCoarseSwing{0, 60}, kFineSwing{0, 30, 90};
  std::vector<Candidate> out;
  const double psi = bearing(target);
  for (double dir : {1.0, -1.0}) {
    for (double offset : fine ? kFineOffsets : kCoarseOffsets) {
      const double h = wrap(psi - dir * offset * kDeg);
      for (double side : {1.0, -1.0}) {
        // Reachable headings: [-pi, 0] for side +1, [0, pi] for side -1.
        const double sh = std::sin(h);
        if (side > 0 ? sh > 1e-9 : sh < -1e-9) continue;
        for (int reach : fine ? kFineReach : kCoarseReach) {
          for (double curl : fine ? kFineCurl : kCoarseCurl) {
            for (double swing : fine ? kFineSwing : kCoarseSwing) {
              if (curl == 0 && swing == 0) continue;
              out.push_back({side, h, dir, curl * kDeg, swing * kDeg, reach});
            }
          }
        }
      }
    }
  }
  return out;
}

WorldState ScriptedExpert::simulate(const WorldState& start, const Plan& plan, int* ticks) const {
  WorldState s = start;
  int n = 0;
  for (const auto& wp : plan) {
    for (int t = 0; t < kMaxTicksPerWaypoint; ++t) {
      s = step(model_, s, wp, 1.0 / kControlRate);
      ++n;
      if (max_abs_error(s.joints, wp) < kSettle) break;
    }
  }
  if (ticks) *ticks = n;
  return s;
}

double ScriptedExpert::score(const WorldState& before, const WorldState& after) {
  double gain = 0;
  for (std::size_t i = 0; i < before.objects.size(); ++i) {
    const Object& a = before.objects[i];
    const Object& b = after.objects[i];
    const bool in_a = !a.toppled && before.zone.contains(a.position);
    const bool in_b = !b.toppled && after.zone.contains(b.position);
    gain += (in_b ? 1.0 : 0.0) - (in_a ? 1.0 : 0.0);
    if (b.toppled && !a.toppled) gain -= kTopplePenalty;
    if (!b.toppled) gain += 2.0 * (a.position.norm() - b.position.norm());
  }
  return gain;
}

JointVector ScriptedExpert::next_targets(const WorldState& state) {
  if (plan_index_ < plan_.size()) {
    const JointVector& wp = plan_[plan_index_];
    ++ticks_on_waypoint_;
    if (max_abs_error(state.joints, wp) < kSettle || ticks_on_waypoint_ >= kMaxTicksPerWaypoint) {
      ++plan_index_;
      ticks_on_waypoint_ = 0;
    }
    if (plan_index_ < plan_.size()) return plan_[plan_index_];
  }

  std::vector<const Object*> remaining;
  for (const auto& o : state.objects) {
    if (!o.toppled && !state.zone.contains(o.position)) remaining.push_back(&o);
  }
  if (remaining.empty()) {
    idle_ = true;
    plan_.clear();
    target_.reset();
    phase_ = Phase::kHome;
    return home_posture();
  }
  // Nothing worth doing last time: hold still and replan only once the
  // joints have settled with something moved in the meantime.
  if (stalled_ && (max_abs_error(state.joints, hold_) > kSettle || stalled_objects_ == object_snapshot(state))) {
    return hold_;
  }

  // Plan the next sweep: targets ordered farthest first.
  std::stable_sort(remaining.begin(), remaining.end(),
                   [](const Object* a, const Object* b) { return a->position.norm() > b->position.norm(); });

  plan_.clear();
  plan_index_ = 0;
  ticks_on_waypoint_ = 0;
  target_.reset();
  double best_score = kMinGain;
  auto search = [&](const Object& target, bool fine) {
    for (const auto& c : candidates_for(target.position, fine)) {
      Plan p = make_plan(c);
      const double sc = score(state, simulate(state, p, nullptr));
      if (sc > best_score) {
        best_score = sc;
        plan_ = std::move(p);
        target_ = target.id;
      }
    }
  };
  for (const Object* o : remaining) {
    search(*o, false);
    if (target_) break;
  }
  // Nothing moves with the coarse primitives: try finer nudges on the
  // objects closest to the zone.
  if (!target_ && fine_searches_ < kMaxFineSearches) {
    ++fine_searches_;
    std::vector<const Object*> near(remaining.rbegin(), remaining.rend());
    if (near.size() > kFineTargets) near.resize(kFineTargets);
    for (const Object* o : near) search(*o, true);
  }
  stalled_ = plan_.empty();
  idle_ = stalled_;
  if (stalled_) {
    stalled_objects_ = object_snapshot(state);
    hold_ = state.targets;
    phase_ = Phase::kHome;
    return hold_;
  }
  phase_ = Phase::kSweep;
  return plan_.front();
}

}  // namespace panoptes::sim
