#include "panoptes/checks.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <Eigen/Geometry>
#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iterator>
#include <thread>

#include "panoptes/datastore.hpp"
#include "panoptes/kinematics.hpp"
#include "panoptes/policy.hpp"
#include "panoptes/rollout.hpp"
#include "panoptes/sensorbus.hpp"

namespace panoptes::chk {

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

CheckResult finish(std::string name, bool pass, std::string detail, Clock::time_point t0) {
  return {std::move(name), pass, std::move(detail), since(t0)};
}

std::vector<char> file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

// ---------------------------------------------------------------- kinematics oracle

Eigen::Matrix4d homogeneous(const Eigen::Matrix3d& r, const Eigen::Vector3d& t) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.block<3, 3>(0, 0) = r;
  m.block<3, 1>(0, 3) = t;
  return m;
}

kin::JointVector random_joints(Rng& rng) {
  kin::JointVector q;
  for (auto& a : q.angles) a = rng.uniform(-kJointLimit, kJointLimit);
  return q;
}

Eigen::Matrix3d random_rotation(Rng& rng) {
  Eigen::Quaterniond qt(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  return qt.normalized().toRotationMatrix();
}

}  // namespace

CheckResult fk_oracle(int configs, std::uint64_t seed) {
  const auto t0 = Clock::now();
  const auto geom = kin::ChainGeometry::default_geometry();
  Rng rng(seed);
  double worst = 0.0;
  for (int n = 0; n < configs; ++n) {
    const kin::JointVector q = random_joints(rng);
    const auto frames = kin::forward_kinematics(geom, q);
    const auto cams = kin::camera_poses_from_frames(geom, frames);

    std::vector<Eigen::Matrix4d> oracle{Eigen::Matrix4d::Identity()};
    for (int i = 0; i < kNumJoints; ++i) {
      const Eigen::Matrix4d trans = homogeneous(Eigen::Matrix3d::Identity(), {0, 0, geom.link_pitch});
      const Eigen::Matrix4d rot =
          homogeneous(Eigen::AngleAxisd(q[static_cast<std::size_t>(i)], geom.joint_axes[static_cast<std::size_t>(i)])
                          .toRotationMatrix(),
                      Eigen::Vector3d::Zero());
      oracle.push_back(oracle.back() * trans * rot);
    }
    auto compare = [&](const kin::Pose& p, const Eigen::Matrix4d& m) {
      worst = std::max(worst, (p.position - m.block<3, 1>(0, 3)).cwiseAbs().maxCoeff());
      worst = std::max(worst, (p.rotation - m.block<3, 3>(0, 0)).cwiseAbs().maxCoeff());
    };
    for (std::size_t i = 0; i < oracle.size(); ++i) compare(frames[i], oracle[i]);
    for (std::size_t c = 0; c < cams.size(); ++c) {
      const auto& mount = geom.camera_mounts[c];
      compare(cams[c].pose, oracle[static_cast<std::size_t>(mount.link)] * homogeneous(mount.orientation, mount.offset));
    }
  }
  const double secs = since(t0);
  return finish("fk_oracle", worst <= 1e-9 && secs < 1.0,
                fmt::format("{} configurations, max |diff| {:.3g} (tol 1e-9), {:.3f} s (limit 1 s)", configs, worst, secs),
                t0);
}

CheckResult rot6d_roundtrip(int rotations, std::uint64_t seed) {
  const auto t0 = Clock::now();
  Rng rng(seed);
  double worst = 0.0;
  for (int n = 0; n < rotations; ++n) {
    const Eigen::Matrix3d r = random_rotation(rng);
    worst = std::max(worst, (kin::rotation_from_6d(kin::rotation_to_6d(r)) - r).cwiseAbs().maxCoeff());
  }
  return finish("rot6d_roundtrip", worst <= 1e-9,
                fmt::format("{} rotations, max |diff| {:.3g} (tol 1e-9)", rotations, worst), t0);
}

namespace {

bus::FrameSet timestamped_set(int cams, std::int64_t t_us) {
  bus::FrameSet fs;
  fs.slots.resize(static_cast<std::size_t>(cams));
  for (auto& s : fs.slots) {
    s.valid = true;
    s.timestamp_us = t_us;
  }
  return fs;
}

}  // namespace

CheckResult blink_statistics(int ticks, std::uint64_t seed) {
  const auto t0 = Clock::now();
  const double analytic = bus::prob_any_dropped(0.05, kNumCameras);
  const double expected = 1.0 - std::pow(0.95, 21);
  const bool analytic_ok = std::round(analytic * 1000.0) / 1000.0 == 0.659 && analytic == expected;

  bus::FaultModel fm = bus::FaultModel::none();
  fm.dropout_p = 0.05;
  fm.seed = seed;
  bus::FaultInjector inj(fm);
  long hits = 0;
  for (int t = 0; t < ticks; ++t) {
    const auto out = inj.apply(timestamped_set(kNumCameras, t * 33333LL), t);
    if (out.valid_count() < kNumCameras) ++hits;
  }
  const double mc = static_cast<double>(hits) / ticks;
  return finish("blink_statistics", analytic_ok && std::abs(mc - analytic) <= 0.01,
                fmt::format("analytic {:.6f} (0.659), Monte Carlo {:.4f} over {} ticks (tol 0.01)", analytic, mc, ticks),
                t0);
}

CheckResult latency_injection(int ticks, std::uint64_t seed) {
  const auto t0 = Clock::now();
  bus::FaultModel fm = bus::FaultModel::none();
  fm.latency_p = 0.10;
  fm.max_delay_s = 0.5;
  fm.seed = seed;
  bus::FaultInjector inj(fm);
  double sum = 0.0;
  std::int64_t mx = 0;
  long n = 0;
  for (int t = 0; t < ticks; ++t) {
    const auto out = inj.apply(timestamped_set(kNumCameras, t * 33333LL), t);
    for (const auto& s : out.slots) {
      sum += static_cast<double>(s.injected_delay_us);
      mx = std::max(mx, s.injected_delay_us);
      ++n;
    }
    inj.clear_log();
  }
  const double mean_ms = sum / static_cast<double>(n) / 1000.0;
  const double max_s = static_cast<double>(mx) / 1e6;
  return finish("latency_injection", std::abs(mean_ms - 25.0) <= 1.0 && max_s <= 0.5,
                fmt::format("mean delay {:.3f} ms (25 ± 1), max {:.4f} s (≤ 0.5) over {} ticks × {} cameras", mean_ms,
                            max_s, ticks, kNumCameras),
                t0);
}

// ---------------------------------------------------------------- gradients

namespace {

using TD = tc::Tensor<double>;
constexpr double kFdEps = 1e-4;

double rel_err(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}); }

TD rand_t(tc::Shape shape, Rng& rng, bool grad = true) {
  std::vector<double> v(tc::shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return TD(std::move(shape), std::move(v), grad);
}

struct OpCase {
  std::string name;
  std::vector<TD> inputs;
  std::function<TD(const std::vector<TD>&)> f;
};

// Loss = sum(out ∘ R) for a fixed random R; every input entry is perturbed.
double op_max_error(const OpCase& c, Rng& rng) {
  const TD probe = c.f(c.inputs);
  const TD r = rand_t(probe.shape(), rng, false);
  auto loss = [&] { return tc::sum(c.f(c.inputs) * r); };
  for (auto t : c.inputs) t.zero_grad();
  loss().backward();
  double worst = 0.0;
  for (auto t : c.inputs) {
    const std::vector<double> analytic = t.grad();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double v = t.values()[i];
      t.values()[i] = v + kFdEps;
      const double lp = loss().item();
      t.values()[i] = v - kFdEps;
      const double lm = loss().item();
      t.values()[i] = v;
      worst = std::max(worst, rel_err(analytic[i], (lp - lm) / (2 * kFdEps)));
    }
  }
  return worst;
}

std::vector<OpCase> op_cases(Rng& rng) {
  std::vector<OpCase> cs;
  auto R = [&](tc::Shape s) { return rand_t(std::move(s), rng); };
  cs.push_back({"matmul", {R({3, 4}), R({4, 5})}, [](const auto& x) { return tc::matmul(x[0], x[1]); }});
  cs.push_back({"add", {R({3, 4}), R({3, 4})}, [](const auto& x) { return tc::add(x[0], x[1]); }});
  cs.push_back({"add_bias", {R({3, 4}), R({4})}, [](const auto& x) { return tc::add(x[0], x[1]); }});
  cs.push_back({"sub", {R({3, 4}), R({3, 4})}, [](const auto& x) { return tc::sub(x[0], x[1]); }});
  cs.push_back({"mul", {R({3, 4}), R({3, 4})}, [](const auto& x) { return tc::mul(x[0], x[1]); }});
  cs.push_back({"scale", {R({3, 4})}, [](const auto& x) { return tc::scale(x[0], 0.7); }});
  cs.push_back({"add_tiled", {R({6, 4}), R({3, 4})}, [](const auto& x) { return tc::add_tiled(x[0], x[1]); }});
  cs.push_back({"row_scale", {R({3, 4}), R({3})}, [](const auto& x) { return tc::row_scale(x[0], x[1]); }});
  cs.push_back({"softmax", {R({3, 5})}, [](const auto& x) { return tc::softmax(x[0]); }});
  cs.push_back({"layer_norm", {R({3, 6}), R({6}), R({6})},
                [](const auto& x) { return tc::layer_norm(x[0], x[1], x[2]); }});
  cs.push_back({"gelu", {R({3, 4})}, [](const auto& x) { return tc::gelu(x[0]); }});
  cs.push_back({"linear", {R({3, 4}), R({4, 5}), R({5})}, [](const auto& x) { return tc::linear(x[0], x[1], x[2]); }});
  cs.push_back({"concat_rows", {R({2, 3}), R({4, 3})}, [](const auto& x) { return tc::concat<double>({x[0], x[1]}, 0); }});
  cs.push_back({"concat_cols", {R({3, 2}), R({3, 4})}, [](const auto& x) { return tc::concat<double>({x[0], x[1]}, 1); }});
  cs.push_back({"slice_rows", {R({5, 3})}, [](const auto& x) { return tc::slice(x[0], 0, 1, 3); }});
  cs.push_back({"slice_cols", {R({3, 5})}, [](const auto& x) { return tc::slice(x[0], 1, 2, 2); }});
  cs.push_back({"mean", {R({3, 4})}, [](const auto& x) { return tc::mean(x[0]); }});
  cs.push_back({"sum", {R({3, 4})}, [](const auto& x) { return tc::sum(x[0]); }});
  cs.push_back({"reshape", {R({3, 4})}, [](const auto& x) { return tc::reshape(x[0], {2, 6}); }});
  cs.push_back({"gather_rows", {R({5, 3})}, [](const auto& x) { return tc::gather_rows(x[0], {0, 2, 2, 4}); }});
  cs.push_back({"attention", {R({6, 8}), R({8, 8}), R({8, 8})},
                [](const auto& x) { return tc::attention(x[0], x[1], x[2], 2, 2); }});
  return cs;
}

// Synthetic observation windows in encoder-ready form; one camera of the
// newest step is missing so the mask path is exercised.
struct SyntheticData {
  std::vector<pol::ObsStep> steps;
  std::vector<pol::Sample> samples;
};

SyntheticData synthetic_windows(const pol::PolicyConfig& cfg, int windows, Rng& rng) {
  SyntheticData d;
  const int to = cfg.horizons.obs;
  const auto feat = static_cast<std::size_t>(cfg.encoder.backbone_dim());
  d.steps.resize(static_cast<std::size_t>(windows * to));
  for (auto& s : d.steps) {
    s.cam_input.resize(static_cast<std::size_t>(cfg.encoder.num_cameras));
    for (auto& c : s.cam_input) {
      c.resize(feat);
      for (auto& v : c) v = static_cast<float>(rng.uniform());
    }
    s.poses.resize(static_cast<std::size_t>(cfg.encoder.num_cameras));
    for (auto& p : s.poses)
      for (auto& v : p) v = static_cast<float>(rng.uniform(-1, 1));
    for (auto& v : s.joints) v = static_cast<float>(rng.uniform(-1, 1));
  }
  d.steps.back().cam_input.front().clear();
  for (int w = 0; w < windows; ++w) {
    pol::Sample s;
    for (int i = 0; i < to; ++i) s.obs.push_back(&d.steps[static_cast<std::size_t>(w * to + i)]);
    for (int i = 0; i < cfg.horizons.pred; ++i) {
      pol::Action a;
      for (auto& v : a) v = static_cast<float>(rng.uniform(-1, 1));
      s.actions.push_back(a);
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace

CheckResult gradient_checks(std::uint64_t seed) {
  const auto t0 = Clock::now();
  Rng rng(seed);
  std::string worst_op;
  double worst = 0.0;
  for (const auto& c : op_cases(rng)) {
    const double e = op_max_error(c, rng);
    if (e > worst) worst = e, worst_op = c.name;
  }

  // Desk-scale policy: a few random entries of every parameter tensor.
  pol::PolicyConfig cfg;
  cfg.seed = seed;
  cfg.encoder.color_jitter = false;
  pol::DiffusionPolicy<double> policy(cfg);
  const SyntheticData data = synthetic_windows(cfg, 2, rng);
  const Rng loss_rng(Rng::mix(seed, 1));
  auto loss = [&] {
    Rng r = loss_rng;
    return policy.loss(data.samples, r, 0.3);
  };
  policy.params().zero_grad();
  loss().backward();
  double policy_worst = 0.0;
  std::string policy_worst_name;
  int probes = 0;
  for (auto& [name, t] : policy.params().items()) {
    if (!t.requires_grad()) continue;
    const std::vector<double> analytic = t.grad();
    for (int j = 0; j < 3; ++j) {
      const auto i = static_cast<std::size_t>(rng.below(t.numel()));
      const double v = t.values()[i];
      t.values()[i] = v + kFdEps;
      const double lp = loss().item();
      t.values()[i] = v - kFdEps;
      const double lm = loss().item();
      t.values()[i] = v;
      const double e = rel_err(analytic[i], (lp - lm) / (2 * kFdEps));
      if (e > policy_worst) policy_worst = e, policy_worst_name = name;
      ++probes;
    }
  }
  const double secs = since(t0);
  return finish("gradient_checks", worst < 1e-4 && policy_worst < 1e-4 && secs < 60.0,
                fmt::format("ops max rel err {:.3g} ({}); policy ({} params, {} probes) max rel err {:.3g} ({}); "
                            "tol 1e-4; {:.1f} s (limit 60 s)",
                            worst, worst_op, policy.params().count(), probes, policy_worst, policy_worst_name, secs),
                t0);
}

// ---------------------------------------------------------------- diffusion sanity

CheckResult diffusion_sanity(std::uint64_t seed) {
  const auto t0 = Clock::now();

  // add_noise: E[x_k^2] = abar x0^2 + (1 - abar) per coordinate.
  const auto sched = pol::make_schedule(100, "squared-cosine");
  Rng rng(seed);
  double moment_worst = 0.0;
  for (int k : {1, 10, 50, 90, 100}) {
    const std::vector<double> x0{0.8, -0.3};
    std::vector<double> acc(2, 0.0);
    const int draws = 200000;
    for (int n = 0; n < draws; ++n) {
      const std::vector<double> eps{rng.normal(), rng.normal()};
      const auto xk = pol::add_noise(x0, k, eps, sched);
      for (int i = 0; i < 2; ++i) acc[static_cast<std::size_t>(i)] += xk[static_cast<std::size_t>(i)] * xk[static_cast<std::size_t>(i)];
    }
    const double ab = sched.alpha_bar(k);
    for (int i = 0; i < 2; ++i) {
      const double want = ab * x0[static_cast<std::size_t>(i)] * x0[static_cast<std::size_t>(i)] + (1 - ab);
      moment_worst = std::max(moment_worst, std::abs(acc[static_cast<std::size_t>(i)] / draws - want) / want);
    }
  }

  // Identical observations, actions +0.5 or -0.5 rad on every joint.
  pol::PolicyConfig cfg;
  cfg.seed = seed;
  cfg.encoder.num_cameras = 1;
  cfg.encoder.token_dim = 32;
  cfg.encoder.image_feat_dim = 16;
  cfg.encoder.pose_embed_dim = 8;
  cfg.encoder.head_hidden = 16;
  cfg.encoder.color_jitter = false;
  cfg.blocks = 2;
  cfg.heads = 2;
  cfg.ffn_mult = 2;
  cfg.blink_p = 0.0;
  cfg.train_steps = 1500;
  cfg.batch_size = 32;
  pol::DiffusionPolicy<float> policy(cfg);
  Rng drng(Rng::mix(seed, 2));
  SyntheticData data = synthetic_windows(cfg, 1, drng);
  data.steps.front().cam_input.front().assign(static_cast<std::size_t>(cfg.encoder.backbone_dim()), 0.5f);
  for (auto& s : data.steps) s = data.steps.front();
  std::vector<pol::Sample> samples;
  for (int m = 0; m < 2; ++m) {
    pol::Sample s = data.samples.front();
    for (auto& a : s.actions) a.fill(m == 0 ? 0.5f : -0.5f);
    samples.push_back(s);
  }
  pol::Trainer<float> trainer(policy, Rng::mix(seed, 3));
  for (int i = 0; i < cfg.train_steps; ++i) trainer.train_step(samples);

  int pos = 0, neg = 0, other = 0;
  const int draws = 200;
  for (int n = 0; n < draws; ++n) {
    const auto acts = policy.sample_actions(samples.front().obs, Rng::mix(seed, 4, static_cast<std::uint64_t>(n)));
    double m = 0.0;
    for (const auto& a : acts)
      for (float v : a) m += v;
    m /= static_cast<double>(acts.size() * kNumJoints);
    if (std::abs(m - 0.5) < 0.2) ++pos;
    else if (std::abs(m + 0.5) < 0.2) ++neg;
    else ++other;
  }
  const bool modes_ok = pos >= draws / 5 && neg >= draws / 5;
  return finish("diffusion_sanity", modes_ok && moment_worst <= 0.02,
                fmt::format("modes +0.5: {} / -0.5: {} / neither: {} of {} draws (each ≥ 20%); "
                            "add_noise second moment max rel err {:.4f} (≤ 0.02)",
                            pos, neg, other, draws, moment_worst),
                t0);
}

// ---------------------------------------------------------------- overfit

CheckResult overfit(const fs::path& work_dir, std::uint64_t seed) {
  const auto t0 = Clock::now();
  RunConfig cfg;
  cfg.policy.seed = seed;
  cfg.policy.blink_p = 0.0;
  cfg.policy.encoder.color_jitter = false;
  cfg.policy.batch_size = 16;
  cfg.policy.train_steps = 2000;
  const fs::path ep = work_dir / "overfit" / "ep_0000";
  fs::remove_all(ep.parent_path());
  const auto demo = pol::record_expert_episode(cfg.env, demo_scene_seed(seed, 0), ep, cfg.hash());

  pol::DiffusionPolicy<float> policy(cfg.policy);
  const auto ts = pol::build_training_set(std::vector<fs::path>{ep}, policy, cfg.env);

  // Fixed evaluation batch: same windows, noise levels and noise each time.
  std::vector<pol::Sample> eval;
  const auto order = data::shuffled_order(ts.samples.size(), Rng::mix(seed, 5));
  for (std::size_t i = 0; i < std::min<std::size_t>(64, order.size()); ++i) eval.push_back(ts.samples[order[i]]);
  auto eval_loss = [&] {
    pol::NoGrad<float> guard(policy.params());
    Rng r(Rng::mix(seed, 6));
    return static_cast<double>(policy.loss(eval, r, 0.0).item());
  };
  const double initial = eval_loss();
  pol::Trainer<float> trainer(policy, Rng::mix(seed, 7));
  for (int i = 0; i < cfg.policy.train_steps; ++i) trainer.train_step(ts.samples);
  const double final_loss = eval_loss();

  double err = 0.0;
  std::size_t count = 0;
  const std::size_t probe = std::min<std::size_t>(20, eval.size());
  for (std::size_t w = 0; w < probe; ++w) {
    const auto acts = policy.sample_actions(eval[w].obs, Rng::mix(seed, 8, w));
    for (std::size_t i = 0; i < acts.size(); ++i)
      for (int j = 0; j < kNumJoints; ++j) {
        err += std::abs(acts[i][static_cast<std::size_t>(j)] - eval[w].actions[i][static_cast<std::size_t>(j)]);
        ++count;
      }
  }
  const double mae = err / static_cast<double>(count);
  const double ratio = final_loss / initial;
  const double secs = since(t0);
  return finish("overfit", ratio < 0.05 && mae < 0.05 && secs < 600.0,
                fmt::format("{} steps, {} windows: loss {:.4f} -> {:.5f} ({:.2f}% of initial, < 5%); "
                            "action MAE {:.4f} rad (< 0.05) on {} windows; {:.0f} s (limit 600 s)",
                            demo.steps, ts.samples.size(), initial, final_loss, 100 * ratio, mae, probe, secs),
                t0);
}

// ---------------------------------------------------------------- sensor bus

namespace {

std::uint8_t pattern(int cam, std::int64_t frame, std::size_t i) {
  return static_cast<std::uint8_t>((frame * 7 + cam * 31 + static_cast<std::int64_t>(i) * 13) & 0xff);
}

}  // namespace

CheckResult bus_stress(double seconds, int fps) {
  const auto t0 = Clock::now();
  constexpr int kSide = 64;
  bus::SensorBus sb(kNumCameras, kSide, kSide);
  std::atomic<bool> stop{false};
  std::atomic<long> late{0};
  const auto start = Clock::now() + std::chrono::milliseconds(50);
  const auto period = std::chrono::nanoseconds(static_cast<std::int64_t>(1e9 / fps));
  const auto frames = static_cast<std::int64_t>(std::llround(seconds * fps));

  std::vector<std::thread> producers;
  for (int c = 0; c < kNumCameras; ++c) {
    producers.emplace_back([&, c] {
      render::Image img(kSide, kSide);
      for (std::int64_t f = 0; f < frames; ++f) {
        std::this_thread::sleep_until(start + f * period);
        for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = pattern(c, f, i);
        const auto before = Clock::now();
        sb.publish_frame(c, img, f);
        if (Clock::now() - before > period) late.fetch_add(1);
      }
    });
  }

  // Slow reader: snapshot, then dawdle over every pixel before the next one.
  long snapshots = 0, inconsistent = 0;
  std::thread reader([&] {
    while (!stop.load()) {
      const auto snap = sb.snapshot_latest();
      ++snapshots;
      for (std::size_t c = 0; c < snap.slots.size(); ++c) {
        const auto& s = snap.slots[c];
        if (!s.valid) continue;
        const auto& rgb = s.image->rgb;
        bool ok = rgb.size() == static_cast<std::size_t>(3 * kSide * kSide);
        for (std::size_t i = 0; ok && i < rgb.size(); ++i) ok = rgb[i] == pattern(static_cast<int>(c), s.timestamp_us, i);
        if (!ok) ++inconsistent;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(150));
    }
  });
  for (auto& t : producers) t.join();
  stop = true;
  reader.join();

  std::uint64_t waits = 0, min_count = ~0ULL;
  for (int c = 0; c < kNumCameras; ++c) {
    waits += sb.publish_waits(c);
    min_count = std::min(min_count, sb.publish_count(c));
  }
  const bool pass = waits == 0 && late.load() == 0 && inconsistent == 0 &&
                    min_count == static_cast<std::uint64_t>(frames) && snapshots > 0;
  return finish("bus_stress", pass,
                fmt::format("{} producers × {} frames at {} FPS: publish waits {}, publishes over one period {}, "
                            "min publishes {}; {} slow snapshots, {} inconsistent slots",
                            kNumCameras, frames, fps, waits, late.load(), min_count, snapshots, inconsistent),
                t0);
}

// ---------------------------------------------------------------- determinism

CheckResult determinism(const fs::path& work_dir, std::uint64_t seed) {
  const auto t0 = Clock::now();
  const fs::path root = work_dir / "determinism";
  fs::remove_all(root);
  RunConfig cfg;
  cfg.env.episode_seconds = 20.0;
  cfg.policy.seed = seed;
  cfg.policy.train_steps = 20;
  cfg.policy.batch_size = 8;
  std::vector<std::string> failures;

  // Record twice, compare bytes; replay must reproduce the stored steps.
  for (const char* run : {"a", "b"}) wf::run_demos(cfg, 2, seed, root / run);
  for (const char* f : {"states.bin", "frames.bin"})
    for (const char* ep : {"ep_0000", "ep_0001"})
      if (file_bytes(root / "a" / ep / f) != file_bytes(root / "b" / ep / f))
        failures.push_back(fmt::format("{}/{} differs", ep, f));
  const auto ep = data::load_episode(root / "a" / "ep_0000");
  std::size_t replay_mismatch = 0, i = 0;
  data::replay(ep, [&](const data::StepRecord& s, const std::vector<data::FrameRecord>& fr) {
    if (!(s == ep.steps[i]) || !(fr == ep.frames[i])) ++replay_mismatch;
    ++i;
  });
  if (replay_mismatch || i != ep.steps.size()) failures.push_back("replay diverged from recording");

  // Train twice on the same data.
  std::vector<std::vector<double>> losses;
  for (const char* run : {"a", "b"}) {
    auto s = wf::run_training(cfg, root / "a", root / fmt::format("ckpt_{}.bin", run));
    losses.push_back(s.losses);
  }
  if (losses[0] != losses[1]) failures.push_back("training losses differ");
  if (file_bytes(root / "ckpt_a.bin") != file_bytes(root / "ckpt_b.bin")) failures.push_back("checkpoints differ");

  // Evaluate twice; world states must match exactly.
  std::vector<std::vector<std::uint8_t>> finals;
  std::vector<std::vector<pol::RolloutStep>> logs;
  for (int run = 0; run < 2; ++run) {
    pol::DiffusionPolicy<float> policy(cfg.policy);
    policy.load(root / "ckpt_a.bin");
    pol::SimEnv env(cfg.env, eval_scene_seed(seed, 0));
    const auto log = pol::receding_horizon_run(env, policy, 10.0, Rng::mix(seed, 9));
    finals.push_back(env.state().to_bytes());
    logs.push_back(log.steps);
  }
  bool same_log = logs[0].size() == logs[1].size();
  for (std::size_t k = 0; same_log && k < logs[0].size(); ++k)
    same_log = logs[0][k].joints == logs[1][k].joints && logs[0][k].targets == logs[1][k].targets &&
               logs[0][k].metric == logs[1][k].metric;
  if (finals[0] != finals[1] || !same_log) failures.push_back("evaluation rollouts differ");

  std::string detail = failures.empty()
                           ? fmt::format("2 episodes × 2 recordings, replay of {} steps, {} training losses, "
                                         "2 rollouts: all bit-identical",
                                         ep.steps.size(), losses[0].size())
                           : fmt::format("{}", fmt::join(failures, "; "));
  return finish("determinism", failures.empty(), detail, t0);
}

// ---------------------------------------------------------------- pipeline

namespace {

bool demos_present(const fs::path& dir, int n) {
  for (int i = 0; i < n; ++i) {
    const fs::path meta = dir / fmt::format("ep_{:04d}", i) / "meta.json";
    if (!fs::exists(meta)) return false;
    std::ifstream f(meta);
    if (!nlohmann::json::parse(f).value("complete", false)) return false;
  }
  return true;
}

double read_mean(const fs::path& metrics) {
  std::ifstream f(metrics);
  std::string line;
  double mean = -1.0;
  while (std::getline(f, line))
    if (line.rfind("# mean=", 0) == 0) mean = std::stod(line.substr(7));
  return mean;
}

}  // namespace

PipelineResult run_pipeline(const fs::path& work_dir, const PipelineOptions& opts) {
  const auto t0 = Clock::now();
  auto say = [&](const std::string& m) {
    if (opts.progress) opts.progress(m);
  };
  PipelineResult r;
  RunConfig base;
  base.policy.seed = opts.seed;
  const fs::path demos = work_dir / "demos";
  const fs::path summary = work_dir / "demos.json";

  if (opts.reuse && demos_present(demos, opts.demos) && fs::exists(summary)) {
    std::ifstream f(summary);
    r.expert_success = nlohmann::json::parse(f).at("mean_success").get<double>();
    r.reused = true;
    say("reusing demonstrations");
  } else {
    fs::remove_all(demos);
    const auto d = wf::run_demos(base, opts.demos, opts.seed, demos, say);
    double sum = 0;
    for (double s : d.success) sum += s;
    r.expert_success = sum / static_cast<double>(d.success.size());
    std::ofstream(summary) << nlohmann::json{{"mean_success", r.expert_success}, {"success", d.success},
                                             {"steps", d.steps}, {"seconds", d.seconds}}.dump(2);
  }

  auto ckpt_for = [&](const std::string& preset) {
    const fs::path ckpt = work_dir / "ckpt" / (preset + ".bin");
    if (opts.reuse && fs::exists(ckpt) && fs::exists(ckpt.string() + ".json")) {
      r.reused = true;
      say("reusing checkpoint " + preset);
      return ckpt;
    }
    RunConfig cfg = base;
    apply_train_preset(cfg, preset);
    say("training " + preset);
    wf::run_training(cfg, demos, ckpt, say);
    return ckpt;
  };
  auto eval = [&](const fs::path& ckpt, const std::string& suite) {
    const fs::path out = work_dir / "eval" / (ckpt.stem().string() + "__" + suite);
    if (opts.reuse && fs::exists(out / "metrics.csv")) {
      const double m = read_mean(out / "metrics.csv");
      if (m >= 0) {
        r.reused = true;
        return m;
      }
    }
    return wf::run_eval(ckpt, suite, opts.eval_episodes, opts.seed, out, say).mean;
  };

  const fs::path full = ckpt_for("baseline");
  const fs::path noblink = ckpt_for("no-blink");
  const fs::path nopose = ckpt_for("no-pose");
  r.baseline = eval(full, "baseline");
  r.dropout_blink = eval(full, "dropout");
  r.dropout_noblink = eval(noblink, "no-blink");
  r.no_pose = eval(nopose, "no-pose");
  r.seconds = since(t0);
  return r;
}

CheckResult closed_loop(const PipelineResult& r) {
  const auto t0 = Clock::now();
  const bool timed = !r.reused;
  const bool pass = r.baseline >= 0.7 && (!timed || r.seconds < 7200.0);
  return finish("closed_loop", pass,
                fmt::format("mean success {:.3f} over held-out scenes (≥ 0.7); expert demos {:.3f}; pipeline {:.0f} s{} "
                            "(limit 7200 s)",
                            r.baseline, r.expert_success, r.seconds, timed ? "" : " (partly cached)"),
                t0);
}

CheckResult blink_ablation(const PipelineResult& r) {
  const auto t0 = Clock::now();
  const double gap = r.dropout_blink - r.dropout_noblink;
  return finish("blink_ablation", gap > 0.05,
                fmt::format("5% dropout: blink-trained {:.3f}, no-blink {:.3f}, gap {:+.3f} (> 0.05)", r.dropout_blink,
                            r.dropout_noblink, gap),
                t0);
}

CheckResult pose_ablation(const PipelineResult& r) {
  const auto t0 = Clock::now();
  const double gap = r.baseline - r.no_pose;
  return finish("pose_ablation", gap > 0.05,
                fmt::format("full {:.3f}, no-pose {:.3f}, gap {:+.3f} (> 0.05)", r.baseline, r.no_pose, gap), t0);
}

std::vector<CheckResult> invariant_suite(const fs::path& work_dir) {
  std::vector<CheckResult> out;
  out.push_back(fk_oracle());
  out.push_back(rot6d_roundtrip());
  out.push_back(blink_statistics());
  out.push_back(latency_injection());
  out.push_back(gradient_checks());
  out.push_back(bus_stress(2.0, 30));
  out.push_back(determinism(work_dir));
  return out;
}

}  // namespace panoptes::chk
