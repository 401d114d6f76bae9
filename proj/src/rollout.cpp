#include "panoptes/rollout.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <deque>

namespace panoptes::pol {

namespace {

std::array<float, kNumJoints> to_floats(const kin::JointVector& q) {
  std::array<float, kNumJoints> out{};
  for (std::size_t j = 0; j < kNumJoints; ++j) out[j] = static_cast<float>(q[j]);
  return out;
}

// Steps recorded after the expert goes idle, so the policy also sees what
// holding still looks like.
constexpr int kIdleTailSteps = 24;

}  // namespace

void EnvConfig::validate() const {
  if (image_size < 8) throw InvalidInput("image_size must be >= 8");
  if (!(fov_deg > 0.0 && fov_deg < 180.0)) throw InvalidInput("fov_deg must lie in (0, 180)");
  if (camera_set != "body" && camera_set != "topdown") throw InvalidInput("camera_set must be body or topdown");
  if (control_hz <= 0 || record_hz <= 0 || control_hz % record_hz != 0)
    throw InvalidInput("control_hz must be a positive multiple of record_hz");
  if (!(episode_seconds > 0.0)) throw InvalidInput("episode_seconds must be positive");
  faults.validate();
  model.geometry.validate();
}

void to_json(nlohmann::json& j, const EnvConfig& c) {
  j = {{"scene", c.scene},           {"world", c.model.params},     {"geometry", c.model.geometry},
       {"image_size", c.image_size}, {"fov_deg", c.fov_deg},        {"camera_set", c.camera_set},
       {"faults", c.faults},         {"control_hz", c.control_hz},  {"record_hz", c.record_hz},
       {"episode_seconds", c.episode_seconds}};
}

void from_json(const nlohmann::json& j, EnvConfig& c) {
  nlohmann::json defaults;
  to_json(defaults, EnvConfig{});
  for (const auto& [k, v] : j.items())
    if (!defaults.contains(k)) throw InvalidInput("unknown env key: " + k);
  const EnvConfig d;
  c.scene = j.contains("scene") ? j.at("scene").get<sim::SceneConfig>() : d.scene;
  c.model.params = j.contains("world") ? j.at("world").get<sim::WorldParams>() : d.model.params;
  c.model.geometry = j.contains("geometry") ? j.at("geometry").get<kin::ChainGeometry>() : d.model.geometry;
  c.image_size = j.value("image_size", d.image_size);
  c.fov_deg = j.value("fov_deg", d.fov_deg);
  c.camera_set = j.value("camera_set", d.camera_set);
  c.faults = j.contains("faults") ? j.at("faults").get<bus::FaultModel>() : d.faults;
  c.control_hz = j.value("control_hz", d.control_hz);
  c.record_hz = j.value("record_hz", d.record_hz);
  c.episode_seconds = j.value("episode_seconds", d.episode_seconds);
  c.validate();
}

// ------------------------------------------------------------------ env

SimEnv::SimEnv(const EnvConfig& cfg, std::uint64_t scene_seed)
    : cfg_(cfg),
      intrinsics_(render::intrinsics_from_fov(cfg.fov_deg, cfg.image_size, cfg.image_size)),
      bus_(std::make_unique<bus::SensorBus>(cfg.num_cameras(), cfg.image_size, cfg.image_size)),
      injector_(cfg.faults) {
  cfg_.validate();
  cfg_.scene.seed = scene_seed;
  state_ = sim::spawn_scene(cfg_.scene, cfg_.model);
}

void SimEnv::tick(const kin::JointVector& targets) {
  const auto clamped = kin::clamp_joints(targets.angles);
  state_ = sim::step(cfg_.model, state_, clamped.joints, 1.0 / cfg_.control_hz);
  ++ticks_;
}

std::vector<kin::CameraPose> SimEnv::camera_poses() const {
  if (cfg_.camera_set == "topdown") return {render::overhead_camera()};
  return kin::camera_poses(cfg_.model.geometry, state_.joints);
}

bus::FrameSet SimEnv::observe() {
  const auto poses = camera_poses();
  std::vector<render::Image> images =
      cfg_.camera_set == "topdown"
          ? std::vector<render::Image>{render::render_camera(state_, cfg_.model, poses[0], intrinsics_)}
          : render::render_all(state_, cfg_.model, poses, intrinsics_);
  const std::int64_t now = time_us();
  for (std::size_t c = 0; c < images.size(); ++c) bus_->publish_frame(static_cast<int>(c), images[c], now);
  ++observations_;
  return injector_.apply(bus_->snapshot_latest(), ticks_ / cfg_.ticks_per_record());
}

std::vector<kin::CameraPose> poses_for(const EnvConfig& cfg, const std::array<float, kNumJoints>& joints) {
  if (cfg.camera_set == "topdown") return {render::overhead_camera()};
  kin::JointVector q;
  // Stored as f32, so a joint at the limit can round just past it.
  for (std::size_t j = 0; j < kNumJoints; ++j) q[j] = std::clamp<double>(joints[j], -kJointLimit, kJointLimit);
  return kin::camera_poses(cfg.model.geometry, q);
}

template <typename T>
ObsStep make_obs_step(const enc::Encoder<T>& encoder, const bus::FrameSet& frames,
                      const std::vector<kin::CameraPose>& poses, const std::array<float, kNumJoints>& joints) {
  const auto& ec = encoder.config();
  if (frames.slots.size() != poses.size())
    throw DimensionError(fmt::format("{} frames but {} camera poses", frames.slots.size(), poses.size()));
  ObsStep o;
  o.joints = joints;
  o.cam_input.resize(frames.slots.size());
  for (const auto& p : poses) {
    std::array<float, 9> v{};
    const auto pv = enc::pose_input(p);
    for (std::size_t i = 0; i < 9; ++i) v[i] = static_cast<float>(pv[i]);
    o.poses.push_back(v);
  }
  std::vector<std::size_t> valid;
  std::vector<T> pixels;
  for (std::size_t c = 0; c < frames.slots.size(); ++c) {
    const auto& s = frames.slots[c];
    if (!s.valid || !s.image) continue;
    const auto in = enc::image_to_input(*s.image, ec);
    if (!ec.cacheable()) {
      o.cam_input[c] = in;
      continue;
    }
    valid.push_back(c);
    pixels.insert(pixels.end(), in.begin(), in.end());
  }
  if (!valid.empty()) {
    // The frozen backbone has no parameters in the graph, so this is a
    // plain forward pass.
    const int n = static_cast<int>(valid.size());
    Tensor<T> f = encoder.backbone(Tensor<T>({n, ec.pixel_dim()}, std::move(pixels)));
    const int w = ec.backbone_dim();
    for (int i = 0; i < n; ++i) {
      auto& dst = o.cam_input[valid[static_cast<std::size_t>(i)]];
      dst.resize(static_cast<std::size_t>(w));
      for (int k = 0; k < w; ++k) dst[static_cast<std::size_t>(k)] = static_cast<float>(f.values()[static_cast<std::size_t>(i * w + k)]);
    }
  }
  return o;
}

template ObsStep make_obs_step(const enc::Encoder<float>&, const bus::FrameSet&, const std::vector<kin::CameraPose>&,
                               const std::array<float, kNumJoints>&);
template ObsStep make_obs_step(const enc::Encoder<double>&, const bus::FrameSet&, const std::vector<kin::CameraPose>&,
                               const std::array<float, kNumJoints>&);

// ------------------------------------------------------------------ demos

DemoResult record_expert_episode(const EnvConfig& cfg, std::uint64_t scene_seed, const data::fs::path& dir,
                                 const std::string& config_hash) {
  SimEnv env(cfg, scene_seed);
  sim::ScriptedExpert expert(cfg.model);
  data::EpisodeMeta meta;
  meta.id = dir.filename().string();
  meta.seed = scene_seed;
  meta.config_hash = config_hash;
  meta.control_hz = cfg.control_hz;
  meta.record_hz = cfg.record_hz;
  meta.num_cameras = cfg.num_cameras();
  meta.camera_set = cfg.camera_set;
  meta.start_time = "";
  data::EpisodeWriter writer(dir, meta);

  const auto max_ticks = static_cast<std::int64_t>(cfg.episode_seconds * cfg.control_hz);
  const int per = cfg.ticks_per_record();
  int tail = -1;
  DemoResult res;
  for (std::int64_t t = 0; t < max_ticks; ++t) {
    const kin::JointVector q = expert.next_targets(env.state());
    if (t % per == 0) {
      if (tail < 0 && expert.idle()) tail = kIdleTailSteps;
      if (tail == 0) break;
      if (tail > 0) --tail;
      writer.append(static_cast<std::uint64_t>(env.time_us()), env.observe(), to_floats(env.state().joints),
                    to_floats(q));
    }
    env.tick(q);
  }
  res.steps = writer.steps();
  res.success = sim::success_metric(env.state());
  res.control_ticks = env.ticks();
  writer.close();
  return res;
}

// ------------------------------------------------------------------ training data

template <typename T>
TrainingSet build_training_set(const std::vector<data::fs::path>& episodes, const DiffusionPolicy<T>& policy,
                               const EnvConfig& env) {
  if (episodes.empty()) throw DatasetError("no episodes to train on");
  const auto& h = policy.config().horizons;
  TrainingSet ts;
  std::vector<data::Episode> stat_eps;
  std::vector<std::size_t> lengths;
  for (const auto& dir : episodes) {
    data::Episode ep = data::load_episode(dir, true);
    if (ep.meta.num_cameras != policy.config().encoder.num_cameras)
      throw DatasetError(fmt::format("{} has {} cameras, policy expects {}", dir.string(), ep.meta.num_cameras,
                                     policy.config().encoder.num_cameras));
    if (ep.meta.camera_set != env.camera_set)
      throw DatasetError(fmt::format("{} uses camera set {}, config says {}", dir.string(), ep.meta.camera_set,
                                     env.camera_set));
    ts.any_truncated = ts.any_truncated || ep.truncated;
    std::vector<ObsStep> obs;
    obs.reserve(ep.steps.size());
    for (std::size_t i = 0; i < ep.steps.size(); ++i)
      obs.push_back(make_obs_step(policy.encoder(), data::to_frame_set(ep.frames[i]),
                                  poses_for(env, ep.steps[i].follower), ep.steps[i].follower));
    ep.frames.clear();
    lengths.push_back(ep.steps.size());
    ts.steps += ep.steps.size();
    ts.obs.push_back(std::move(obs));
    stat_eps.push_back(std::move(ep));
  }
  ts.stats = data::compute_norm_stats(stat_eps, 1e-3f);
  ts.windows = data::make_windows(lengths, h.pred);
  if (ts.windows.empty()) throw DatasetError(fmt::format("no episode is longer than T_p = {} steps", h.pred));
  for (const auto& w : ts.windows) {
    Sample s;
    const auto& eobs = ts.obs[static_cast<std::size_t>(w.episode)];
    for (int i : data::obs_indices(w.t, h.obs)) s.obs.push_back(&eobs[static_cast<std::size_t>(i)]);
    const auto& steps = stat_eps[static_cast<std::size_t>(w.episode)].steps;
    for (int i : data::action_indices(w.t, h.pred)) s.actions.push_back(steps[static_cast<std::size_t>(i)].leader);
    ts.samples.push_back(std::move(s));
  }
  return ts;
}

template TrainingSet build_training_set(const std::vector<data::fs::path>&, const DiffusionPolicy<float>&,
                                        const EnvConfig&);
template TrainingSet build_training_set(const std::vector<data::fs::path>&, const DiffusionPolicy<double>&,
                                        const EnvConfig&);

// ------------------------------------------------------------------ rollout

template <typename T>
RolloutLog receding_horizon_run(SimEnv& env, const DiffusionPolicy<T>& policy, double episode_seconds,
                                std::uint64_t sample_seed) {
  const auto& h = policy.config().horizons;
  const auto& ec = policy.config().encoder;
  if (ec.num_cameras != env.config().num_cameras())
    throw DimensionError(fmt::format("policy expects {} cameras, env provides {}", ec.num_cameras,
                                     env.config().num_cameras()));
  if (ec.image_size != env.config().image_size) throw DimensionError("policy and env image sizes differ");

  RolloutLog log;
  log.scene_seed = env.config().scene.seed;
  const int per = env.config().ticks_per_record();
  const auto records = static_cast<std::int64_t>(episode_seconds * env.config().record_hz);
  // Without latency faults only the frames feeding a plan are rendered.
  const bool every_step = env.config().faults.latency_p > 0.0;

  std::deque<ObsStep> history;
  std::vector<Action> plan;
  std::size_t next = 0;
  kin::JointVector prev = env.state().joints;
  for (std::int64_t r = 0; r < records; ++r) {
    const std::int64_t to_plan = (h.act - r % h.act) % h.act;
    if (every_step || to_plan < h.obs) {
      const auto frames = env.observe();
      history.push_back(make_obs_step(policy.encoder(), frames, env.camera_poses(), to_floats(env.state().joints)));
      if (static_cast<int>(history.size()) > h.obs) history.pop_front();
      log.steps.push_back({env.time_us(), to_floats(env.state().joints), {}, frames.valid_count(), 0.0});
    } else {
      log.steps.push_back({env.time_us(), to_floats(env.state().joints), {}, -1, 0.0});
    }
    if (next >= static_cast<std::size_t>(h.act) || plan.empty()) {
      std::vector<const ObsStep*> obs;
      for (int i = h.obs - static_cast<int>(history.size()); i > 0; --i) obs.push_back(&history.front());
      for (const auto& o : history) obs.push_back(&o);
      plan = policy.sample_actions(obs, Rng::mix(sample_seed, static_cast<std::uint64_t>(log.plans)));
      ++log.plans;
      next = 0;
    }
    const Action& a = plan[next++];
    ++log.executed_actions;
    kin::JointVector target;
    for (std::size_t j = 0; j < kNumJoints; ++j) target[j] = a[j];
    for (int i = 1; i <= per; ++i) {
      kin::JointVector q;
      const double u = static_cast<double>(i) / per;
      for (std::size_t j = 0; j < kNumJoints; ++j) q[j] = prev[j] + u * (target[j] - prev[j]);
      env.tick(q);
    }
    prev = target;
    log.steps.back().targets = to_floats(target);
    log.steps.back().metric = sim::success_metric(env.state());
  }
  log.final_metric = sim::success_metric(env.state());
  log.fault_events = env.faults().log();
  return log;
}

template RolloutLog receding_horizon_run(SimEnv&, const DiffusionPolicy<float>&, double, std::uint64_t);
template RolloutLog receding_horizon_run(SimEnv&, const DiffusionPolicy<double>&, double, std::uint64_t);

}  // namespace panoptes::pol
