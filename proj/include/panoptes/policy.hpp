#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "panoptes/encoders.hpp"
#include "panoptes/kinematics.hpp"
#include "panoptes/tensorcore.hpp"

namespace panoptes::pol {

using tc::Tensor;

struct Horizons {
  int obs = 2;    // T_o
  int pred = 16;  // T_p
  int act = 8;    // T_a
  void validate() const;
};

struct DiffusionSchedule {
  int K = 0;
  std::string kind;
  std::vector<double> betas;       // index k-1 for step k
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  double alpha_bar(int k) const;   // k in [0, K]; alpha_bar(0) = 1
};

/// kind: "linear" (beta_start..beta_end) or "squared-cosine".
DiffusionSchedule make_schedule(int K, const std::string& kind, double beta_start = 1e-4, double beta_end = 0.02);

/// x_k = sqrt(abar_k) x0 + sqrt(1 - abar_k) eps, for k in [1, K].
template <typename T>
std::vector<T> add_noise(const std::vector<T>& x0, int k, const std::vector<T>& eps, const DiffusionSchedule& s);

struct PolicyConfig {
  Horizons horizons;
  enc::EncoderConfig encoder;
  int blocks = 4;
  int heads = 4;
  int ffn_mult = 4;
  int diffusion_steps = 100;
  std::string schedule = "squared-cosine";
  int inference_steps = 16;
  bool ddim = true;
  double blink_p = 0.05;
  double lr = 1e-3;
  double lr_min = 1e-4;  // cosine decay floor
  double weight_decay = 1e-6;
  int batch_size = 32;
  int train_steps = 3000;
  std::uint64_t seed = 0;

  void validate() const;
  int cond_tokens_per_sample() const { return horizons.obs * (encoder.num_cameras + kNumJoints); }
};

void to_json(nlohmann::json& j, const PolicyConfig& c);
void from_json(const nlohmann::json& j, PolicyConfig& c);

/// One timestep of encoder-ready observation.
struct ObsStep {
  /// Per camera: backbone features (cached path) or pixels in [0, 1];
  /// empty when the camera delivered nothing.
  std::vector<std::vector<float>> cam_input;
  std::vector<std::array<float, 9>> poses;
  std::array<float, 9> joints{};
};

using Action = std::array<float, kNumJoints>;

/// Observation window plus the leader targets that followed it.
struct Sample {
  std::vector<const ObsStep*> obs;  // T_o, oldest first
  std::vector<Action> actions;      // T_p, radians
};

/// Sinusoidal encoding of a scalar position into `dim` values.
std::vector<double> sinusoidal(double pos, int dim);

template <typename T>
class DiffusionPolicy {
 public:
  explicit DiffusionPolicy(const PolicyConfig& cfg);
  // The encoder holds a reference into params_.
  DiffusionPolicy(const DiffusionPolicy&) = delete;
  DiffusionPolicy& operator=(const DiffusionPolicy&) = delete;

  const PolicyConfig& config() const { return cfg_; }
  tc::ParamSet<T>& params() { return params_; }
  const tc::ParamSet<T>& params() const { return params_; }
  const DiffusionSchedule& schedule() const { return sched_; }
  const enc::Encoder<T>& encoder() const { return *encoder_; }

  /// Batch of observation windows into encoder input. blink_p masks each
  /// camera image independently; jitter applies colour jitter.
  enc::ObsBatch<T> make_obs_batch(const std::vector<Sample>& samples, double blink_p, bool jitter, Rng& rng) const;

  /// eps-hat for noisy normalised actions x_k ((B·T_p) × 9), one step
  /// index per sample.
  Tensor<T> denoise(const Tensor<T>& x_k, const std::vector<int>& ks, const enc::ConditionTokens<T>& cond) const;

  /// Mean squared eps error with k uniform in [1, K] and gaussian eps.
  Tensor<T> loss(const std::vector<Sample>& samples, Rng& rng, double blink_p) const;

  /// Deterministic given seed; radians clamped to the joint limits.
  std::vector<Action> sample_actions(const std::vector<const ObsStep*>& obs, std::uint64_t seed) const;

  /// Parameters plus a JSON sidecar (<ckpt>.json); `extra` is merged into
  /// the sidecar.
  void save(const std::filesystem::path& ckpt, const nlohmann::json& extra = nlohmann::json::object()) const;
  void load(const std::filesystem::path& ckpt);

 private:
  Tensor<T> step_tokens(const std::vector<int>& ks) const;

  PolicyConfig cfg_;
  tc::ParamSet<T> params_;
  std::unique_ptr<enc::Encoder<T>> encoder_;
  DiffusionSchedule sched_;
  Tensor<T> action_pos_;  // T_p × D, fixed sinusoidal
};

/// Temporarily detaches every parameter from graph recording.
template <typename T>
class NoGrad {
 public:
  explicit NoGrad(tc::ParamSet<T>& params);
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  tc::ParamSet<T>& params_;
};

/// Training loop state: Adam with cosine learning-rate decay.
template <typename T>
class Trainer {
 public:
  Trainer(DiffusionPolicy<T>& policy, std::uint64_t seed);
  /// One Adam step on a batch drawn from `samples`. Throws Error with
  /// diagnostics on a non-finite loss.
  double train_step(const std::vector<Sample>& samples);
  int step() const { return step_; }

 private:
  DiffusionPolicy<T>& policy_;
  tc::Adam<T> adam_;
  Rng rng_;
  int step_ = 0;
};

/// Radians to [-1, 1] by the joint limit, and back.
inline float normalize_angle(double a) { return static_cast<float>(a / kJointLimit); }
inline double denormalize_angle(double x) { return x * kJointLimit; }

}  // namespace panoptes::pol
