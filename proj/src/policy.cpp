#include "panoptes/policy.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace panoptes::pol {

void Horizons::validate() const {
  if (obs < 1) throw InvalidInput("T_o must be >= 1");
  if (pred < 1) throw InvalidInput("T_p must be >= 1");
  if (act < 1 || act > pred) throw InvalidInput(fmt::format("T_a = {} must lie in [1, T_p = {}]", act, pred));
}

double DiffusionSchedule::alpha_bar(int k) const {
  if (k < 0 || k > K) throw InvalidInput(fmt::format("diffusion step {} outside [0, {}]", k, K));
  return k == 0 ? 1.0 : alpha_bars[static_cast<std::size_t>(k - 1)];
}

DiffusionSchedule make_schedule(int K, const std::string& kind, double beta_start, double beta_end) {
  if (K < 1) throw InvalidInput(fmt::format("schedule needs K >= 1, got {}", K));
  DiffusionSchedule s;
  s.K = K;
  s.kind = kind;
  if (kind == "linear") {
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
      throw InvalidInput("linear schedule needs 0 < beta_start <= beta_end < 1");
    for (int k = 0; k < K; ++k)
      s.betas.push_back(K == 1 ? beta_start : beta_start + (beta_end - beta_start) * k / (K - 1));
  } else if (kind == "squared-cosine") {
    constexpr double off = 0.008;
    auto f = [](double t) {
      const double c = std::cos((t + off) / (1.0 + off) * kPi / 2.0);
      return c * c;
    };
    for (int k = 0; k < K; ++k) {
      const double b = 1.0 - f(static_cast<double>(k + 1) / K) / f(static_cast<double>(k) / K);
      s.betas.push_back(std::clamp(b, 1e-6, 0.999));
    }
  } else {
    throw InvalidInput("schedule kind must be linear or squared-cosine, got " + kind);
  }
  double ab = 1.0;
  for (double b : s.betas) {
    s.alphas.push_back(1.0 - b);
    ab *= 1.0 - b;
    s.alpha_bars.push_back(ab);
  }
  return s;
}

template <typename T>
std::vector<T> add_noise(const std::vector<T>& x0, int k, const std::vector<T>& eps, const DiffusionSchedule& s) {
  if (k < 1 || k > s.K) throw InvalidInput(fmt::format("add_noise: k = {} outside [1, {}]", k, s.K));
  if (x0.size() != eps.size()) throw DimensionError("add_noise: x0 and eps sizes differ");
  const double ab = s.alpha_bar(k);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  std::vector<T> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = static_cast<T>(a * x0[i] + b * eps[i]);
  return out;
}

template std::vector<float> add_noise(const std::vector<float>&, int, const std::vector<float>&,
                                      const DiffusionSchedule&);
template std::vector<double> add_noise(const std::vector<double>&, int, const std::vector<double>&,
                                       const DiffusionSchedule&);

// ------------------------------------------------------------------ config

void PolicyConfig::validate() const {
  horizons.validate();
  encoder.validate();
  if (blocks < 1 || heads < 1 || ffn_mult < 1) throw InvalidInput("policy widths must be positive");
  if (encoder.token_dim % heads != 0) throw InvalidInput("token_dim must be divisible by heads");
  if (diffusion_steps < 1) throw InvalidInput("diffusion_steps must be >= 1");
  if (inference_steps < 1) throw InvalidInput("inference_steps must be >= 1");
  if (!(blink_p >= 0.0 && blink_p <= 1.0)) throw InvalidInput("blink_p must lie in [0, 1]");
  if (!(lr > 0.0) || !(lr_min >= 0.0) || lr_min > lr) throw InvalidInput("need 0 <= lr_min <= lr, lr > 0");
  if (batch_size < 1 || train_steps < 0) throw InvalidInput("batch_size must be >= 1, train_steps >= 0");
}

void to_json(nlohmann::json& j, const PolicyConfig& c) {
  j = {{"obs_horizon", c.horizons.obs},
       {"pred_horizon", c.horizons.pred},
       {"action_horizon", c.horizons.act},
       {"encoder", c.encoder},
       {"blocks", c.blocks},
       {"heads", c.heads},
       {"ffn_mult", c.ffn_mult},
       {"diffusion_steps", c.diffusion_steps},
       {"schedule", c.schedule},
       {"inference_steps", c.inference_steps},
       {"ddim", c.ddim},
       {"blink_p", c.blink_p},
       {"lr", c.lr},
       {"lr_min", c.lr_min},
       {"weight_decay", c.weight_decay},
       {"batch_size", c.batch_size},
       {"train_steps", c.train_steps},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PolicyConfig& c) {
  nlohmann::json defaults;
  to_json(defaults, PolicyConfig{});
  for (const auto& [k, v] : j.items())
    if (!defaults.contains(k)) throw InvalidInput("unknown policy key: " + k);
  const PolicyConfig d;
  c.horizons.obs = j.value("obs_horizon", d.horizons.obs);
  c.horizons.pred = j.value("pred_horizon", d.horizons.pred);
  c.horizons.act = j.value("action_horizon", d.horizons.act);
  c.encoder = j.contains("encoder") ? j.at("encoder").get<enc::EncoderConfig>() : d.encoder;
  c.blocks = j.value("blocks", d.blocks);
  c.heads = j.value("heads", d.heads);
  c.ffn_mult = j.value("ffn_mult", d.ffn_mult);
  c.diffusion_steps = j.value("diffusion_steps", d.diffusion_steps);
  c.schedule = j.value("schedule", d.schedule);
  c.inference_steps = j.value("inference_steps", d.inference_steps);
  c.ddim = j.value("ddim", d.ddim);
  c.blink_p = j.value("blink_p", d.blink_p);
  c.lr = j.value("lr", d.lr);
  c.lr_min = j.value("lr_min", d.lr_min);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.train_steps = j.value("train_steps", d.train_steps);
  c.seed = j.value("seed", d.seed);
  c.validate();
}

std::vector<double> sinusoidal(double pos, int dim) {
  std::vector<double> out(static_cast<std::size_t>(dim));
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half));
    out[static_cast<std::size_t>(i)] = std::sin(pos * freq);
    out[static_cast<std::size_t>(half + i)] = std::cos(pos * freq);
  }
  return out;
}

// ------------------------------------------------------------------ model

template <typename T>
DiffusionPolicy<T>::DiffusionPolicy(const PolicyConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  sched_ = make_schedule(cfg_.diffusion_steps, cfg_.schedule);
  Rng rng(Rng::mix(cfg_.seed, 0x706f6c));
  encoder_ = std::make_unique<enc::Encoder<T>>(cfg_.encoder, cfg_.horizons.obs, params_, rng);
  const int D = cfg_.encoder.token_dim;
  const int F = D * cfg_.ffn_mult;
  auto P = [&](const std::string& n, Tensor<T> t) { params_.add("pol." + n, std::move(t)); };
  auto ones = [&](int n) { return Tensor<T>::full({n}, T(1), true); };
  auto zeros = [&](int n) { return Tensor<T>::zeros({n}, true); };

  P("in.w", tc::glorot<T>(kNumJoints, D, rng));
  P("in.b", zeros(D));
  P("step.w1", tc::glorot<T>(D, D, rng));
  P("step.b1", zeros(D));
  P("step.w2", tc::glorot<T>(D, D, rng));
  P("step.b2", zeros(D));
  P("mem.g", ones(D));
  P("mem.b", zeros(D));
  for (int b = 0; b < cfg_.blocks; ++b) {
    const std::string n = fmt::format("blk{}.", b);
    for (const char* ln : {"ln1", "ln2", "ln3"}) {
      P(n + ln + ".g", ones(D));
      P(n + ln + ".b", zeros(D));
    }
    for (const char* m : {"sq", "sk", "sv", "so", "cq", "ck", "cv", "co"}) {
      P(n + m + ".w", tc::glorot<T>(D, D, rng));
      P(n + m + ".b", zeros(D));
    }
    P(n + "ff1.w", tc::glorot<T>(D, F, rng));
    P(n + "ff1.b", zeros(F));
    P(n + "ff2.w", tc::glorot<T>(F, D, rng));
    P(n + "ff2.b", zeros(D));
  }
  P("lnf.g", ones(D));
  P("lnf.b", zeros(D));
  P("out.w", tc::glorot<T>(D, kNumJoints, rng));
  P("out.b", zeros(kNumJoints));

  std::vector<T> pos;
  for (int t = 0; t < cfg_.horizons.pred; ++t)
    for (double v : sinusoidal(t, D)) pos.push_back(static_cast<T>(v));
  action_pos_ = Tensor<T>({cfg_.horizons.pred, D}, std::move(pos));
}

template <typename T>
enc::ObsBatch<T> DiffusionPolicy<T>::make_obs_batch(const std::vector<Sample>& samples, double blink_p, bool jitter,
                                                    Rng& rng) const {
  const auto& ec = cfg_.encoder;
  const int st = cfg_.horizons.obs, nc = ec.num_cameras;
  const bool pixels = !ec.cacheable();
  const int width = pixels ? ec.pixel_dim() : ec.backbone_dim();
  enc::ObsBatch<T> ob;
  ob.batch = static_cast<int>(samples.size());
  ob.steps = st;
  ob.cameras = nc;
  ob.input_is_pixels = pixels;
  const std::size_t rows = samples.size() * static_cast<std::size_t>(st * nc);
  std::vector<T> input(rows * static_cast<std::size_t>(width), T(0));
  std::vector<T> poses(rows * 9);
  ob.valid.resize(rows);
  ob.joints.reserve(samples.size() * static_cast<std::size_t>(st * kNumJoints));
  std::vector<T> row(static_cast<std::size_t>(width));
  std::size_t r = 0;
  for (const Sample& s : samples) {
    if (static_cast<int>(s.obs.size()) != st)
      throw DimensionError(fmt::format("sample has {} observation steps, policy expects {}", s.obs.size(), st));
    for (const ObsStep* o : s.obs) {
      if (static_cast<int>(o->cam_input.size()) != nc || static_cast<int>(o->poses.size()) != nc)
        throw DimensionError(fmt::format("observation has {} cameras / {} poses, expected {}", o->cam_input.size(),
                                         o->poses.size(), nc));
      for (int c = 0; c < nc; ++c, ++r) {
        const auto& in = o->cam_input[static_cast<std::size_t>(c)];
        // One draw per slot whether or not the camera delivered.
        const bool blink = blink_p > 0.0 && rng.uniform() < blink_p;
        const bool valid = !in.empty() && !blink;
        ob.valid[r] = valid ? T(1) : T(0);
        if (valid) {
          if (static_cast<int>(in.size()) != width)
            throw DimensionError(fmt::format("camera input has width {}, encoder expects {}", in.size(), width));
          std::copy(in.begin(), in.end(), row.begin());
          if (jitter) enc::color_jitter(row, 1, rng);
          std::copy(row.begin(), row.end(), input.begin() + static_cast<std::ptrdiff_t>(r * width));
        }
        const auto& p = o->poses[static_cast<std::size_t>(c)];
        std::copy(p.begin(), p.end(), poses.begin() + static_cast<std::ptrdiff_t>(r * 9));
      }
      for (float j : o->joints) ob.joints.push_back(static_cast<T>(normalize_angle(j)));
    }
  }
  ob.cam_input = Tensor<T>({static_cast<int>(rows), width}, std::move(input));
  ob.poses = Tensor<T>({static_cast<int>(rows), 9}, std::move(poses));
  return ob;
}

template <typename T>
Tensor<T> DiffusionPolicy<T>::step_tokens(const std::vector<int>& ks) const {
  auto G = [&](const std::string& k) -> const Tensor<T>& { return params_.get("pol." + k); };
  const int D = cfg_.encoder.token_dim;
  std::vector<T> e;
  for (int k : ks)
    for (double v : sinusoidal(k, D)) e.push_back(static_cast<T>(v));
  Tensor<T> x({static_cast<int>(ks.size()), D}, std::move(e));
  return tc::linear(tc::gelu(tc::linear(x, G("step.w1"), G("step.b1"))), G("step.w2"), G("step.b2"));
}

template <typename T>
Tensor<T> DiffusionPolicy<T>::denoise(const Tensor<T>& x_k, const std::vector<int>& ks,
                                      const enc::ConditionTokens<T>& cond) const {
  auto G = [&](const std::string& k) -> const Tensor<T>& { return params_.get("pol." + k); };
  const int B = cond.batch, tp = cfg_.horizons.pred;
  if (static_cast<int>(ks.size()) != B) throw DimensionError("denoise: one step index per sample required");
  if (x_k.rank() != 2 || x_k.dim(0) != B * tp || x_k.dim(1) != kNumJoints)
    throw DimensionError(fmt::format("denoise: expected {}x{} noisy actions, got {}", B * tp, kNumJoints,
                                     tc::shape_str(x_k.shape())));
  for (int k : ks)
    if (k < 1 || k > sched_.K) throw InvalidInput(fmt::format("denoise: step {} outside [1, {}]", k, sched_.K));

  // Memory per sample: its condition tokens followed by its step token.
  const int per = cond.per_sample;
  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(B) * (per + 1));
  for (int s = 0; s < B; ++s) {
    for (int i = 0; i < per; ++i) order.push_back(s * per + i);
    order.push_back(B * per + s);
  }
  Tensor<T> mem = tc::gather_rows(tc::concat<T>({cond.tokens, step_tokens(ks)}, 0), order);
  mem = tc::layer_norm(mem, G("mem.g"), G("mem.b"));

  Tensor<T> h = tc::add_tiled(tc::linear(x_k, G("in.w"), G("in.b")), action_pos_);
  for (int b = 0; b < cfg_.blocks; ++b) {
    const std::string n = fmt::format("blk{}.", b);
    auto L = [&](const Tensor<T>& x, const std::string& m) { return tc::linear(x, G(n + m + ".w"), G(n + m + ".b")); };
    Tensor<T> x = tc::layer_norm(h, G(n + "ln1.g"), G(n + "ln1.b"));
    h = h + L(tc::attention(L(x, "sq"), L(x, "sk"), L(x, "sv"), B, cfg_.heads), "so");
    x = tc::layer_norm(h, G(n + "ln2.g"), G(n + "ln2.b"));
    h = h + L(tc::attention(L(x, "cq"), L(mem, "ck"), L(mem, "cv"), B, cfg_.heads), "co");
    x = tc::layer_norm(h, G(n + "ln3.g"), G(n + "ln3.b"));
    h = h + L(tc::gelu(L(x, "ff1")), "ff2");
  }
  h = tc::layer_norm(h, G("lnf.g"), G("lnf.b"));
  return tc::linear(h, G("out.w"), G("out.b"));
}

template <typename T>
Tensor<T> DiffusionPolicy<T>::loss(const std::vector<Sample>& samples, Rng& rng, double blink_p) const {
  if (samples.empty()) throw InvalidInput("loss: empty batch");
  const int B = static_cast<int>(samples.size()), tp = cfg_.horizons.pred;
  enc::ObsBatch<T> ob = make_obs_batch(samples, blink_p, cfg_.encoder.color_jitter, rng);
  enc::ConditionTokens<T> cond = encoder_->assemble(ob);

  const std::size_t n = static_cast<std::size_t>(tp) * kNumJoints;
  std::vector<T> xk, eps;
  xk.reserve(B * n);
  eps.reserve(B * n);
  std::vector<int> ks;
  for (const Sample& s : samples) {
    if (static_cast<int>(s.actions.size()) != tp)
      throw DimensionError(fmt::format("sample has {} actions, policy expects T_p = {}", s.actions.size(), tp));
    std::vector<T> x0, e(n);
    for (const Action& a : s.actions)
      for (float v : a) x0.push_back(static_cast<T>(normalize_angle(v)));
    const int k = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched_.K)));
    for (auto& v : e) v = static_cast<T>(rng.normal());
    auto x = add_noise(x0, k, e, sched_);
    xk.insert(xk.end(), x.begin(), x.end());
    eps.insert(eps.end(), e.begin(), e.end());
    ks.push_back(k);
  }
  Tensor<T> pred = denoise(Tensor<T>({B * tp, kNumJoints}, std::move(xk)), ks, cond);
  Tensor<T> diff = pred - Tensor<T>({B * tp, kNumJoints}, std::move(eps));
  return tc::mean(diff * diff);
}

template <typename T>
std::vector<Action> DiffusionPolicy<T>::sample_actions(const std::vector<const ObsStep*>& obs,
                                                       std::uint64_t seed) const {
  auto& self = const_cast<DiffusionPolicy<T>&>(*this);
  NoGrad<T> guard(self.params_);
  Rng rng(seed);
  const int tp = cfg_.horizons.pred;
  const std::size_t n = static_cast<std::size_t>(tp) * kNumJoints;

  Sample s{obs, {}};
  Rng unused(0);
  enc::ConditionTokens<T> cond = encoder_->assemble(make_obs_batch({s}, 0.0, false, unused));

  std::vector<double> x(n);
  for (auto& v : x) v = rng.normal();

  // Reverse-process step indices, K first.
  std::vector<int> steps;
  if (cfg_.ddim) {
    const int S = std::min(cfg_.inference_steps, sched_.K);
    for (int i = 0; i < S; ++i) {
      const int k = S == 1 ? sched_.K
                           : static_cast<int>(std::lround(sched_.K - static_cast<double>(i) * (sched_.K - 1) / (S - 1)));
      if (steps.empty() || k < steps.back()) steps.push_back(k);
    }
  } else {
    for (int k = sched_.K; k >= 1; --k) steps.push_back(k);
  }

  for (std::size_t i = 0; i < steps.size(); ++i) {
    const int k = steps[i];
    const int k_prev = cfg_.ddim ? (i + 1 < steps.size() ? steps[i + 1] : 0) : k - 1;
    std::vector<T> xt(x.begin(), x.end());
    Tensor<T> eps_t = denoise(Tensor<T>({tp, kNumJoints}, std::move(xt)), {k}, cond);
    const auto& e = eps_t.values();
    const double ab = sched_.alpha_bar(k), ab_prev = sched_.alpha_bar(k_prev);
    for (std::size_t j = 0; j < n; ++j) {
      const double eps = static_cast<double>(e[j]);
      double x0 = (x[j] - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
      x0 = std::clamp(x0, -1.0, 1.0);
      if (cfg_.ddim) {
        const double eps_c = (x[j] - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
        x[j] = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps_c;
      } else {
        const double beta = sched_.betas[static_cast<std::size_t>(k - 1)];
        const double alpha = sched_.alphas[static_cast<std::size_t>(k - 1)];
        const double mean = std::sqrt(ab_prev) * beta / (1.0 - ab) * x0 +
                            std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab) * x[j];
        const double var = beta * (1.0 - ab_prev) / (1.0 - ab);
        x[j] = mean + (k > 1 ? std::sqrt(var) * rng.normal() : 0.0);
      }
    }
  }

  std::vector<Action> out(static_cast<std::size_t>(tp));
  for (int t = 0; t < tp; ++t)
    for (int j = 0; j < kNumJoints; ++j) {
      const double a = denormalize_angle(x[static_cast<std::size_t>(t * kNumJoints + j)]);
      out[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)] =
          static_cast<float>(std::clamp(a, -kJointLimit, kJointLimit));
    }
  return out;
}

template <typename T>
void DiffusionPolicy<T>::save(const std::filesystem::path& ckpt, const nlohmann::json& extra) const {
  tc::save_checkpoint(ckpt, params_);
  nlohmann::json side;
  side["config"] = cfg_;
  side["action_normalization"] = {{"scale", kJointLimit}, {"offset", 0.0}};
  side["schedule"] = {{"K", sched_.K}, {"kind", sched_.kind}};
  side["parameters"] = params_.count();
  side.merge_patch(extra);
  std::ofstream f(ckpt.string() + ".json");
  if (!f) throw CheckpointError("cannot write sidecar for " + ckpt.string());
  f << side.dump(2) << "\n";
}

template <typename T>
void DiffusionPolicy<T>::load(const std::filesystem::path& ckpt) {
  if (!std::filesystem::exists(ckpt)) throw CheckpointError("missing checkpoint: " + ckpt.string());
  tc::load_checkpoint(ckpt, params_);
}

// ------------------------------------------------------------------ helpers

template <typename T>
NoGrad<T>::NoGrad(tc::ParamSet<T>& params) : params_(params) {
  for (auto& [name, t] : params_.items()) t.node()->requires_grad = false;
}

template <typename T>
NoGrad<T>::~NoGrad() {
  for (auto& [name, t] : params_.items()) t.node()->requires_grad = true;
}

template <typename T>
Trainer<T>::Trainer(DiffusionPolicy<T>& policy, std::uint64_t seed)
    : policy_(policy),
      adam_(policy.params(), tc::AdamConfig{policy.config().lr, 0.9, 0.999, 1e-8, policy.config().weight_decay}),
      rng_(seed) {}

template <typename T>
double Trainer<T>::train_step(const std::vector<Sample>& samples) {
  if (samples.empty()) throw DatasetError("train_step: no samples");
  const auto& cfg = policy_.config();
  const int total = std::max(1, cfg.train_steps);
  const double progress = std::min(1.0, static_cast<double>(step_) / total);
  adam_.set_lr(cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + std::cos(kPi * progress)));

  std::vector<Sample> batch;
  const std::size_t bs = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), samples.size());
  for (std::size_t i = 0; i < bs; ++i) batch.push_back(samples[rng_.below(samples.size())]);

  policy_.params().zero_grad();
  Tensor<T> l = policy_.loss(batch, rng_, cfg.blink_p);
  const double v = static_cast<double>(l.item());
  if (!std::isfinite(v))
    throw Error(fmt::format("non-finite loss {} at step {} (batch {}, lr {:.3g})", v, step_, bs,
                            cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + std::cos(kPi * progress))));
  l.backward();
  adam_.step();
  ++step_;
  return v;
}

template class DiffusionPolicy<float>;
template class DiffusionPolicy<double>;
template class NoGrad<float>;
template class NoGrad<double>;
template class Trainer<float>;
template class Trainer<double>;

}  // namespace panoptes::pol
