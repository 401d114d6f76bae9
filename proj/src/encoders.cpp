#include "panoptes/encoders.hpp"

#include <fmt/format.h>

namespace panoptes::enc {

void EncoderConfig::validate() const {
  if (token_dim <= 0 || image_feat_dim <= 0 || pose_embed_dim <= 0)
    throw InvalidInput("encoder dimensions must be positive");
  if (image_feat_dim + 2 * pose_embed_dim != token_dim)
    throw InvalidInput(fmt::format("image_feat_dim + 2*pose_embed_dim = {} but token_dim = {}",
                                   image_feat_dim + 2 * pose_embed_dim, token_dim));
  if (image_encoder != "patch-linear" && image_encoder != "tiny-vit")
    throw InvalidInput("image_encoder must be patch-linear or tiny-vit");
  if (image_size <= 0 || patch <= 0 || image_size % patch != 0)
    throw InvalidInput("image_size must be a positive multiple of patch");
  if (patch_channels <= 0 || head_hidden <= 0) throw InvalidInput("encoder widths must be positive");
  if (mask_mode != "learned" && mask_mode != "zero") throw InvalidInput("mask_mode must be learned or zero");
  if (num_cameras <= 0) throw InvalidInput("num_cameras must be positive");
  if (vit_width <= 0 || vit_blocks <= 0 || vit_heads <= 0 || vit_width % vit_heads != 0)
    throw InvalidInput("bad tiny-vit shape");
}

int EncoderConfig::backbone_dim() const {
  return image_encoder == "patch-linear" ? patches_per_image() * patch_channels : vit_width;
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"token_dim", c.token_dim},           {"image_feat_dim", c.image_feat_dim},
       {"pose_embed_dim", c.pose_embed_dim}, {"image_encoder", c.image_encoder},
       {"image_size", c.image_size},         {"patch", c.patch},
       {"patch_channels", c.patch_channels}, {"head_hidden", c.head_hidden},
       {"freeze_backbone", c.freeze_backbone}, {"color_jitter", c.color_jitter},
       {"mask_mode", c.mask_mode},           {"use_pose", c.use_pose},
       {"num_cameras", c.num_cameras},       {"vit_width", c.vit_width},
       {"vit_blocks", c.vit_blocks},         {"vit_heads", c.vit_heads}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  nlohmann::json defaults;
  to_json(defaults, EncoderConfig{});
  for (const auto& [k, v] : j.items()) {
    if (!defaults.contains(k)) throw InvalidInput("unknown encoder key: " + k);
  }
  const EncoderConfig d;
  c.token_dim = j.value("token_dim", d.token_dim);
  c.image_feat_dim = j.value("image_feat_dim", d.image_feat_dim);
  c.pose_embed_dim = j.value("pose_embed_dim", d.pose_embed_dim);
  c.image_encoder = j.value("image_encoder", d.image_encoder);
  c.image_size = j.value("image_size", d.image_size);
  c.patch = j.value("patch", d.patch);
  c.patch_channels = j.value("patch_channels", d.patch_channels);
  c.head_hidden = j.value("head_hidden", d.head_hidden);
  c.freeze_backbone = j.value("freeze_backbone", d.freeze_backbone);
  c.color_jitter = j.value("color_jitter", d.color_jitter);
  c.mask_mode = j.value("mask_mode", d.mask_mode);
  c.use_pose = j.value("use_pose", d.use_pose);
  c.num_cameras = j.value("num_cameras", d.num_cameras);
  c.vit_width = j.value("vit_width", d.vit_width);
  c.vit_blocks = j.value("vit_blocks", d.vit_blocks);
  c.vit_heads = j.value("vit_heads", d.vit_heads);
  c.validate();
}

std::vector<float> image_to_input(const render::Image& img, const EncoderConfig& cfg) {
  if (!img.valid() || img.width != cfg.image_size || img.height != cfg.image_size)
    throw InvalidInput(fmt::format("image is {}x{}, encoder expects {}x{}", img.width, img.height, cfg.image_size,
                                   cfg.image_size));
  std::vector<float> out(img.rgb.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(img.rgb[i]) / 255.0f;
  return out;
}

std::array<double, 9> pose_input(const kin::CameraPose& pose) { return pose.as_vector(); }

template <typename T>
void color_jitter(std::vector<T>& values, std::size_t count, Rng& rng) {
  if (count == 0) return;
  const std::size_t width = values.size() / count;
  for (std::size_t r = 0; r < count; ++r) {
    T s[3], b[3];
    for (int c = 0; c < 3; ++c) {
      s[c] = static_cast<T>(rng.uniform(0.9, 1.1));
      b[c] = static_cast<T>(rng.uniform(-0.05, 0.05));
    }
    T* row = values.data() + r * width;
    for (std::size_t i = 0; i < width; ++i) row[i] = row[i] * s[i % 3] + b[i % 3];
  }
}

bus::FrameSet blink_mask(const bus::FrameSet& frames, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw InvalidInput("blink probability must lie in [0, 1]");
  bus::FrameSet out = frames;
  for (auto& s : out.slots) {
    // One draw per slot keeps the stream aligned regardless of validity.
    const bool drop = rng.uniform() < p;
    if (drop && s.valid) {
      s.valid = false;
      s.image.reset();
    }
  }
  return out;
}

// ---------------------------------------------------------------- Encoder

namespace {

template <typename T>
Tensor<T> zeros_param(tc::Shape s) {
  return Tensor<T>::zeros(std::move(s), true);
}

template <typename T>
Tensor<T> normal_param(tc::Shape s, double stddev, Rng& rng) {
  std::vector<T> v(tc::shape_numel(s));
  for (auto& x : v) x = static_cast<T>(stddev * rng.normal());
  return Tensor<T>(std::move(s), std::move(v), true);
}

}  // namespace

template <typename T>
Encoder<T>::Encoder(const EncoderConfig& cfg, int obs_steps, tc::ParamSet<T>& params, Rng& rng,
                    const std::string& prefix)
    : cfg_(cfg), obs_steps_(obs_steps), params_(params), prefix_(prefix) {
  cfg_.validate();
  if (obs_steps_ < 1) throw InvalidInput("obs_steps must be >= 1");
  const int p = cfg_.patch, s = cfg_.image_size, g = s / p;
  const int pd = p * p * 3;
  const int np = cfg_.patches_per_image();

  // Pixel rows reordered so each patch is contiguous: (patch row, patch
  // col, y within patch, x within patch).
  patch_order_.reserve(static_cast<std::size_t>(s) * s);
  for (int py = 0; py < g; ++py)
    for (int px = 0; px < g; ++px)
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x) patch_order_.push_back((py * p + y) * s + px * p + x);

  auto P = [&](const std::string& n, Tensor<T> t) { params_.add(prefix_ + n, std::move(t)); };

  if (cfg_.image_encoder == "patch-linear") {
    // Initialised to the per-channel patch mean.
    const int c_out = cfg_.patch_channels;
    std::vector<T> w(static_cast<std::size_t>(pd) * c_out, T(0));
    for (int k = 0; k < p * p; ++k)
      for (int c = 0; c < 3; ++c)
        if (c < c_out) w[static_cast<std::size_t>(k * 3 + c) * c_out + c] = T(1) / static_cast<T>(p * p);
    Tensor<T> pw({pd, c_out}, std::move(w));
    Tensor<T> pb = Tensor<T>::zeros({c_out});
    if (cfg_.freeze_backbone) {
      patch_w_ = pw;
      patch_b_ = pb;
    } else {
      P("patch.w", pw);
      P("patch.b", pb);
    }
  } else {
    const int w = cfg_.vit_width;
    P("vit.embed.w", tc::glorot<T>(pd, w, rng));
    P("vit.embed.b", zeros_param<T>({w}));
    P("vit.cls", normal_param<T>({1, w}, 0.02, rng));
    P("vit.pos", normal_param<T>({np + 1, w}, 0.02, rng));
    for (int b = 0; b < cfg_.vit_blocks; ++b) {
      const std::string n = fmt::format("vit.{}.", b);
      P(n + "ln1.g", Tensor<T>::full({w}, T(1), true));
      P(n + "ln1.b", zeros_param<T>({w}));
      for (const char* m : {"q", "k", "v", "o"}) {
        P(n + m + ".w", tc::glorot<T>(w, w, rng));
        P(n + m + ".b", zeros_param<T>({w}));
      }
      P(n + "ln2.g", Tensor<T>::full({w}, T(1), true));
      P(n + "ln2.b", zeros_param<T>({w}));
      P(n + "mlp1.w", tc::glorot<T>(w, 2 * w, rng));
      P(n + "mlp1.b", zeros_param<T>({2 * w}));
      P(n + "mlp2.w", tc::glorot<T>(2 * w, w, rng));
      P(n + "mlp2.b", zeros_param<T>({w}));
    }
    P("vit.lnf.g", Tensor<T>::full({w}, T(1), true));
    P("vit.lnf.b", zeros_param<T>({w}));
  }

  const int bd = cfg_.backbone_dim();
  P("head.w1", tc::glorot<T>(bd, cfg_.head_hidden, rng));
  P("head.b1", zeros_param<T>({cfg_.head_hidden}));
  P("head.w2", tc::glorot<T>(cfg_.head_hidden, cfg_.image_feat_dim, rng));
  P("head.b2", zeros_param<T>({cfg_.image_feat_dim}));

  P("pose.pos.w", tc::glorot<T>(3, cfg_.pose_embed_dim, rng));
  P("pose.pos.b", zeros_param<T>({cfg_.pose_embed_dim}));
  P("pose.rot.w", tc::glorot<T>(6, cfg_.pose_embed_dim, rng));
  P("pose.rot.b", zeros_param<T>({cfg_.pose_embed_dim}));

  if (cfg_.mask_mode == "learned") P("mask", normal_param<T>({1, cfg_.image_feat_dim}, 0.5, rng));

  P("joint.w", tc::glorot<T>(kNumJoints, cfg_.token_dim, rng));
  P("joint.b", normal_param<T>({kNumJoints, cfg_.token_dim}, 0.5, rng));
  P("time", normal_param<T>({obs_steps_, cfg_.token_dim}, 0.1, rng));
}

template <typename T>
Tensor<T> Encoder<T>::backbone(const Tensor<T>& pixels) const {
  if (pixels.rank() != 2 || pixels.dim(1) != cfg_.pixel_dim())
    throw DimensionError(fmt::format("backbone: expected n×{} pixels, got {}", cfg_.pixel_dim(),
                                     tc::shape_str(pixels.shape())));
  const int n = pixels.dim(0);
  const int np = cfg_.patches_per_image();
  const int pd = cfg_.patch * cfg_.patch * 3;
  const int s2 = cfg_.image_size * cfg_.image_size;
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(n) * s2);
  for (int i = 0; i < n; ++i)
    for (int k : patch_order_) idx.push_back(i * s2 + k);
  Tensor<T> px = tc::gather_rows(tc::reshape(pixels, {n * s2, 3}), idx);
  Tensor<T> patches = tc::reshape(px, {n * np, pd});
  if (cfg_.image_encoder == "patch-linear") {
    const Tensor<T>& w = cfg_.freeze_backbone ? patch_w_ : params_.get(prefix_ + "patch.w");
    const Tensor<T>& b = cfg_.freeze_backbone ? patch_b_ : params_.get(prefix_ + "patch.b");
    return tc::reshape(tc::linear(patches, w, b), {n, np * cfg_.patch_channels});
  }
  return vit_backbone(patches, n);
}

template <typename T>
Tensor<T> Encoder<T>::vit_backbone(const Tensor<T>& patches, int n) const {
  auto G = [&](const std::string& k) -> const Tensor<T>& { return params_.get(prefix_ + k); };
  const int np = cfg_.patches_per_image();
  const int w = cfg_.vit_width;
  Tensor<T> emb = tc::linear(patches, G("vit.embed.w"), G("vit.embed.b"));
  // Interleave a class token ahead of each image's patches.
  Tensor<T> all = tc::concat<T>({emb, G("vit.cls")}, 0);
  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(n) * (np + 1));
  for (int i = 0; i < n; ++i) {
    order.push_back(n * np);
    for (int k = 0; k < np; ++k) order.push_back(i * np + k);
  }
  Tensor<T> h = tc::add_tiled(tc::gather_rows(all, order), G("vit.pos"));
  for (int b = 0; b < cfg_.vit_blocks; ++b) {
    const std::string p = fmt::format("vit.{}.", b);
    Tensor<T> x = tc::layer_norm(h, G(p + "ln1.g"), G(p + "ln1.b"));
    Tensor<T> q = tc::linear(x, G(p + "q.w"), G(p + "q.b"));
    Tensor<T> k = tc::linear(x, G(p + "k.w"), G(p + "k.b"));
    Tensor<T> v = tc::linear(x, G(p + "v.w"), G(p + "v.b"));
    h = h + tc::linear(tc::attention(q, k, v, n, cfg_.vit_heads), G(p + "o.w"), G(p + "o.b"));
    x = tc::layer_norm(h, G(p + "ln2.g"), G(p + "ln2.b"));
    x = tc::linear(tc::gelu(tc::linear(x, G(p + "mlp1.w"), G(p + "mlp1.b"))), G(p + "mlp2.w"), G(p + "mlp2.b"));
    h = h + x;
  }
  std::vector<int> cls;
  for (int i = 0; i < n; ++i) cls.push_back(i * (np + 1));
  (void)w;
  return tc::layer_norm(tc::gather_rows(h, cls), G("vit.lnf.g"), G("vit.lnf.b"));
}

template <typename T>
Tensor<T> Encoder<T>::head(const Tensor<T>& features) const {
  auto G = [&](const std::string& k) -> const Tensor<T>& { return params_.get(prefix_ + k); };
  if (features.rank() != 2 || features.dim(1) != cfg_.backbone_dim())
    throw DimensionError(fmt::format("head: expected n×{} features, got {}", cfg_.backbone_dim(),
                                     tc::shape_str(features.shape())));
  return tc::linear(tc::gelu(tc::linear(features, G("head.w1"), G("head.b1"))), G("head.w2"), G("head.b2"));
}

template <typename T>
Tensor<T> Encoder<T>::encode_poses(const Tensor<T>& poses) const {
  auto G = [&](const std::string& k) -> const Tensor<T>& { return params_.get(prefix_ + k); };
  if (poses.rank() != 2 || poses.dim(1) != 9)
    throw DimensionError("encode_poses: expected n×9, got " + tc::shape_str(poses.shape()));
  Tensor<T> pos = tc::linear(tc::slice(poses, 1, 0, 3), G("pose.pos.w"), G("pose.pos.b"));
  Tensor<T> rot = tc::linear(tc::slice(poses, 1, 3, 6), G("pose.rot.w"), G("pose.rot.b"));
  return tc::concat<T>({pos, rot}, 1);
}

template <typename T>
ConditionTokens<T> Encoder<T>::assemble(const ObsBatch<T>& obs) const {
  auto G = [&](const std::string& k) -> const Tensor<T>& { return params_.get(prefix_ + k); };
  const int b = obs.batch, st = obs.steps, nc = obs.cameras;
  if (st != obs_steps_) throw DimensionError(fmt::format("assemble: {} timesteps, encoder built for {}", st, obs_steps_));
  if (nc != cfg_.num_cameras) throw DimensionError(fmt::format("assemble: {} cameras, encoder built for {}", nc, cfg_.num_cameras));
  const int m = b * st * nc;
  if (static_cast<int>(obs.valid.size()) != m || obs.poses.dim(0) != m || obs.cam_input.dim(0) != m)
    throw DimensionError(fmt::format("assemble: camera rows disagree ({} expected)", m));
  if (static_cast<int>(obs.joints.size()) != b * st * kNumJoints) throw DimensionError("assemble: joint count mismatch");

  Tensor<T> feat = obs.input_is_pixels ? encode_images(obs.cam_input) : head(obs.cam_input);
  std::vector<T> keep(obs.valid), drop(obs.valid.size());
  for (std::size_t i = 0; i < keep.size(); ++i) drop[i] = T(1) - keep[i];
  Tensor<T> keep_t({m}, std::move(keep));
  feat = tc::row_scale(feat, keep_t);
  if (cfg_.mask_mode == "learned") {
    Tensor<T> mask_rows = tc::gather_rows(G("mask"), std::vector<int>(static_cast<std::size_t>(m), 0));
    feat = feat + tc::row_scale(mask_rows, Tensor<T>({m}, std::move(drop)));
  }
  Tensor<T> pose = cfg_.use_pose ? encode_poses(obs.poses) : Tensor<T>::zeros({m, 2 * cfg_.pose_embed_dim});
  Tensor<T> cam_tok = tc::concat<T>({feat, pose}, 1);

  const int mj = b * st * kNumJoints;
  std::vector<int> jidx(static_cast<std::size_t>(mj));
  for (int i = 0; i < mj; ++i) jidx[static_cast<std::size_t>(i)] = i % kNumJoints;
  Tensor<T> jt = tc::row_scale(tc::gather_rows(G("joint.w"), jidx), Tensor<T>({mj}, obs.joints)) +
                 tc::gather_rows(G("joint.b"), jidx);

  // Per sample: for each timestep, cameras then joints.
  const int per = st * (nc + kNumJoints);
  std::vector<int> order, tidx;
  order.reserve(static_cast<std::size_t>(b) * per);
  for (int s = 0; s < b; ++s) {
    for (int t = 0; t < st; ++t) {
      for (int c = 0; c < nc; ++c) {
        order.push_back((s * st + t) * nc + c);
        tidx.push_back(t);
      }
      for (int j = 0; j < kNumJoints; ++j) {
        order.push_back(m + (s * st + t) * kNumJoints + j);
        tidx.push_back(t);
      }
    }
  }
  Tensor<T> all = tc::gather_rows(tc::concat<T>({cam_tok, jt}, 0), order);
  all = all + tc::gather_rows(G("time"), tidx);

  ConditionTokens<T> out;
  out.tokens = all;
  out.batch = b;
  out.per_sample = per;
  for (int s = 0; s < b; ++s) {
    for (int t = 0; t < st; ++t) {
      for (int c = 0; c < nc; ++c)
        out.tags.push_back({c, -1, t, obs.valid[static_cast<std::size_t>((s * st + t) * nc + c)] == T(0)});
      for (int j = 0; j < kNumJoints; ++j) out.tags.push_back({-1, j, t, false});
    }
  }
  return out;
}

template class Encoder<float>;
template class Encoder<double>;
template void color_jitter<float>(std::vector<float>&, std::size_t, Rng&);
template void color_jitter<double>(std::vector<double>&, std::size_t, Rng&);

}  // namespace panoptes::enc
