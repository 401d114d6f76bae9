#pragma once

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "panoptes/kinematics.hpp"
#include "panoptes/render.hpp"
#include "panoptes/sensorbus.hpp"
#include "panoptes/tensorcore.hpp"

namespace panoptes::enc {

using tc::Tensor;

struct EncoderConfig {
  int token_dim = 64;
  int image_feat_dim = 32;
  int pose_embed_dim = 16;
  std::string image_encoder = "patch-linear";  // or "tiny-vit"
  int image_size = 64;
  int patch = 8;
  int patch_channels = 3;  // patch-linear output width per patch
  int head_hidden = 64;
  /// Keeps the patch projection at its channel-mean initialisation. Only
  /// meaningful for patch-linear; tiny-vit always trains.
  bool freeze_backbone = true;
  bool color_jitter = true;
  std::string mask_mode = "learned";  // or "zero"
  bool use_pose = true;
  int num_cameras = kNumCameras;
  int vit_width = 64;
  int vit_blocks = 2;
  int vit_heads = 4;

  void validate() const;
  int patches_per_image() const { return (image_size / patch) * (image_size / patch); }
  int pixel_dim() const { return image_size * image_size * 3; }
  /// Width of the backbone output fed to the trainable head.
  int backbone_dim() const;
  bool cacheable() const { return image_encoder == "patch-linear" && freeze_backbone; }
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

/// RGB8 image to a row of floats in [0, 1]. Rejects a resolution other
/// than image_size × image_size.
std::vector<float> image_to_input(const render::Image& img, const EncoderConfig& cfg);

/// Position (3) and 6D orientation, as fed to the pose projection.
std::array<double, 9> pose_input(const kin::CameraPose& pose);

/// Per-channel colour jitter: scale U(0.9, 1.1), shift U(-0.05, 0.05).
/// `values` holds `count` rows whose entries cycle through RGB channels.
template <typename T>
void color_jitter(std::vector<T>& values, std::size_t count, Rng& rng);

/// Independently invalidates each valid slot with probability p.
bus::FrameSet blink_mask(const bus::FrameSet& frames, double p, Rng& rng);

/// One batch of observation windows, flattened for the encoder. Row order
/// for camera data is (sample, timestep, camera); for joints (sample,
/// timestep, joint).
template <typename T>
struct ObsBatch {
  int batch = 0;
  int steps = 0;    // T_o
  int cameras = 0;  // per timestep
  /// Backbone features (cached path) or normalised pixels.
  Tensor<T> cam_input;
  bool input_is_pixels = false;
  std::vector<T> valid;  // one per camera row
  Tensor<T> poses;       // rows × 9
  std::vector<T> joints; // batch·steps·9
};

struct TokenTag {
  int camera = -1;  // camera id or -1
  int joint = -1;   // joint id or -1
  int step = 0;     // timestep offset within the window
  bool masked = false;
};

template <typename T>
struct ConditionTokens {
  Tensor<T> tokens;  // (batch · per_sample) × D
  int batch = 0;
  int per_sample = 0;
  std::vector<TokenTag> tags;  // one per token row
};

template <typename T>
class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, int obs_steps, tc::ParamSet<T>& params, Rng& rng,
          const std::string& prefix = "enc.");

  const EncoderConfig& config() const { return cfg_; }

  /// Pixels (n × pixel_dim) to backbone features (n × backbone_dim).
  Tensor<T> backbone(const Tensor<T>& pixels) const;
  /// Backbone features to image features (n × image_feat_dim).
  Tensor<T> head(const Tensor<T>& features) const;
  Tensor<T> encode_images(const Tensor<T>& pixels) const { return head(backbone(pixels)); }
  /// Rows of 9 pose values to embeddings (n × 2·pose_embed_dim).
  Tensor<T> encode_poses(const Tensor<T>& poses) const;

  ConditionTokens<T> assemble(const ObsBatch<T>& obs) const;

 private:
  Tensor<T> vit_backbone(const Tensor<T>& patches, int n) const;

  EncoderConfig cfg_;
  int obs_steps_;
  tc::ParamSet<T>& params_;
  std::string prefix_;
  Tensor<T> patch_w_, patch_b_;  // frozen copies when not trained
  std::vector<int> patch_order_;
};

}  // namespace panoptes::enc
