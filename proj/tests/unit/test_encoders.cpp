#include <doctest.h>

#include <cmath>

#include "panoptes/encoders.hpp"

using namespace panoptes;
using namespace panoptes::enc;
using tc::Tensor;

namespace {

Tensor<double> pixels_of(const render::Image& img, const EncoderConfig& cfg) {
  const auto v = image_to_input(img, cfg);
  return Tensor<double>({1, cfg.pixel_dim()}, std::vector<double>(v.begin(), v.end()));
}

struct Fixture {
  EncoderConfig cfg;
  tc::ParamSet<double> params;
  Rng rng{4};
  std::unique_ptr<Encoder<double>> enc;
  explicit Fixture(int obs_steps = 1) { enc = std::make_unique<Encoder<double>>(cfg, obs_steps, params, rng); }

  ObsBatch<double> batch(std::vector<double> valid) {
    ObsBatch<double> b;
    b.batch = 1;
    b.steps = 1;
    b.cameras = cfg.num_cameras;
    Rng r(9);
    std::vector<double> feats;
    std::vector<double> poses;
    for (int c = 0; c < cfg.num_cameras; ++c) {
      for (int i = 0; i < cfg.backbone_dim(); ++i) feats.push_back(r.uniform());
      for (int i = 0; i < 9; ++i) poses.push_back(r.uniform(-1, 1));
    }
    b.cam_input = Tensor<double>({cfg.num_cameras, cfg.backbone_dim()}, feats);
    b.poses = Tensor<double>({cfg.num_cameras, 9}, poses);
    b.valid = std::move(valid);
    b.joints.assign(kNumJoints, 0.1);
    return b;
  }
};

}  // namespace

TEST_CASE("image encoder") {
  Fixture f;
  f.cfg.image_size = 64;
  const auto black = render::Image(64, 64, {0, 0, 0});
  const auto white = render::Image(64, 64, {255, 255, 255});
  const auto fb = f.enc->encode_images(pixels_of(black, f.cfg));
  const auto fw = f.enc->encode_images(pixels_of(white, f.cfg));
  const auto fb2 = f.enc->encode_images(pixels_of(black, f.cfg));
  CHECK(fb.shape() == tc::Shape{1, f.cfg.image_feat_dim});
  CHECK(fb.values() == fb2.values());
  double diff = 0;
  for (std::size_t i = 0; i < fb.numel(); ++i) diff += std::abs(fb.values()[i] - fw.values()[i]);
  CHECK(diff > 1e-3);

  CHECK_THROWS_AS(image_to_input(render::Image(32, 32), f.cfg), InvalidInput);
  CHECK_THROWS_AS(image_to_input(render::Image(64, 48), f.cfg), InvalidInput);
}

TEST_CASE("pose embedding") {
  Fixture f;
  // Identity orientation at the origin: 6D vector (1,0,0,0,1,0).
  Tensor<double> pose({1, 9}, {0, 0, 0, 1, 0, 0, 0, 1, 0});
  const auto e = f.enc->encode_poses(pose);
  const int pd = f.cfg.pose_embed_dim;
  REQUIRE(e.shape() == tc::Shape{1, 2 * pd});
  const auto& pb = f.params.get("enc.pose.pos.b").values();
  const auto& rw = f.params.get("enc.pose.rot.w").values();
  const auto& rb = f.params.get("enc.pose.rot.b").values();
  for (int i = 0; i < pd; ++i) {
    const auto u = static_cast<std::size_t>(i);
    CHECK(e.values()[u] == doctest::Approx(pb[u]));
    const double want = rb[u] + rw[u] + rw[static_cast<std::size_t>(4 * pd + i)];
    CHECK(e.values()[static_cast<std::size_t>(pd + i)] == doctest::Approx(want));
  }
  Tensor<double> two({2, 9}, {0.1, 0.2, 0.3, 1, 0, 0, 0, 1, 0, 0.1, 0.2, 0.3, 1, 0, 0, 0, 1, 0});
  const auto e2 = f.enc->encode_poses(two);
  for (int i = 0; i < 2 * pd; ++i)
    CHECK(e2.values()[static_cast<std::size_t>(i)] == e2.values()[static_cast<std::size_t>(2 * pd + i)]);
  CHECK_THROWS_AS(f.enc->encode_poses(Tensor<double>({1, 6}, std::vector<double>(6, 0.0))), DimensionError);
}

TEST_CASE("token assembly and masking") {
  Fixture f;
  const auto all_valid = f.batch(std::vector<double>(kNumCameras, 1.0));
  const auto tok = f.enc->assemble(all_valid);
  CHECK(tok.per_sample == 30);
  CHECK(tok.tokens.shape() == tc::Shape{30, f.cfg.token_dim});
  int masked = 0;
  for (const auto& t : tok.tags) masked += t.masked ? 1 : 0;
  CHECK(masked == 0);
  CHECK(tok.tags[0].camera == 0);
  CHECK(tok.tags[21].joint == 0);

  std::vector<double> valid(kNumCameras, 1.0);
  valid[3] = 0.0;
  const auto cam3 = f.enc->assemble(f.batch(valid));
  CHECK(cam3.tags[3].masked);
  const int fd = f.cfg.image_feat_dim, d = f.cfg.token_dim;
  const auto& mask = f.params.get("enc.mask").values();
  const auto& time = f.params.get("enc.time").values();
  for (int i = 0; i < d; ++i) {
    const auto a = cam3.tokens.values()[static_cast<std::size_t>(3 * d + i)];
    const auto b = tok.tokens.values()[static_cast<std::size_t>(3 * d + i)];
    if (i < fd)
      CHECK(a == doctest::Approx(mask[static_cast<std::size_t>(i)] + time[static_cast<std::size_t>(i)]));
    else
      CHECK(a == b);  // pose part unchanged
  }
  // Other cameras are untouched.
  for (int i = 0; i < d; ++i)
    CHECK(cam3.tokens.values()[static_cast<std::size_t>(4 * d + i)] ==
          tok.tokens.values()[static_cast<std::size_t>(4 * d + i)]);

  auto bad = f.batch(std::vector<double>(kNumCameras, 1.0));
  bad.cameras = 20;
  CHECK_THROWS_AS(f.enc->assemble(bad), DimensionError);
}

TEST_CASE("blink mask") {
  bus::FrameSet fs;
  fs.slots.resize(kNumCameras);
  for (auto& s : fs.slots) {
    s.image = render::Image(2, 2);
    s.valid = true;
  }
  Rng rng(5);
  CHECK(blink_mask(fs, 0.0, rng).valid_count() == kNumCameras);
  CHECK(blink_mask(fs, 1.0, rng).valid_count() == 0);
  CHECK_THROWS_AS(blink_mask(fs, 1.2, rng), InvalidInput);

  const int trials = 100000;
  long dropped = 0, any = 0;
  for (int t = 0; t < trials; ++t) {
    const int n = kNumCameras - blink_mask(fs, 0.05, rng).valid_count();
    dropped += n;
    any += n > 0 ? 1 : 0;
  }
  CHECK(std::abs(static_cast<double>(dropped) / (trials * 21.0) - 0.05) < 0.003);
  CHECK(std::abs(static_cast<double>(any) / trials - 0.659) < 0.01);
}
