#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "panoptes/render.hpp"

using namespace panoptes;
using namespace panoptes::render;

TEST_CASE("intrinsics from field of view") {
  CHECK(intrinsics_from_fov(90, 64, 64).fx == doctest::Approx(32.0));
  CHECK(intrinsics_from_fov(50, 64, 64).fx == doctest::Approx(32.0 / std::tan(25.0 * kPi / 180.0)));
  CHECK(intrinsics_from_fov(50, 64, 64).fx == doctest::Approx(68.62).epsilon(1e-4));
  const auto k = intrinsics_from_fov(50, 640, 480);
  CHECK(k.cx == 320.0);
  CHECK(k.cy == 240.0);
  CHECK(k.fy == k.fx);
  CHECK_THROWS_AS(intrinsics_from_fov(0, 64, 64), InvalidInput);
  CHECK_THROWS_AS(intrinsics_from_fov(180, 64, 64), InvalidInput);
  CHECK_THROWS_AS(intrinsics_from_fov(50, 0, 64), InvalidInput);
}

TEST_CASE("pinhole projection") {
  const auto k = intrinsics_from_fov(50, 64, 64);
  const auto c = project_point({0, 0, 1}, k);
  REQUIRE(c);
  CHECK(c->x() == k.cx);
  CHECK(c->y() == k.cy);
  CHECK_FALSE(project_point({0, 0, -1}, k));
  CHECK_FALSE(project_point({0.1, 0, 0}, k));
  const auto p = project_point({0.1, 0, 1}, k);
  REQUIRE(p);
  CHECK(p->x() == doctest::Approx(32 + 0.1 * 32.0 / std::tan(25.0 * kPi / 180.0)));
  CHECK(p->x() == doctest::Approx(38.86).epsilon(1e-3));
}

TEST_CASE("rendering") {
  const sim::WorldModel model;
  const auto k = intrinsics_from_fov(50, 64, 64);
  Palette pal;

  SUBCASE("looking up at the sky gives a uniform background") {
    sim::WorldState empty;
    kin::CameraPose up;
    up.pose.position = {0.3, 0.3, 1.0};  // identity rotation looks along +z
    const Image img = render_camera(empty, model, up, k);
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) REQUIRE(img.at(x, y) == pal.background);
  }

  SUBCASE("object on the optical axis fills the center pixel") {
    sim::WorldState w;
    sim::Object o;
    o.position = {0.35, 0.0};
    o.color = {230, 40, 40};
    w.objects.push_back(o);
    kin::CameraPose cam = overhead_camera();
    cam.pose.position = {0.35, 0.0, model.params.table_height + o.height + 0.3};
    const Image img = render_camera(w, model, cam, k);
    CHECK(img.at(32, 32) == o.color);
    CHECK(img.at(31, 31) == o.color);
    CHECK(img.at(0, 0) != o.color);
  }

  SUBCASE("same inputs, same pixels") {
    sim::SceneConfig cfg;
    cfg.seed = 7;
    const auto w = sim::spawn_scene(cfg, model);
    const auto cams = kin::camera_poses(model.geometry, w.joints);
    const auto a = render_all(w, model, cams, k);
    const auto b = render_all(w, model, cams, k);
    REQUIRE(a.size() == kNumCameras);
    CHECK(a == b);
    CHECK(render_camera(w, model, overhead_camera(), k) == render_camera(w, model, overhead_camera(), k));
  }

  SUBCASE("the overhead view sees the target zone beside the upright chain") {
    // Table point (0.07, 0.07): image +x is world +x, image +y is world -y.
    sim::WorldState w;
    const Image img = render_camera(w, model, overhead_camera(), k);
    const double s = k.fx / (0.9 - model.params.table_height);
    const auto c = img.at(static_cast<int>(k.cx + 0.07 * s), static_cast<int>(k.cy - 0.07 * s));
    CHECK((c == pal.zone_light || c == pal.zone_dark));
  }
}

TEST_CASE("PPM round trip") {
  Image img(5, 3, {1, 2, 3});
  img.set(4, 2, {200, 100, 50});
  const auto path = std::filesystem::temp_directory_path() / "panoptes_render_test.ppm";
  write_ppm(path, img);
  CHECK(read_ppm(path) == img);
  std::filesystem::remove(path);
}
