#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "panoptes/kinematics.hpp"
#include "panoptes/worldsim.hpp"

namespace panoptes::render {

struct Intrinsics {
  int width = 64;
  int height = 64;
  double fx = 0, fy = 0, cx = 0, cy = 0;
};

/// Pinhole intrinsics for a horizontal field of view in degrees.
/// Throws InvalidInput unless 0 < fov < 180 and the size is positive.
Intrinsics intrinsics_from_fov(double fov_h_deg, int width, int height);

/// RGB8, row-major, 3 bytes per pixel.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h, sim::Rgb fill = {});

  sim::Rgb at(int x, int y) const {
    const auto i = 3 * (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x));
    return {rgb[i], rgb[i + 1], rgb[i + 2]};
  }
  void set(int x, int y, sim::Rgb c) {
    const auto i = 3 * (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x));
    rgb[i] = c.r;
    rgb[i + 1] = c.g;
    rgb[i + 2] = c.b;
  }
  bool valid() const { return width > 0 && height > 0 && rgb.size() == 3u * width * height; }
  bool operator==(const Image&) const = default;
};

/// Pixel coordinates of a camera-frame point; nullopt when z <= 0.
std::optional<Eigen::Vector2d> project_point(const kin::Vec3& p_cam, const Intrinsics& k);

struct Palette {
  sim::Rgb background{196, 208, 226};
  sim::Rgb table_light{156, 150, 140};
  sim::Rgb table_dark{128, 122, 114};
  sim::Rgb zone_light{120, 170, 120};
  sim::Rgb zone_dark{100, 145, 100};
  sim::Rgb link_a{40, 60, 110};
  sim::Rgb link_b{55, 85, 150};
  sim::Rgb head{70, 70, 70};
  double checker = 0.05;
};

struct RenderOptions {
  Palette palette;
  /// Body segment not drawn (the camera's own link); -1 draws all.
  int exclude_link = -1;
  double near = 0.003;
};

/// Ray-cast rendering of the table, target zone, objects and robot body
/// from one camera. Each pixel takes the nearest primitive along its ray.
Image render_camera(const sim::WorldState& world, const sim::WorldModel& model, const kin::CameraPose& cam,
                    const Intrinsics& k, const RenderOptions& opts = {});

/// Renders all cameras of the chain, excluding each camera's own link.
std::vector<Image> render_all(const sim::WorldState& world, const sim::WorldModel& model,
                              const std::vector<kin::CameraPose>& cams, const Intrinsics& k);

/// Static overhead camera looking straight down at the base.
kin::CameraPose overhead_camera(double height = 0.9);

void write_ppm(const std::filesystem::path& path, const Image& img);
Image read_ppm(const std::filesystem::path& path);

}  // namespace panoptes::render
