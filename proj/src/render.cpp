#include "panoptes/render.hpp"

#include <algorithm>
#include <fmt/format.h>
#include <fstream>
#include <limits>

namespace panoptes::render {

namespace {

using kin::Vec3;
constexpr double kInf = std::numeric_limits<double>::infinity();

struct Ray {
  Vec3 o;
  Vec3 d;  // not normalized; t is in units of |d|
};

// Nearest t > near where the ray enters a capsule, or +inf.
double hit_capsule(const Ray& ray, const Vec3& a, const Vec3& b, double r, double near) {
  const Vec3 ba = b - a;
  const Vec3 oa = ray.o - a;
  const double baba = ba.dot(ba);
  const double bard = ba.dot(ray.d);
  const double baoa = ba.dot(oa);
  const double rdoa = ray.d.dot(oa);
  const double oaoa = oa.dot(oa);
  const double dd = ray.d.dot(ray.d);
  double best = kInf;
  if (baba > 1e-14) {
    const double qa = baba * dd - bard * bard;
    const double qb = baba * rdoa - baoa * bard;
    const double qc = baba * oaoa - baoa * baoa - r * r * baba;
    if (std::abs(qa) > 1e-18) {
      const double disc = qb * qb - qa * qc;
      if (disc >= 0) {
        const double t = (-qb - std::sqrt(disc)) / qa;
        const double y = baoa + t * bard;
        if (t > near && y > 0 && y < baba) best = t;
      }
    }
  }
  // End caps.
  for (const Vec3* c : {&a, &b}) {
    const Vec3 oc = ray.o - *c;
    const double qb = ray.d.dot(oc);
    const double qc = oc.dot(oc) - r * r;
    const double disc = qb * qb - dd * qc;
    if (disc < 0) continue;
    const double t = (-qb - std::sqrt(disc)) / dd;
    if (t > near && t < best) best = t;
  }
  return best;
}

// Vertical cylinder standing on z0 with height h, including its top cap.
double hit_cylinder(const Ray& ray, const Eigen::Vector2d& c, double r, double z0, double h, double near) {
  double best = kInf;
  const double ox = ray.o.x() - c.x();
  const double oy = ray.o.y() - c.y();
  const double a = ray.d.x() * ray.d.x() + ray.d.y() * ray.d.y();
  if (a > 1e-18) {
    const double b = ox * ray.d.x() + oy * ray.d.y();
    const double cc = ox * ox + oy * oy - r * r;
    const double disc = b * b - a * cc;
    if (disc >= 0) {
      const double t = (-b - std::sqrt(disc)) / a;
      const double z = ray.o.z() + t * ray.d.z();
      if (t > near && z >= z0 && z <= z0 + h) best = t;
    }
  }
  if (std::abs(ray.d.z()) > 1e-18) {
    const double t = (z0 + h - ray.o.z()) / ray.d.z();
    if (t > near && t < best) {
      const double px = ox + t * ray.d.x();
      const double py = oy + t * ray.d.y();
      if (px * px + py * py <= r * r) best = t;
    }
  }
  return best;
}

struct PixelBox {
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1;  // inclusive
};

// Conservative pixel box of an axis-aligned world box seen by the camera.
PixelBox project_box(const Vec3& lo, const Vec3& hi, const kin::Pose& world_to_cam, const Intrinsics& k,
                     double near) {
  PixelBox full{0, 0, k.width - 1, k.height - 1};
  double umin = kInf, vmin = kInf, umax = -kInf, vmax = -kInf;
  for (int i = 0; i < 8; ++i) {
    const Vec3 corner((i & 1) ? hi.x() : lo.x(), (i & 2) ? hi.y() : lo.y(), (i & 4) ? hi.z() : lo.z());
    const Vec3 pc = world_to_cam.apply(corner);
    if (pc.z() <= near) return full;
    const double u = k.fx * pc.x() / pc.z() + k.cx;
    const double v = k.fy * pc.y() / pc.z() + k.cy;
    umin = std::min(umin, u);
    umax = std::max(umax, u);
    vmin = std::min(vmin, v);
    vmax = std::max(vmax, v);
  }
  PixelBox b;
  b.x0 = std::max(0, static_cast<int>(std::floor(umin)) - 1);
  b.y0 = std::max(0, static_cast<int>(std::floor(vmin)) - 1);
  b.x1 = std::min(k.width - 1, static_cast<int>(std::ceil(umax)) + 1);
  b.y1 = std::min(k.height - 1, static_cast<int>(std::ceil(vmax)) + 1);
  return b;
}

sim::Rgb table_color(const Vec3& p, const sim::WorldState& world, const Palette& pal) {
  const auto ix = static_cast<long>(std::floor(p.x() / pal.checker));
  const auto iy = static_cast<long>(std::floor(p.y() / pal.checker));
  const bool light = ((ix + iy) & 1) == 0;
  if (world.zone.contains({p.x(), p.y()})) return light ? pal.zone_light : pal.zone_dark;
  return light ? pal.table_light : pal.table_dark;
}

}  // namespace

Image::Image(int w, int h, sim::Rgb fill) : width(w), height(h), rgb(3u * static_cast<std::size_t>(w) * h) {
  for (std::size_t i = 0; i < rgb.size(); i += 3) {
    rgb[i] = fill.r;
    rgb[i + 1] = fill.g;
    rgb[i + 2] = fill.b;
  }
}

Intrinsics intrinsics_from_fov(double fov_h_deg, int width, int height) {
  if (!(fov_h_deg > 0.0 && fov_h_deg < 180.0)) {
    throw InvalidInput(fmt::format("field of view {} deg outside (0, 180)", fov_h_deg));
  }
  if (width <= 0 || height <= 0) throw InvalidInput("image size must be positive");
  Intrinsics k;
  k.width = width;
  k.height = height;
  k.fx = (0.5 * width) / std::tan(0.5 * fov_h_deg * kPi / 180.0);
  k.fy = k.fx;
  k.cx = 0.5 * width;
  k.cy = 0.5 * height;
  return k;
}

std::optional<Eigen::Vector2d> project_point(const kin::Vec3& p, const Intrinsics& k) {
  if (p.z() <= 0.0) return std::nullopt;
  return Eigen::Vector2d(k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy);
}

Image render_camera(const sim::WorldState& world, const sim::WorldModel& model, const kin::CameraPose& cam,
                    const Intrinsics& k, const RenderOptions& opts) {
  const Palette& pal = opts.palette;
  const double table_z = model.params.table_height;
  const double extent = model.params.table_half_extent;
  Image img(k.width, k.height, pal.background);
  const std::size_t npix = static_cast<std::size_t>(k.width) * static_cast<std::size_t>(k.height);
  std::vector<double> depth(npix, kInf);

  const kin::Pose world_to_cam = cam.pose.inverse();
  const kin::Mat3& rot = cam.pose.rotation;
  auto ray_at = [&](int x, int y) {
    const Vec3 dc((x + 0.5 - k.cx) / k.fx, (y + 0.5 - k.cy) / k.fy, 1.0);
    return Ray{cam.pose.position, rot * dc};
  };

  // Table plane (bounded by the table extent).
  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      const Ray ray = ray_at(x, y);
      if (std::abs(ray.d.z()) < 1e-15) continue;
      const double t = (table_z - ray.o.z()) / ray.d.z();
      if (t <= opts.near) continue;
      const Vec3 p = ray.o + t * ray.d;
      if (std::abs(p.x()) > extent || std::abs(p.y()) > extent) continue;
      const std::size_t i = static_cast<std::size_t>(y) * k.width + x;
      depth[i] = t;
      img.set(x, y, table_color(p, world, pal));
    }
  }

  for (const auto& o : world.objects) {
    const double h = o.toppled ? 2.0 * o.radius : o.height;
    const Vec3 lo(o.position.x() - o.radius, o.position.y() - o.radius, table_z);
    const Vec3 hi(o.position.x() + o.radius, o.position.y() + o.radius, table_z + h);
    const PixelBox box = project_box(lo, hi, world_to_cam, k, opts.near);
    for (int y = box.y0; y <= box.y1; ++y) {
      for (int x = box.x0; x <= box.x1; ++x) {
        const double t = hit_cylinder(ray_at(x, y), o.position, o.radius, table_z, h, opts.near);
        const std::size_t i = static_cast<std::size_t>(y) * k.width + x;
        if (t < depth[i]) {
          depth[i] = t;
          img.set(x, y, o.color);
        }
      }
    }
  }

  const auto frames = kin::forward_kinematics(model.geometry, world.joints);
  const auto segs = kin::body_segments(model.geometry, frames);
  const double r = model.geometry.body_radius;
  for (const auto& seg : segs) {
    if (seg.link == opts.exclude_link) continue;
    const Vec3 lo = seg.a.cwiseMin(seg.b) - Vec3::Constant(r);
    const Vec3 hi = seg.a.cwiseMax(seg.b) + Vec3::Constant(r);
    const PixelBox box = project_box(lo, hi, world_to_cam, k, opts.near);
    const sim::Rgb color = seg.link == kNumJoints ? pal.head : (seg.link % 2 == 0 ? pal.link_a : pal.link_b);
    for (int y = box.y0; y <= box.y1; ++y) {
      for (int x = box.x0; x <= box.x1; ++x) {
        const double t = hit_capsule(ray_at(x, y), seg.a, seg.b, r, opts.near);
        const std::size_t i = static_cast<std::size_t>(y) * k.width + x;
        if (t < depth[i]) {
          depth[i] = t;
          img.set(x, y, color);
        }
      }
    }
  }
  return img;
}

std::vector<Image> render_all(const sim::WorldState& world, const sim::WorldModel& model,
                              const std::vector<kin::CameraPose>& cams, const Intrinsics& k) {
  std::vector<Image> out;
  out.reserve(cams.size());
  for (std::size_t c = 0; c < cams.size(); ++c) {
    RenderOptions opts;
    if (c < model.geometry.camera_mounts.size()) opts.exclude_link = model.geometry.camera_mounts[c].link;
    out.push_back(render_camera(world, model, cams[c], k, opts));
  }
  return out;
}

kin::CameraPose overhead_camera(double height) {
  kin::CameraPose cam;
  cam.pose.position = Vec3(0, 0, height);
  cam.pose.rotation.col(0) = Vec3(1, 0, 0);
  cam.pose.rotation.col(1) = Vec3(0, -1, 0);
  cam.pose.rotation.col(2) = Vec3(0, 0, -1);
  return cam;
}

void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string());
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  if (magic != "P6" || w <= 0 || h <= 0 || maxv != 255) throw InvalidInput("not a binary 8-bit PPM: " + path.string());
  in.get();
  Image img(w, h);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (!in) throw InvalidInput("truncated PPM: " + path.string());
  return img;
}

}  // namespace panoptes::render
