#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "relflow/core/binio.hpp"
#include "relflow/core/error.hpp"
#include "relflow/core/grid.hpp"
#include "relflow/core/rng.hpp"

namespace relflow {

using Vec3 = Eigen::Vector3d;

/// Per-pixel intrinsic channels. Albedo and normals carry three channels, depth and irradiance one.
///
/// Normals live in camera space: x points to image-right, y to image-down and z toward the
/// viewer, so every visible surface has n_z > 0. Depth is the distance from the (orthographic)
/// image plane divided by the far distance, so it lies in (0, 1] and smaller means closer.
struct IntrinsicStack {
  ImageF albedo;
  ImageF depth;
  ImageF normals;
  ImageF irradiance;

  IntrinsicStack() = default;
  IntrinsicStack(int h, int w)
      : albedo(h, w, 3), depth(h, w, 1, 1.0f), normals(h, w, 3), irradiance(h, w, 1) {}

  int height() const noexcept { return albedo.height; }
  int width() const noexcept { return albedo.width; }

  bool operator==(const IntrinsicStack&) const = default;
};

/// Returns a description of the first violated invariant, or nothing if the stack is valid.
inline std::optional<std::string> find_invariant_violation(const IntrinsicStack& s) {
  const int h = s.height(), w = s.width();
  if (!s.albedo.same_extent(h, w) || s.albedo.channels != 3 || !s.depth.same_extent(h, w) || s.depth.channels != 1 ||
      !s.normals.same_extent(h, w) || s.normals.channels != 3 || !s.irradiance.same_extent(h, w) ||
      s.irradiance.channels != 1)
    return "channel shapes disagree";
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const auto n = s.normals.pixel(r, c);
      const double norm = std::sqrt(double(n[0]) * n[0] + double(n[1]) * n[1] + double(n[2]) * n[2]);
      if (!(std::abs(norm - 1.0) <= 1e-5)) return "normal not unit length";
      if (!(n[2] > 0.0f)) return "normal facing away from the camera";
      if (!(s.depth(r, c) > 0.0f && s.depth(r, c) <= 1.0f)) return "depth outside (0,1]";
      if (!(s.irradiance(r, c) >= 0.0f && s.irradiance(r, c) <= 1.0f)) return "irradiance outside [0,1]";
      for (int k = 0; k < 3; ++k)
        if (!(s.albedo(r, c, k) >= 0.0f && s.albedo(r, c, k) <= 1.0f)) return "albedo outside [0,1]";
    }
  }
  return std::nullopt;
}

enum class PrimitiveKind { Plane, Sphere, Box, Panel };

inline const char* to_string(PrimitiveKind k) {
  switch (k) {
    case PrimitiveKind::Plane: return "plane";
    case PrimitiveKind::Sphere: return "sphere";
    case PrimitiveKind::Box: return "box";
    case PrimitiveKind::Panel: return "panel";
  }
  return "?";
}

/// One scene element in world coordinates (y up).
/// Plane: `center` is a point on the plane, `normal` its facing direction.
/// Sphere: `extent.x()` is the radius. Box/Panel: `extent` holds half sizes along x, y, z.
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::Sphere;
  Vec3 center = Vec3::Zero();
  Vec3 extent = Vec3::Ones();
  Vec3 normal = Vec3::UnitY();
  Vec3 albedo = Vec3::Constant(0.5);
};

/// Orthographic camera. `position` lies on the image plane; rays travel along `forward`.
struct Camera {
  Vec3 position{0.0, 0.0, -6.0};
  Vec3 forward{0.0, 0.0, 1.0};
  double half_extent = 2.5;
  double far = 12.0;

  Vec3 right() const { return Vec3::UnitY().cross(forward).normalized(); }
  Vec3 down() const { return right().cross(forward).normalized(); }

  /// World units covered by one pixel at the given resolution.
  double pixel_pitch(int resolution) const { return 2.0 * half_extent / resolution; }
};

struct Light {
  Vec3 toward_light{0.0, 1.0, 0.0};
  double ambient = 0.3;
  double diffuse = 0.7;
};

struct SceneDescriptor {
  Camera camera;
  Light light;
  std::vector<Primitive> primitives;
};

struct SceneGenConfig {
  int resolution = 32;
  int min_primitives = 3;
  int max_primitives = 6;
  bool ground_plane = true;
  double ambient_min = 0.15;
  double ambient_max = 0.35;

  void validate() const {
    if (resolution < 16 || resolution > 128) throw ConfigError("scenegen.resolution must be in [16, 128]");
    if (min_primitives < 1) throw ConfigError("scenegen.min_primitives must be >= 1");
    if (max_primitives < min_primitives) throw ConfigError("scenegen.max_primitives must be >= min_primitives");
    if (!(ambient_min >= 0.0 && ambient_max >= ambient_min && ambient_max <= 1.0))
      throw ConfigError("scenegen ambient range must satisfy 0 <= min <= max <= 1");
  }
};

struct SceneSample {
  ImageF rgb;
  IntrinsicStack gt;
  std::uint64_t seed = 0;
  SceneDescriptor scene;
};

/// rgb = clamp(albedo * irradiance, 0, 1), irradiance broadcast over colour channels.
inline ImageF render_lambertian(const IntrinsicStack& gt) {
  const int h = gt.height(), w = gt.width();
  if (!gt.irradiance.same_extent(h, w) || gt.albedo.channels != 3 || gt.irradiance.channels != 1)
    throw ShapeError("render_lambertian: albedo/irradiance shape mismatch");
  ImageF rgb(h, w, 3);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double e = gt.irradiance(r, c);
      for (int k = 0; k < 3; ++k)
        rgb(r, c, k) = static_cast<float>(std::clamp(double(gt.albedo(r, c, k)) * e, 0.0, 1.0));
    }
  return rgb;
}

namespace detail {

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  Vec3 normal = Vec3::Zero();
  int primitive = -1;
};

inline void intersect_plane(const Vec3& o, const Vec3& d, const Primitive& p, int id, Hit& best) {
  const double denom = p.normal.dot(d);
  if (std::abs(denom) < 1e-12) return;
  const double t = p.normal.dot(p.center - o) / denom;
  if (t > 1e-9 && t < best.t) best = {t, denom < 0 ? Vec3(p.normal) : Vec3(-p.normal), id};
}

inline void intersect_sphere(const Vec3& o, const Vec3& d, const Primitive& p, int id, Hit& best) {
  const double radius = p.extent.x();
  const Vec3 oc = o - p.center;
  const double b = oc.dot(d);
  const double c = oc.squaredNorm() - radius * radius;
  const double disc = b * b - c;
  if (disc < 0.0) return;
  const double sq = std::sqrt(disc);
  double t = -b - sq;
  if (t <= 1e-9) t = -b + sq;
  if (t > 1e-9 && t < best.t) best = {t, ((o + t * d) - p.center).normalized(), id};
}

inline void intersect_box(const Vec3& o, const Vec3& d, const Primitive& p, int id, Hit& best) {
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  int axis = -1;
  double side = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double lo = p.center[a] - p.extent[a], hi = p.center[a] + p.extent[a];
    if (std::abs(d[a]) < 1e-12) {
      if (o[a] < lo || o[a] > hi) return;
      continue;
    }
    double t0 = (lo - o[a]) / d[a], t1 = (hi - o[a]) / d[a];
    double s = -1.0;
    if (t0 > t1) {
      std::swap(t0, t1);
      s = 1.0;
    }
    if (t0 > t_near) {
      t_near = t0;
      axis = a;
      side = s;
    }
    t_far = std::min(t_far, t1);
    if (t_near > t_far) return;
  }
  if (axis < 0 || t_near <= 1e-9 || t_near >= best.t) return;
  Vec3 n = Vec3::Zero();
  n[axis] = side;
  best = {t_near, n, id};
}

}  // namespace detail

/// Ray-casts a scene description into RGB plus exact intrinsics.
inline SceneSample render_scene(const SceneDescriptor& scene, int resolution, std::uint64_t seed = 0) {
  if (resolution < 1) throw ConfigError("render_scene: resolution must be positive");
  const Camera& cam = scene.camera;
  const Vec3 fwd = cam.forward.normalized();
  const Vec3 right = cam.right(), down = cam.down();
  const Vec3 light = scene.light.toward_light.normalized();
  const double pitch = cam.pixel_pitch(resolution);
  const double half = 0.5 * resolution;

  SceneSample out;
  out.seed = seed;
  out.scene = scene;
  out.gt = IntrinsicStack(resolution, resolution);
  IntrinsicStack& gt = out.gt;

  for (int r = 0; r < resolution; ++r) {
    for (int c = 0; c < resolution; ++c) {
      const Vec3 origin = cam.position + (c + 0.5 - half) * pitch * right + (r + 0.5 - half) * pitch * down;
      detail::Hit hit;
      for (int i = 0; i < static_cast<int>(scene.primitives.size()); ++i) {
        const Primitive& p = scene.primitives[i];
        switch (p.kind) {
          case PrimitiveKind::Plane: detail::intersect_plane(origin, fwd, p, i, hit); break;
          case PrimitiveKind::Sphere: detail::intersect_sphere(origin, fwd, p, i, hit); break;
          case PrimitiveKind::Box:
          case PrimitiveKind::Panel: detail::intersect_box(origin, fwd, p, i, hit); break;
        }
      }
      Vec3 albedo = Vec3::Zero();
      Vec3 n_world = -fwd;
      double depth = 1.0;
      if (hit.primitive >= 0) {
        albedo = scene.primitives[hit.primitive].albedo.cwiseMax(0.0).cwiseMin(1.0);
        n_world = hit.normal;
        // Orthographic rays may graze a face; keep the stored normal strictly camera-facing.
        if (n_world.dot(fwd) > -1e-6) n_world = (n_world - (n_world.dot(fwd) + 1e-6) * fwd).normalized();
        depth = std::clamp(hit.t / cam.far, 1e-6, 1.0);
      }
      const double irr =
          std::clamp(scene.light.ambient + scene.light.diffuse * std::max(0.0, n_world.dot(light)), 0.0, 1.0);
      Vec3 n_cam(n_world.dot(right), n_world.dot(down), -n_world.dot(fwd));
      n_cam.normalize();

      for (int k = 0; k < 3; ++k) {
        gt.albedo(r, c, k) = static_cast<float>(albedo[k]);
        gt.normals(r, c, k) = static_cast<float>(n_cam[k]);
      }
      gt.depth(r, c) = static_cast<float>(depth);
      gt.irradiance(r, c) = static_cast<float>(irr);
    }
  }
  out.rgb = render_lambertian(gt);
  return out;
}

/// Draws a random scene: camera pitched down at a ground plane with a handful of objects resting on it.
inline SceneDescriptor random_scene(std::uint64_t seed, const SceneGenConfig& cfg) {
  cfg.validate();
  Rng rng = Rng::stream(seed, "scenegen");
  constexpr double deg = std::numbers::pi / 180.0;

  SceneDescriptor s;
  const double pitch = rng.uniform(28.0, 42.0) * deg;
  const double yaw = rng.uniform(-35.0, 35.0) * deg;
  s.camera.forward = Vec3(std::sin(yaw) * std::cos(pitch), -std::sin(pitch), std::cos(yaw) * std::cos(pitch));
  const Vec3 target(0.0, 0.5, 0.0);
  s.camera.position = target - 6.0 * s.camera.forward;
  s.camera.half_extent = 2.5;
  s.camera.far = 12.0;

  const double elevation = rng.uniform(30.0, 75.0) * deg;
  const double azimuth = rng.uniform(0.0, 360.0) * deg;
  s.light.toward_light =
      Vec3(std::cos(elevation) * std::cos(azimuth), std::sin(elevation), std::cos(elevation) * std::sin(azimuth));
  s.light.ambient = rng.uniform(cfg.ambient_min, cfg.ambient_max);
  s.light.diffuse = 1.0 - s.light.ambient;

  auto color = [&] { return Vec3(rng.uniform(0.08, 0.95), rng.uniform(0.08, 0.95), rng.uniform(0.08, 0.95)); };

  if (cfg.ground_plane) {
    Primitive floor;
    floor.kind = PrimitiveKind::Plane;
    floor.center = Vec3::Zero();
    floor.normal = Vec3::UnitY();
    floor.albedo = color();
    s.primitives.push_back(floor);
  }

  const int count = rng.uniform_int(cfg.min_primitives, cfg.max_primitives);
  for (int i = 0; i < count; ++i) {
    Primitive p;
    const int kind = rng.uniform_int(0, 2);
    const double x = rng.uniform(-1.9, 1.9), z = rng.uniform(-1.6, 1.6);
    if (kind == 0) {
      p.kind = PrimitiveKind::Sphere;
      const double radius = rng.uniform(0.35, 0.9);
      p.extent = Vec3(radius, radius, radius);
      p.center = Vec3(x, radius, z);
    } else if (kind == 1) {
      p.kind = PrimitiveKind::Box;
      p.extent = Vec3(rng.uniform(0.25, 0.8), rng.uniform(0.2, 0.9), rng.uniform(0.25, 0.8));
      p.center = Vec3(x, p.extent.y(), z);
    } else {
      p.kind = PrimitiveKind::Panel;
      const bool along_x = rng.bernoulli(0.5);
      const double half_len = rng.uniform(0.4, 1.1);
      p.extent = along_x ? Vec3(half_len, rng.uniform(0.3, 1.0), 0.02) : Vec3(0.02, rng.uniform(0.3, 1.0), half_len);
      p.center = Vec3(x, p.extent.y(), z);
    }
    p.albedo = color();
    s.primitives.push_back(p);
  }
  return s;
}

/// Pure function of (seed, cfg).
inline SceneSample generate_scene(std::uint64_t seed, const SceneGenConfig& cfg) {
  cfg.validate();
  return render_scene(random_scene(seed, cfg), cfg.resolution, seed);
}

/// Pixel checksum of an RGB image (FNV-1a over the raw float bytes).
inline std::uint64_t rgb_checksum(const ImageF& rgb) {
  return binio::fnv1a({reinterpret_cast<const unsigned char*>(rgb.data.data()), rgb.data.size() * sizeof(float)});
}

}  // namespace relflow
