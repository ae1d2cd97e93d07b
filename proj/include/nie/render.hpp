#pragma once

// Raycast sensor over a WorldState: per-pixel planar depth (camera-frame Z),
// instance and category ids, and flat-shaded category color. Rays are cast
// against the floor plane, merged wall boxes, and object boxes; the nearest
// hit wins.

#include <cstdint>
#include <vector>

#include "nie/geometry.hpp"
#include "nie/tensor.hpp"
#include "nie/worldsim.hpp"

namespace nie {

constexpr int32_t kSegFloor = -1;
constexpr int32_t kSegWall = -2;
constexpr int32_t kSegNone = -3;

struct Rgb {
  float r, g, b;
};

// Fixed palette: evenly spread hues, fully saturated enough to be distinct.
inline Rgb category_color(int32_t category) {
  if (category == kSegFloor) return {0.75f, 0.75f, 0.75f};
  if (category == kSegWall) return {0.45f, 0.45f, 0.45f};
  if (category < 0) return {0.f, 0.f, 0.f};
  const double hue = std::fmod(0.61803398875 * category + 0.12, 1.0) * 6.0;
  const int sector = static_cast<int>(hue);
  const double frac = hue - sector;
  const double v = 0.9, s = 0.65;
  const double p = v * (1 - s), q = v * (1 - s * frac), t = v * (1 - s * (1 - frac));
  double r = v, g = t, b = p;
  switch (sector % 6) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    case 5: r = v; g = p; b = q; break;
  }
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

struct Observation {
  int width = 0, height = 0;
  Tensor<float> color;            // (3, H, W)
  Tensor<float> depth;            // (H, W), meters, camera-frame Z
  std::vector<int32_t> instance;  // row-major H*W
  std::vector<int32_t> category;  // row-major H*W
};

inline CameraModel agent_camera(const WorldState& w) {
  const Vec3 eye = w.agent.position + Vec3{0, w.agent.camera_height, 0};
  return make_camera(w.params.render_size, w.params.fov_deg, eye,
                     static_cast<double>(w.agent.azimuth_deg),
                     static_cast<double>(w.agent.elevation_deg));
}

namespace detail {

// Ray-AABB slab test; returns the planar-parameter t of the nearest boundary
// crossing in front of the camera, or infinity on a miss.
inline double ray_aabb(const Vec3& o, const Vec3& d, const Vec3& lo, const Vec3& hi) {
  double enter = -std::numeric_limits<double>::infinity();
  double exit = std::numeric_limits<double>::infinity();
  const std::array<double, 3> os = {o.x, o.y, o.z}, ds = {d.x, d.y, d.z},
                              los = {lo.x, lo.y, lo.z}, his = {hi.x, hi.y, hi.z};
  for (int i = 0; i < 3; ++i) {
    if (ds[static_cast<size_t>(i)] == 0.0) {
      if (os[static_cast<size_t>(i)] < los[static_cast<size_t>(i)] ||
          os[static_cast<size_t>(i)] > his[static_cast<size_t>(i)])
        return std::numeric_limits<double>::infinity();
      continue;
    }
    double t0 = (los[static_cast<size_t>(i)] - os[static_cast<size_t>(i)]) /
                ds[static_cast<size_t>(i)];
    double t1 = (his[static_cast<size_t>(i)] - os[static_cast<size_t>(i)]) /
                ds[static_cast<size_t>(i)];
    if (t0 > t1) std::swap(t0, t1);
    enter = std::max(enter, t0);
    exit = std::min(exit, t1);
  }
  constexpr double kEps = 1e-9;
  if (enter > exit) return std::numeric_limits<double>::infinity();
  if (enter > kEps) return enter;
  if (exit > kEps) return exit;
  return std::numeric_limits<double>::infinity();
}

struct ObjectBox {
  const ObjectInstance* obj;
  double cos_yaw, sin_yaw;
};

inline double ray_object(const Vec3& o, const Vec3& d, const ObjectBox& box) {
  const auto& obj = *box.obj;
  const Vec3 rel = o - obj.pose.position;
  // rotate by -yaw about Y (inverse of the footprint rotation)
  const double c = box.cos_yaw, s = box.sin_yaw;
  const Vec3 lo{rel.x * c - rel.z * s, rel.y, rel.x * s + rel.z * c};
  const Vec3 ld{d.x * c - d.z * s, d.y, d.x * s + d.z * c};
  return ray_aabb(lo, ld, {-obj.width / 2, 0, -obj.depth / 2},
                  {obj.width / 2, obj.height, obj.depth / 2});
}

}  // namespace detail

inline Observation render(const WorldState& w) {
  const CameraModel cam = agent_camera(w);
  const CameraBasis basis = camera_basis(cam.azimuth_deg, cam.elevation_deg);
  const int n = w.params.render_size;

  Observation obs;
  obs.width = n;
  obs.height = n;
  obs.color = Tensor<float>({3, n, n});
  obs.depth = Tensor<float>({n, n}, static_cast<float>(w.params.far_depth));
  obs.instance.assign(static_cast<size_t>(n) * n, kSegNone);
  obs.category.assign(static_cast<size_t>(n) * n, kSegNone);

  const auto rects = merge_wall_rects(w);
  std::vector<std::pair<Vec3, Vec3>> wall_boxes;
  for (const auto& r : rects) {
    const double p = w.params.pitch;
    wall_boxes.push_back({{r.x0 * p, 0, r.z0 * p},
                          {r.x1 * p, w.params.wall_height, r.z1 * p}});
  }
  std::vector<detail::ObjectBox> boxes;
  for (const auto& o : w.objects)
    boxes.push_back({&o, std::cos(deg2rad(o.pose.yaw_deg)),
                     std::sin(deg2rad(o.pose.yaw_deg))});

  const Vec3 origin = cam.position;
  for (int v = 0; v < n; ++v) {
    for (int u = 0; u < n; ++u) {
      const double px = (u - cam.cx) / cam.f;
      const double py = -(v - cam.cy) / cam.f;
      // with the camera-frame z component fixed at 1, the ray parameter t is
      // exactly the planar depth of the hit
      const Vec3 dir = basis.right * px + basis.up * py + basis.forward;

      double best = w.params.far_depth;
      int32_t inst = kSegNone, cat = kSegNone;

      if (dir.y < 0) {
        const double t = -origin.y / dir.y;
        const double hx = origin.x + t * dir.x, hz = origin.z + t * dir.z;
        if (t < best && hx >= 0 && hx <= w.room_w() && hz >= 0 &&
            hz <= w.room_d()) {
          best = t;
          inst = kSegFloor;
          cat = kSegFloor;
        }
      }
      for (const auto& [lo, hi] : wall_boxes) {
        const double t = detail::ray_aabb(origin, dir, lo, hi);
        if (t < best) {
          best = t;
          inst = kSegWall;
          cat = kSegWall;
        }
      }
      for (const auto& box : boxes) {
        const double t = detail::ray_object(origin, dir, box);
        if (t < best) {
          best = t;
          inst = static_cast<int32_t>(box.obj->id);
          cat = box.obj->category;
        }
      }

      const size_t pix = static_cast<size_t>(v) * n + u;
      obs.depth[static_cast<int64_t>(pix)] = static_cast<float>(best);
      obs.instance[pix] = inst;
      obs.category[pix] = cat;
      const Rgb rgb = category_color(cat);
      obs.color[static_cast<int64_t>(pix)] = rgb.r;
      obs.color[static_cast<int64_t>(pix) + static_cast<int64_t>(n) * n] = rgb.g;
      obs.color[static_cast<int64_t>(pix) + 2l * n * n] = rgb.b;
    }
  }
  return obs;
}

inline std::vector<int64_t> visible_object_ids(const Observation& obs) {
  std::vector<int64_t> ids;
  for (int32_t id : obs.instance)
    if (id >= 0) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

// Renders and stamps visibility for subsequent interaction steps.
inline Observation observe(WorldState& w) {
  Observation obs = render(w);
  w.visible_ids = visible_object_ids(obs);
  return obs;
}

// The eight box corners in world coordinates (y spans [0, height]).
inline std::array<Vec3, 8> object_corners_world(const ObjectInstance& o) {
  const Affine4 pose = o.pose.to_affine();
  std::array<Vec3, 8> out;
  int k = 0;
  for (double y : {0.0, o.height})
    for (double z : {-o.depth / 2, o.depth / 2})
      for (double x : {-o.width / 2, o.width / 2})
        out[static_cast<size_t>(k++)] = pose.transform_point({x, y, z});
  return out;
}

inline std::array<Vec3, 8> object_corners_camera(const WorldState& w,
                                                 const ObjectInstance& o) {
  const Affine4 e = agent_camera(w).extrinsic();
  std::array<Vec3, 8> out = object_corners_world(o);
  for (Vec3& p : out) p = e.transform_point(p);
  return out;
}

}  // namespace nie
