#pragma once

// Pinhole camera model, rigid transform algebra, and ground-truth motion
// construction from pose pairs. Everything here is double precision and pure.
//
// Conventions, fixed once and asserted in tests:
//   world   X/Z span the floor, Y is up
//   azimuth compass angle from +Z, so forward = (sin az, 0, cos az) and a
//           right turn increases azimuth
//   camera  X right, Y up, Z forward; image v grows downward

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace nie {

struct GeometryError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

// Normalizes an angle in degrees to [0, 360).
inline double normalize_deg(double d) {
  d = std::fmod(d, 360.0);
  if (d < 0) d += 360.0;
  return d;
}

// ----- Vec3 -------------------------------------------------------------------

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  Vec3& operator+=(const Vec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    const double n = norm();
    if (n == 0) throw GeometryError("normalize of zero vector");
    return *this * (1.0 / n);
  }

  bool operator==(const Vec3& o) const = default;
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

// Horizontal (XZ-plane) distance, the measure used for goals and geodesics.
inline double planar_distance(const Vec3& a, const Vec3& b) {
  const double dx = a.x - b.x, dz = a.z - b.z;
  return std::sqrt(dx * dx + dz * dz);
}

// ----- Affine4 ------------------------------------------------------------------

// Row-major 4x4 with bottom row pinned to (0,0,0,1) by construction.
class Affine4 {
 public:
  Affine4() : a_{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1} {}

  static Affine4 identity() { return Affine4(); }

  // R given row-major 3x3, t the translation column.
  static Affine4 from_rt(const std::array<double, 9>& r, const Vec3& t) {
    Affine4 m;
    m.a_ = {r[0], r[1], r[2], t.x,  //
            r[3], r[4], r[5], t.y,  //
            r[6], r[7], r[8], t.z,  //
            0,    0,    0,    1};
    return m;
  }

  static Affine4 translation(const Vec3& t) {
    return from_rt({1, 0, 0, 0, 1, 0, 0, 0, 1}, t);
  }

  // Rotation about the world Y (up) axis; positive angle turns +Z toward +X.
  static Affine4 rotation_y(double deg) {
    const double c = std::cos(deg2rad(deg)), s = std::sin(deg2rad(deg));
    return from_rt({c, 0, s, 0, 1, 0, -s, 0, c}, {});
  }

  double at(int r, int c) const { return a_[static_cast<size_t>(r * 4 + c)]; }
  double& at(int r, int c) { return a_[static_cast<size_t>(r * 4 + c)]; }
  const std::array<double, 16>& raw() const { return a_; }

  Affine4 operator*(const Affine4& o) const {
    Affine4 out;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) {
        double s = 0;
        for (int k = 0; k < 4; ++k) s += at(r, k) * o.at(k, c);
        out.at(r, c) = s;
      }
    return out;
  }

  Vec3 transform_point(const Vec3& p) const {
    return {at(0, 0) * p.x + at(0, 1) * p.y + at(0, 2) * p.z + at(0, 3),
            at(1, 0) * p.x + at(1, 1) * p.y + at(1, 2) * p.z + at(1, 3),
            at(2, 0) * p.x + at(2, 1) * p.y + at(2, 2) * p.z + at(2, 3)};
  }

  Vec3 transform_vector(const Vec3& v) const {
    return {at(0, 0) * v.x + at(0, 1) * v.y + at(0, 2) * v.z,
            at(1, 0) * v.x + at(1, 1) * v.y + at(1, 2) * v.z,
            at(2, 0) * v.x + at(2, 1) * v.y + at(2, 2) * v.z};
  }

  // Inverse assuming the 3x3 block is a rotation: [R|t]^-1 = [R'|-R't].
  Affine4 rigid_inverse() const {
    std::array<double, 9> rt = {at(0, 0), at(1, 0), at(2, 0),  //
                                at(0, 1), at(1, 1), at(2, 1),  //
                                at(0, 2), at(1, 2), at(2, 2)};
    const Vec3 t{at(0, 3), at(1, 3), at(2, 3)};
    const Vec3 nt{-(rt[0] * t.x + rt[1] * t.y + rt[2] * t.z),
                  -(rt[3] * t.x + rt[4] * t.y + rt[5] * t.z),
                  -(rt[6] * t.x + rt[7] * t.y + rt[8] * t.z)};
    return from_rt(rt, nt);
  }

  Vec3 translation_part() const { return {at(0, 3), at(1, 3), at(2, 3)}; }

  // Max deviation of R'R from the identity; 0 for a perfect rotation.
  double rotation_defect() const {
    double worst = 0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += at(k, i) * at(k, j);
        worst = std::max(worst, std::abs(s - (i == j ? 1.0 : 0.0)));
      }
    return worst;
  }

  bool operator==(const Affine4& o) const = default;

 private:
  std::array<double, 16> a_;
};

// ----- Poses --------------------------------------------------------------------

// Planar pose: objects stay upright, so yaw about Y fully determines rotation.
struct ObjectPose {
  Vec3 position;
  double yaw_deg = 0;

  Affine4 to_affine() const {
    Affine4 m = Affine4::rotation_y(yaw_deg);
    m.at(0, 3) = position.x;
    m.at(1, 3) = position.y;
    m.at(2, 3) = position.z;
    return m;
  }

  bool operator==(const ObjectPose& o) const = default;
};

// Camera orientation basis in world coordinates.
struct CameraBasis {
  Vec3 right, up, forward;
};

inline CameraBasis camera_basis(double azimuth_deg, double elevation_deg) {
  const double az = deg2rad(azimuth_deg), el = deg2rad(elevation_deg);
  const Vec3 fwd{std::sin(az) * std::cos(el), std::sin(el),
                 std::cos(az) * std::cos(el)};
  const Vec3 right{std::cos(az), 0, -std::sin(az)};
  return {right, fwd.cross(right), fwd};
}

// Heading on the floor plane, ignoring elevation.
inline Vec3 heading(double azimuth_deg) {
  const double az = deg2rad(azimuth_deg);
  return {std::sin(az), 0, std::cos(az)};
}

struct CameraModel {
  double f = 0;        // focal length, pixels
  double cx = 0, cy = 0;
  int width = 0, height = 0;
  Vec3 position;       // meters, world frame
  double azimuth_deg = 0;
  double elevation_deg = 0;

  void validate() const {
    if (!(f > 0)) throw GeometryError("camera focal length must be positive");
    if (!(cx >= 0 && cx < width && cy >= 0 && cy < height))
      throw GeometryError("principal point outside the image");
  }

  // World -> camera rigid transform.
  Affine4 extrinsic() const {
    const CameraBasis b = camera_basis(azimuth_deg, elevation_deg);
    const std::array<double, 9> r = {b.right.x,   b.right.y,   b.right.z,
                                     b.up.x,      b.up.y,      b.up.z,
                                     b.forward.x, b.forward.y, b.forward.z};
    const Vec3 t{-(r[0] * position.x + r[1] * position.y + r[2] * position.z),
                 -(r[3] * position.x + r[4] * position.y + r[5] * position.z),
                 -(r[6] * position.x + r[7] * position.y + r[8] * position.z)};
    return Affine4::from_rt(r, t);
  }

  bool same_pose(const CameraModel& o) const {
    return position == o.position && azimuth_deg == o.azimuth_deg &&
           elevation_deg == o.elevation_deg;
  }
};

// Square image with the given horizontal field of view.
inline CameraModel make_camera(int size, double fov_deg, Vec3 position,
                               double azimuth_deg, double elevation_deg) {
  CameraModel cam;
  cam.width = size;
  cam.height = size;
  cam.f = (size / 2.0) / std::tan(deg2rad(fov_deg) / 2.0);
  cam.cx = (size - 1) / 2.0;
  cam.cy = (size - 1) / 2.0;
  cam.position = position;
  cam.azimuth_deg = azimuth_deg;
  cam.elevation_deg = elevation_deg;
  cam.validate();
  return cam;
}

// ----- Projection ---------------------------------------------------------------

inline Vec3 backproject(double u, double v, double depth, const CameraModel& cam) {
  if (!(depth > 0)) throw GeometryError("backproject requires positive depth");
  if (u < 0 || u >= cam.width || v < 0 || v >= cam.height)
    throw GeometryError("backproject pixel outside the image");
  return {(u - cam.cx) * depth / cam.f, -(v - cam.cy) * depth / cam.f, depth};
}

struct PixelDepth {
  double u, v, depth;
};

inline PixelDepth project(const Vec3& p_cam, const CameraModel& cam) {
  if (!(p_cam.z > 0)) throw GeometryError("project requires a point in front");
  return {cam.cx + cam.f * p_cam.x / p_cam.z, cam.cy - cam.f * p_cam.y / p_cam.z,
          p_cam.z};
}

// ----- Ground-truth motion --------------------------------------------------------

inline std::vector<Vec3> apply_affine(const std::vector<Vec3>& points,
                                      const Affine4& m) {
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const Vec3& p : points) out.push_back(m.transform_point(p));
  return out;
}

// m = E_{t+1} * W * E_t^-1: maps camera-frame-at-t points rigidly attached to
// the object onto their camera-frame-at-(t+1) locations. W is the object's
// world-frame motion; both identities short-circuit to an exact identity.
inline Affine4 ground_truth_affine(const ObjectPose& obj_t, const ObjectPose& obj_t1,
                                   const CameraModel& cam_t,
                                   const CameraModel& cam_t1) {
  const bool object_static = obj_t == obj_t1;
  const bool camera_static = cam_t.same_pose(cam_t1);
  if (object_static && camera_static) return Affine4::identity();
  const Affine4 w = object_static
                        ? Affine4::identity()
                        : obj_t1.to_affine() * obj_t.to_affine().rigid_inverse();
  return cam_t1.extrinsic() * w * cam_t.extrinsic().rigid_inverse();
}

inline Vec3 keypoint_center(const std::vector<Vec3>& points) {
  if (points.empty()) throw GeometryError("keypoint_center of empty set");
  Vec3 acc;
  for (const Vec3& p : points) acc += p;
  return acc * (1.0 / static_cast<double>(points.size()));
}

}  // namespace nie
