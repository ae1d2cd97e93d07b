#pragma once

// Deterministic 2.5-D world: a wall grid at 0.25 m pitch, upright box objects
// that translate when pushed, and an embodied agent with a discrete action
// set. step() is a pure function of (state, action); identical inputs give
// bitwise-identical successors.
//
// Push targeting consults the visibility stamped by the most recent
// observe(); call observe() (or stamp visible_ids yourself) before stepping
// interaction actions.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include "nie/geometry.hpp"

namespace nie {

struct SimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ----- Actions -----------------------------------------------------------------

enum class Action : int {
  kMoveAhead = 0,
  kRotateRight = 1,
  kRotateLeft = 2,
  kLookUp = 3,
  kLookDown = 4,
  kPush = 5,
  kPull = 6,
  kRightPush = 7,
  kLeftPush = 8,
  kEnd = 9,
};

constexpr int kNumActions = 10;
constexpr int kNumInteractActions = 4;  // Push, Pull, RightPush, LeftPush

inline const char* action_name(Action a) {
  switch (a) {
    case Action::kMoveAhead: return "MoveAhead";
    case Action::kRotateRight: return "RotateRight";
    case Action::kRotateLeft: return "RotateLeft";
    case Action::kLookUp: return "LookUp";
    case Action::kLookDown: return "LookDown";
    case Action::kPush: return "Push";
    case Action::kPull: return "Pull";
    case Action::kRightPush: return "RightPush";
    case Action::kLeftPush: return "LeftPush";
    case Action::kEnd: return "End";
  }
  return "?";
}

inline bool is_interaction(Action a) {
  return a == Action::kPush || a == Action::kPull || a == Action::kRightPush ||
         a == Action::kLeftPush;
}

// ----- Types --------------------------------------------------------------------

struct SimParams {
  double pitch = 0.25;             // cell size, meters
  double base_displacement = 0.5;  // push distance at mass factor 1
  double wall_height = 2.0;
  double fov_deg = 90.0;
  int render_size = 64;
  double far_depth = 10.0;   // depth written where a ray escapes the scene
  double slip_kappa = 0.0;   // optional rotational slip, degrees per meter

  bool operator==(const SimParams&) const = default;
};

struct AgentState {
  Vec3 position;             // cell-centered, y = 0
  int azimuth_deg = 0;       // one of 0, 90, 180, 270
  int elevation_deg = 0;     // one of -30, 0, 30
  double camera_height = 1.0;

  bool operator==(const AgentState&) const = default;
};

struct ObjectInstance {
  int64_t id = 0;
  int category = 0;
  double width = 0, depth = 0, height = 0;  // local x, z, y extents in meters
  ObjectPose pose;                          // position is the footprint center, y = 0
  double mass_factor = 1.0;

  bool operator==(const ObjectInstance&) const = default;
};

struct WorldState {
  int cells_w = 0, cells_h = 0;
  std::vector<uint8_t> walls;  // row-major, index z * cells_w + x
  std::vector<ObjectInstance> objects;
  AgentState agent;
  Vec3 target;                 // floor point, y = 0
  int64_t step_count = 0;
  bool done = false;
  uint64_t seed = 0;
  std::string task_tag;
  SimParams params;
  std::vector<int64_t> visible_ids;  // stamped by observe()

  bool wall_at(int ix, int iz) const {
    if (ix < 0 || iz < 0 || ix >= cells_w || iz >= cells_h) return true;
    return walls[static_cast<size_t>(iz) * cells_w + ix] != 0;
  }
  void set_wall(int ix, int iz, bool on = true) {
    walls[static_cast<size_t>(iz) * cells_w + ix] = on ? 1 : 0;
  }

  double room_w() const { return cells_w * params.pitch; }
  double room_d() const { return cells_h * params.pitch; }

  Vec3 cell_center(int ix, int iz) const {
    return {(ix + 0.5) * params.pitch, 0.0, (iz + 0.5) * params.pitch};
  }
  std::pair<int, int> cell_of(const Vec3& p) const {
    auto clampi = [](int v, int hi) { return std::min(std::max(v, 0), hi - 1); };
    return {clampi(static_cast<int>(std::floor(p.x / params.pitch)), cells_w),
            clampi(static_cast<int>(std::floor(p.z / params.pitch)), cells_h)};
  }

  const ObjectInstance* find_object(int64_t id) const {
    for (const auto& o : objects)
      if (o.id == id) return &o;
    return nullptr;
  }
  ObjectInstance* find_object(int64_t id) {
    for (auto& o : objects)
      if (o.id == id) return &o;
    return nullptr;
  }
};

struct StepEvent {
  bool collision = false;     // motion or look was blocked / clamped
  int64_t pushed_object = -1; // id, or -1 when no object moved
  double displacement = 0.0;  // meters the pushed object travelled
  bool no_target = false;     // interaction with nothing visible
  bool path_opened = false;
  bool path_blocked = false;
  bool terminal = false;
};

// ----- Exact axes for the discrete azimuth --------------------------------------

// The agent's azimuth is always a multiple of 90 degrees; exact unit axes
// keep positions free of trigonometric noise.
inline Vec3 azimuth_axis(int azimuth_deg) {
  switch (((azimuth_deg % 360) + 360) % 360) {
    case 0: return {0, 0, 1};
    case 90: return {1, 0, 0};
    case 180: return {0, 0, -1};
    case 270: return {-1, 0, 0};
  }
  throw SimError("azimuth " + std::to_string(azimuth_deg) +
                 " is not a multiple of 90");
}

// ----- 2-D footprint geometry ----------------------------------------------------

// Convex quad in the floor plane, counterclockwise corners.
struct Quad {
  std::array<double, 4> xs, zs;

  static Quad from_aabb(double x0, double z0, double x1, double z1) {
    return {{x0, x1, x1, x0}, {z0, z0, z1, z1}};
  }
};

inline Quad object_footprint(const ObjectInstance& o) {
  const double c = std::cos(deg2rad(o.pose.yaw_deg));
  const double s = std::sin(deg2rad(o.pose.yaw_deg));
  const double hw = o.width / 2, hd = o.depth / 2;
  Quad q;
  const std::array<std::pair<double, double>, 4> local = {
      {{-hw, -hd}, {hw, -hd}, {hw, hd}, {-hw, hd}}};
  for (int i = 0; i < 4; ++i) {
    const auto [lx, lz] = local[static_cast<size_t>(i)];
    // rotation about +Y maps local +z toward +x for positive yaw
    q.xs[static_cast<size_t>(i)] = o.pose.position.x + lx * c + lz * s;
    q.zs[static_cast<size_t>(i)] = o.pose.position.z - lx * s + lz * c;
  }
  return q;
}

inline Quad cell_quad(const WorldState& w, int ix, int iz) {
  const double p = w.params.pitch;
  return Quad::from_aabb(ix * p, iz * p, (ix + 1) * p, (iz + 1) * p);
}

inline Quad agent_quad(const WorldState& w) {
  const double h = w.params.pitch / 2;
  const Vec3& p = w.agent.position;
  return Quad::from_aabb(p.x - h, p.z - h, p.x + h, p.z + h);
}

namespace detail {

struct Interval {
  double lo, hi;
};

inline Interval project_quad(const Quad& q, double nx, double nz) {
  double lo = q.xs[0] * nx + q.zs[0] * nz, hi = lo;
  for (int i = 1; i < 4; ++i) {
    const double v = q.xs[static_cast<size_t>(i)] * nx +
                     q.zs[static_cast<size_t>(i)] * nz;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return {lo, hi};
}

inline void collect_axes(const Quad& q, std::vector<std::pair<double, double>>& axes) {
  for (int i = 0; i < 4; ++i) {
    const int j = (i + 1) % 4;
    const double ex = q.xs[static_cast<size_t>(j)] - q.xs[static_cast<size_t>(i)];
    const double ez = q.zs[static_cast<size_t>(j)] - q.zs[static_cast<size_t>(i)];
    const double len = std::hypot(ex, ez);
    if (len == 0) continue;
    axes.emplace_back(-ez / len, ex / len);
  }
}

}  // namespace detail

// Strict-interior overlap test (touching edges do not count as overlap).
inline bool quads_overlap(const Quad& a, const Quad& b, double slack = 1e-9) {
  std::vector<std::pair<double, double>> axes;
  detail::collect_axes(a, axes);
  detail::collect_axes(b, axes);
  for (const auto& [nx, nz] : axes) {
    const auto ia = detail::project_quad(a, nx, nz);
    const auto ib = detail::project_quad(b, nx, nz);
    if (ia.hi <= ib.lo + slack || ib.hi <= ia.lo + slack) return false;
  }
  return true;
}

// Largest travel s in [0, want] before quad a, translating along the unit
// direction (dx, dz), first overlaps quad b. Returns want when no contact
// occurs within the interval.
inline double sweep_limit(const Quad& a, const Quad& b, double dx, double dz,
                          double want) {
  std::vector<std::pair<double, double>> axes;
  detail::collect_axes(a, axes);
  detail::collect_axes(b, axes);
  double enter = -std::numeric_limits<double>::infinity();
  double exit = std::numeric_limits<double>::infinity();
  for (const auto& [nx, nz] : axes) {
    const auto ia = detail::project_quad(a, nx, nz);
    const auto ib = detail::project_quad(b, nx, nz);
    const double v = dx * nx + dz * nz;
    if (v == 0.0) {
      if (ia.hi <= ib.lo || ib.hi <= ia.lo) return want;
      continue;
    }
    double s0 = (ib.lo - ia.hi) / v;
    double s1 = (ib.hi - ia.lo) / v;
    if (s0 > s1) std::swap(s0, s1);
    enter = std::max(enter, s0);
    exit = std::min(exit, s1);
  }
  if (enter >= exit || exit <= 0.0 || enter >= want) return want;
  return std::max(enter, 0.0);
}

// ----- Wall rectangles ------------------------------------------------------------

// Maximal wall rectangles (cell units), for fast raycasts and sweeps.
struct WallRect {
  int x0, z0, x1, z1;  // half-open cell range [x0,x1) x [z0,z1)
};

inline std::vector<WallRect> merge_wall_rects(const WorldState& w) {
  std::vector<WallRect> rects;
  std::vector<uint8_t> used(w.walls.size(), 0);
  for (int z = 0; z < w.cells_h; ++z)
    for (int x = 0; x < w.cells_w; ++x) {
      const size_t idx = static_cast<size_t>(z) * w.cells_w + x;
      if (!w.walls[idx] || used[idx]) continue;
      int x1 = x;
      while (x1 + 1 < w.cells_w && w.walls[idx + (x1 - x) + 1] &&
             !used[idx + (x1 - x) + 1])
        ++x1;
      int z1 = z;
      bool grow = true;
      while (grow && z1 + 1 < w.cells_h) {
        for (int xx = x; xx <= x1; ++xx) {
          const size_t j = static_cast<size_t>(z1 + 1) * w.cells_w + xx;
          if (!w.walls[j] || used[j]) {
            grow = false;
            break;
          }
        }
        if (grow) ++z1;
      }
      for (int zz = z; zz <= z1; ++zz)
        for (int xx = x; xx <= x1; ++xx)
          used[static_cast<size_t>(zz) * w.cells_w + xx] = 1;
      rects.push_back({x, z, x1 + 1, z1 + 1});
    }
  return rects;
}

inline Quad wall_rect_quad(const WorldState& w, const WallRect& r) {
  const double p = w.params.pitch;
  return Quad::from_aabb(r.x0 * p, r.z0 * p, r.x1 * p, r.z1 * p);
}

// ----- State validity ---------------------------------------------------------------

inline void validate_state(const WorldState& w) {
  if (w.cells_w <= 0 || w.cells_h <= 0 ||
      w.walls.size() != static_cast<size_t>(w.cells_w) * w.cells_h)
    throw SimError("wall grid does not match room dimensions");
  const int az = w.agent.azimuth_deg;
  if (az != 0 && az != 90 && az != 180 && az != 270)
    throw SimError("agent azimuth outside {0,90,180,270}");
  const int el = w.agent.elevation_deg;
  if (el != -30 && el != 0 && el != 30)
    throw SimError("agent elevation outside {-30,0,30}");
  const auto rects = merge_wall_rects(w);
  for (const auto& o : w.objects) {
    if (!(o.height > 0)) throw SimError("object height must be positive");
    if (o.mass_factor < 1.0) throw SimError("mass factor must be >= 1");
    const Quad q = object_footprint(o);
    for (int i = 0; i < 4; ++i)
      if (q.xs[static_cast<size_t>(i)] < 0 ||
          q.xs[static_cast<size_t>(i)] > w.room_w() ||
          q.zs[static_cast<size_t>(i)] < 0 ||
          q.zs[static_cast<size_t>(i)] > w.room_d())
        throw SimError("object footprint leaves the room");
    for (const auto& r : rects)
      if (quads_overlap(q, wall_rect_quad(w, r)))
        throw SimError("object footprint overlaps a wall");
  }
  for (size_t i = 0; i < w.objects.size(); ++i)
    for (size_t j = i + 1; j < w.objects.size(); ++j)
      if (quads_overlap(object_footprint(w.objects[i]),
                        object_footprint(w.objects[j])))
        throw SimError("object footprints overlap");
  const auto [ax, az_cell] = w.cell_of(w.agent.position);
  if (w.wall_at(ax, az_cell)) throw SimError("agent stands in a wall");
  const Quad aq = agent_quad(w);
  for (const auto& o : w.objects)
    if (quads_overlap(aq, object_footprint(o)))
      throw SimError("agent overlaps an object");
}

// ----- Geodesic distance -------------------------------------------------------------

struct Mover {
  enum Kind { kAgent, kObject, kWallsOnly } kind = kAgent;
  int64_t object_id = -1;

  static Mover agent() { return {kAgent, -1}; }
  static Mover object(int64_t id) { return {kObject, id}; }
  static Mover walls_only() { return {kWallsOnly, -1}; }
};

constexpr double kUnreachable = std::numeric_limits<double>::infinity();

namespace detail {

inline std::vector<uint8_t> blocked_grid(const WorldState& w, const Mover& mover) {
  std::vector<uint8_t> blocked(w.walls.begin(), w.walls.end());
  if (mover.kind == Mover::kWallsOnly) return blocked;

  if (mover.kind == Mover::kAgent) {
    for (const auto& o : w.objects) {
      const Quad q = object_footprint(o);
      const double xmin = *std::min_element(q.xs.begin(), q.xs.end());
      const double xmax = *std::max_element(q.xs.begin(), q.xs.end());
      const double zmin = *std::min_element(q.zs.begin(), q.zs.end());
      const double zmax = *std::max_element(q.zs.begin(), q.zs.end());
      const double p = w.params.pitch;
      const int ix0 = std::max(0, static_cast<int>(std::floor(xmin / p)));
      const int ix1 = std::min(w.cells_w - 1, static_cast<int>(std::floor(xmax / p)));
      const int iz0 = std::max(0, static_cast<int>(std::floor(zmin / p)));
      const int iz1 = std::min(w.cells_h - 1, static_cast<int>(std::floor(zmax / p)));
      for (int iz = iz0; iz <= iz1; ++iz)
        for (int ix = ix0; ix <= ix1; ++ix)
          if (quads_overlap(q, cell_quad(w, ix, iz)))
            blocked[static_cast<size_t>(iz) * w.cells_w + ix] = 1;
    }
    return blocked;
  }

  const ObjectInstance* obj = w.find_object(mover.object_id);
  if (!obj) throw SimError("geodesic mover references unknown object");
  const auto rects = merge_wall_rects(w);
  std::vector<Quad> wall_quads;
  for (const auto& r : rects) wall_quads.push_back(wall_rect_quad(w, r));
  for (int iz = 0; iz < w.cells_h; ++iz)
    for (int ix = 0; ix < w.cells_w; ++ix) {
      const size_t idx = static_cast<size_t>(iz) * w.cells_w + ix;
      if (blocked[idx]) continue;
      ObjectInstance probe = *obj;
      probe.pose.position = w.cell_center(ix, iz);
      const Quad q = object_footprint(probe);
      bool bad = false;
      for (int i = 0; i < 4 && !bad; ++i)
        bad = q.xs[static_cast<size_t>(i)] < 0 ||
              q.xs[static_cast<size_t>(i)] > w.room_w() ||
              q.zs[static_cast<size_t>(i)] < 0 ||
              q.zs[static_cast<size_t>(i)] > w.room_d();
      for (size_t r = 0; r < wall_quads.size() && !bad; ++r)
        bad = quads_overlap(q, wall_quads[r]);
      if (bad) blocked[idx] = 1;
    }
  return blocked;
}

}  // namespace detail

inline double geodesic_distance(const WorldState& w, const Vec3& from, const Vec3& to,
                                const Mover& mover = Mover::agent()) {
  const auto [sx, sz] = w.cell_of(from);
  const auto [tx, tz] = w.cell_of(to);
  const auto blocked = detail::blocked_grid(w, mover);
  auto idx = [&](int x, int z) { return static_cast<size_t>(z) * w.cells_w + x; };
  // The source cell is always searched from, even if something occupies it
  // (an agent standing next to a freshly pushed object must still path out).
  if (blocked[idx(tx, tz)]) return kUnreachable;
  std::vector<int32_t> dist(blocked.size(), -1);
  std::queue<std::pair<int, int>> q;
  dist[idx(sx, sz)] = 0;
  q.push({sx, sz});
  while (!q.empty()) {
    const auto [x, z] = q.front();
    q.pop();
    if (x == tx && z == tz)
      return dist[idx(x, z)] * w.params.pitch;
    const std::array<std::pair<int, int>, 4> nbrs = {
        {{x + 1, z}, {x - 1, z}, {x, z + 1}, {x, z - 1}}};
    for (const auto& [nx, nz] : nbrs) {
      if (nx < 0 || nz < 0 || nx >= w.cells_w || nz >= w.cells_h) continue;
      if (blocked[idx(nx, nz)] || dist[idx(nx, nz)] >= 0) continue;
      dist[idx(nx, nz)] = dist[idx(x, z)] + 1;
      q.push({nx, nz});
    }
  }
  return kUnreachable;
}

inline bool path_exists(const WorldState& w) {
  return geodesic_distance(w, w.agent.position, w.target, Mover::agent()) !=
         kUnreachable;
}

// ----- Step ---------------------------------------------------------------------------

namespace detail {

inline bool agent_cell_traversable(const WorldState& w, int ix, int iz) {
  if (w.wall_at(ix, iz)) return false;
  const double h = w.params.pitch / 2;
  const Vec3 c = w.cell_center(ix, iz);
  const Quad aq = Quad::from_aabb(c.x - h, c.z - h, c.x + h, c.z + h);
  for (const auto& o : w.objects)
    if (quads_overlap(aq, object_footprint(o))) return false;
  return true;
}

// Closest visible object by planar center distance, ties to the lower id.
inline const ObjectInstance* closest_visible_object(const WorldState& w) {
  const ObjectInstance* best = nullptr;
  double best_d = std::numeric_limits<double>::max();
  for (int64_t id : w.visible_ids) {
    const ObjectInstance* o = w.find_object(id);
    if (!o) continue;
    const double d = planar_distance(o->pose.position, w.agent.position);
    if (d < best_d || (d == best_d && best && o->id < best->id)) {
      best = o;
      best_d = d;
    }
  }
  return best;
}

constexpr double kMinMove = 1e-7;

inline double push_free_distance(const WorldState& w, const ObjectInstance& obj,
                                 double dx, double dz, double want) {
  const Quad moving = object_footprint(obj);
  double limit = want;
  for (const auto& r : merge_wall_rects(w))
    limit = std::min(limit, sweep_limit(moving, wall_rect_quad(w, r), dx, dz, limit));
  for (const auto& o : w.objects) {
    if (o.id == obj.id) continue;
    limit = std::min(limit, sweep_limit(moving, object_footprint(o), dx, dz, limit));
  }
  limit = std::min(limit, sweep_limit(moving, agent_quad(w), dx, dz, limit));
  // Perimeter walls normally bound the room; clamp against the room box too
  // so wall-free test scenes cannot push objects out of the world.
  const auto proj = [&](double s) {
    for (int i = 0; i < 4; ++i) {
      const double x = moving.xs[static_cast<size_t>(i)] + s * dx;
      const double z = moving.zs[static_cast<size_t>(i)] + s * dz;
      if (x < 0 || x > w.room_w() || z < 0 || z > w.room_d()) return false;
    }
    return true;
  };
  if (!proj(limit)) {
    double lo = 0, hi = limit;
    for (int it = 0; it < 60; ++it) {
      const double mid = (lo + hi) / 2;
      (proj(mid) ? lo : hi) = mid;
    }
    limit = lo;
  }
  return std::max(limit, 0.0);
}

}  // namespace detail

inline std::pair<WorldState, StepEvent> step(const WorldState& state, Action action) {
  const int ai = static_cast<int>(action);
  if (ai < 0 || ai >= kNumActions)
    throw SimError("unknown action index " + std::to_string(ai));
  if (state.done) throw SimError("step on a terminal episode");

  WorldState w = state;
  StepEvent ev;
  w.step_count += 1;

  switch (action) {
    case Action::kMoveAhead: {
      const Vec3 axis = azimuth_axis(w.agent.azimuth_deg);
      const Vec3 dest = w.agent.position + w.params.pitch * axis;
      const auto [ix, iz] = w.cell_of(dest);
      const Vec3 snapped = w.cell_center(ix, iz);
      if (planar_distance(dest, snapped) > 1e-6 ||
          !detail::agent_cell_traversable(w, ix, iz)) {
        ev.collision = true;
      } else {
        w.agent.position = snapped;
      }
      break;
    }
    case Action::kRotateRight:
      w.agent.azimuth_deg = (w.agent.azimuth_deg + 90) % 360;
      break;
    case Action::kRotateLeft:
      w.agent.azimuth_deg = (w.agent.azimuth_deg + 270) % 360;
      break;
    case Action::kLookUp:
      if (w.agent.elevation_deg >= 30) ev.collision = true;
      else w.agent.elevation_deg += 30;
      break;
    case Action::kLookDown:
      if (w.agent.elevation_deg <= -30) ev.collision = true;
      else w.agent.elevation_deg -= 30;
      break;
    case Action::kPush:
    case Action::kPull:
    case Action::kRightPush:
    case Action::kLeftPush: {
      const ObjectInstance* target = detail::closest_visible_object(w);
      if (!target) {
        ev.no_target = true;
        break;
      }
      Vec3 dir = azimuth_axis(w.agent.azimuth_deg);
      if (action == Action::kPull) dir = -dir;
      else if (action == Action::kRightPush)
        dir = azimuth_axis(w.agent.azimuth_deg + 90);
      else if (action == Action::kLeftPush)
        dir = azimuth_axis(w.agent.azimuth_deg + 270);

      const double want = w.params.base_displacement / target->mass_factor;
      const double moved =
          detail::push_free_distance(w, *target, dir.x, dir.z, want);
      ev.pushed_object = target->id;
      if (moved < detail::kMinMove) break;

      const bool before = path_exists(w);
      ObjectInstance* obj = w.find_object(target->id);
      obj->pose.position += moved * dir;
      ev.displacement = moved;

      if (w.params.slip_kappa != 0.0) {
        const Vec3 lateral{dir.z, 0, -dir.x};
        const double offset =
            (obj->pose.position - w.agent.position).dot(lateral);
        ObjectInstance turned = *obj;
        turned.pose.yaw_deg =
            normalize_deg(obj->pose.yaw_deg + w.params.slip_kappa * offset);
        WorldState probe = w;
        *probe.find_object(obj->id) = turned;
        bool ok = true;
        try {
          validate_state(probe);
        } catch (const SimError&) {
          ok = false;
        }
        if (ok) obj->pose.yaw_deg = turned.pose.yaw_deg;
      }

      const bool after = path_exists(w);
      ev.path_opened = !before && after;
      ev.path_blocked = before && !after;
      break;
    }
    case Action::kEnd:
      ev.terminal = true;
      w.done = true;
      break;
  }
  return {w, ev};
}

}  // namespace nie
