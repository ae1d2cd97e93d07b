#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <random>

#include "nie/render.hpp"
#include "nie/scene_io.hpp"
#include "nie/worldsim.hpp"

using Catch::Matchers::WithinAbs;
using namespace nie;

namespace {

ObjectInstance make_object(int64_t id, double w, double d, double h, double x,
                           double z, double yaw = 0.0, double mass = 1.0,
                           int category = 0) {
  ObjectInstance o;
  o.id = id;
  o.category = category;
  o.width = w;
  o.depth = d;
  o.height = h;
  o.pose.position = {x, 0, z};
  o.pose.yaw_deg = yaw;
  o.mass_factor = mass;
  return o;
}

// 12x12 cells = 3m x 3m room with a walled perimeter, agent at the center.
WorldState basic_room() {
  WorldState w = make_empty_room(12, 12);
  w.agent.position = w.cell_center(6, 6);
  w.target = w.cell_center(6, 6);
  return w;
}

// Iterative-relaxation shortest path, independent of the BFS implementation.
double relaxation_oracle(const WorldState& w, const std::vector<uint8_t>& blocked,
                         int sx, int sz, int tx, int tz) {
  const int W = w.cells_w, H = w.cells_h;
  const int kInf = 1 << 28;
  std::vector<int> dist(static_cast<size_t>(W) * H, kInf);
  if (blocked[static_cast<size_t>(tz) * W + tx]) return kUnreachable;
  dist[static_cast<size_t>(sz) * W + sx] = 0;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int z = 0; z < H; ++z)
      for (int x = 0; x < W; ++x) {
        const size_t i = static_cast<size_t>(z) * W + x;
        if (blocked[i] && !(x == sx && z == sz)) continue;
        int best = dist[i];
        if (x > 0) best = std::min(best, dist[i - 1] + 1);
        if (x + 1 < W) best = std::min(best, dist[i + 1] + 1);
        if (z > 0) best = std::min(best, dist[i - W] + 1);
        if (z + 1 < H) best = std::min(best, dist[i + W] + 1);
        if (best < dist[i]) {
          dist[i] = best;
          changed = true;
        }
      }
  }
  const int d = dist[static_cast<size_t>(tz) * W + tx];
  return d >= kInf ? kUnreachable : d * w.params.pitch;
}

// Micro-stepped sweep: advance in 0.5 mm increments until static overlap.
double sampling_sweep_oracle(const WorldState& w, int64_t id, double dx, double dz,
                             double want) {
  const double step = 5e-4;
  const ObjectInstance* obj = w.find_object(id);
  const auto rects = merge_wall_rects(w);
  for (double s = step; s <= want + step / 2; s += step) {
    ObjectInstance probe = *obj;
    probe.pose.position.x += s * dx;
    probe.pose.position.z += s * dz;
    const Quad q = object_footprint(probe);
    bool hit = false;
    for (const auto& r : rects)
      if (quads_overlap(q, wall_rect_quad(w, r))) hit = true;
    for (const auto& other : w.objects)
      if (other.id != id && quads_overlap(q, object_footprint(other))) hit = true;
    if (quads_overlap(q, agent_quad(w))) hit = true;
    if (hit) return s - step;
  }
  return want;
}

}  // namespace

TEST_CASE("state validation") {
  WorldState w = basic_room();
  REQUIRE_NOTHROW(validate_state(w));

  SECTION("overlapping objects rejected") {
    w.objects.push_back(make_object(0, 0.5, 0.5, 0.5, 1.0, 1.0));
    w.objects.push_back(make_object(1, 0.5, 0.5, 0.5, 1.3, 1.0));
    REQUIRE_THROWS_AS(validate_state(w), SimError);
  }
  SECTION("touching objects allowed") {
    w.objects.push_back(make_object(0, 0.5, 0.5, 0.5, 1.0, 1.0));
    w.objects.push_back(make_object(1, 0.5, 0.5, 0.5, 1.5, 1.0));
    REQUIRE_NOTHROW(validate_state(w));
  }
  SECTION("object in a wall rejected") {
    w.objects.push_back(make_object(0, 0.5, 0.5, 0.5, 0.2, 1.5));
    REQUIRE_THROWS_AS(validate_state(w), SimError);
  }
  SECTION("agent inside an object rejected") {
    w.objects.push_back(
        make_object(0, 0.5, 0.5, 0.5, w.agent.position.x, w.agent.position.z));
    REQUIRE_THROWS_AS(validate_state(w), SimError);
  }
  SECTION("bad mass factor and azimuth rejected") {
    w.objects.push_back(make_object(0, 0.5, 0.5, 0.5, 1.0, 1.0));
    w.objects.back().mass_factor = 0.5;
    REQUIRE_THROWS_AS(validate_state(w), SimError);
    w.objects.back().mass_factor = 1.0;
    w.agent.azimuth_deg = 45;
    REQUIRE_THROWS_AS(validate_state(w), SimError);
  }
}

TEST_CASE("movement and turning") {
  WorldState w = basic_room();

  SECTION("move ahead lands exactly on the next cell center") {
    w.agent.azimuth_deg = 90;
    auto [w2, ev] = step(w, Action::kMoveAhead);
    REQUIRE_FALSE(ev.collision);
    REQUIRE(w2.agent.position == w.cell_center(7, 6));
    REQUIRE(w2.step_count == 1);
  }
  SECTION("blocked by a wall") {
    w.agent.position = w.cell_center(6, 10);
    w.agent.azimuth_deg = 0;
    auto [w2, ev] = step(w, Action::kMoveAhead);
    REQUIRE(ev.collision);
    REQUIRE(w2.agent.position == w.agent.position);
  }
  SECTION("blocked by an object") {
    w.objects.push_back(make_object(0, 0.5, 0.5, 0.5, 1.625, 2.125));
    w.agent.azimuth_deg = 0;
    auto [w2, ev] = step(w, Action::kMoveAhead);
    REQUIRE(ev.collision);
    REQUIRE(w2.agent.position == w.agent.position);
    REQUIRE(w2.objects[0] == w.objects[0]);
  }
  SECTION("rotation cycles the four azimuths") {
    auto [w1, e1] = step(w, Action::kRotateRight);
    REQUIRE(w1.agent.azimuth_deg == 90);
    auto [w2, e2] = step(w1, Action::kRotateRight);
    REQUIRE(w2.agent.azimuth_deg == 180);
    auto [w3, e3] = step(w2, Action::kRotateLeft);
    REQUIRE(w3.agent.azimuth_deg == 90);
    WorldState t = w;
    for (int i = 0; i < 4; ++i) t = step(t, Action::kRotateLeft).first;
    REQUIRE(t.agent.azimuth_deg == w.agent.azimuth_deg);
  }
  SECTION("elevation clamps at the extremes") {
    auto [w1, e1] = step(w, Action::kLookUp);
    REQUIRE(w1.agent.elevation_deg == 30);
    REQUIRE_FALSE(e1.collision);
    auto [w2, e2] = step(w1, Action::kLookUp);
    REQUIRE(w2.agent.elevation_deg == 30);
    REQUIRE(e2.collision);
    WorldState t = w;
    t.agent.elevation_deg = -30;
    auto [w3, e3] = step(t, Action::kLookDown);
    REQUIRE(e3.collision);
    REQUIRE(w3.agent.elevation_deg == -30);
  }
  SECTION("end is terminal and stepping past it errors") {
    auto [w1, ev] = step(w, Action::kEnd);
    REQUIRE(ev.terminal);
    REQUIRE(w1.done);
    REQUIRE_THROWS_AS(step(w1, Action::kMoveAhead), SimError);
  }
  SECTION("unknown action errors") {
    REQUIRE_THROWS_AS(step(w, static_cast<Action>(17)), SimError);
  }
}

TEST_CASE("push displacement model") {
  WorldState w = basic_room();
  w.agent.azimuth_deg = 0;  // facing +Z

  SECTION("full displacement with clearance") {
    // object ahead of the agent, rear wall face at z=2.75, far beyond reach
    w.objects.push_back(make_object(0, 0.5, 0.5, 0.5, 1.625, 2.0));
    observe(w);
    REQUIRE(w.visible_ids == std::vector<int64_t>{0});
    auto [w2, ev] = step(w, Action::kPush);
    REQUIRE(ev.pushed_object == 0);
    REQUIRE(ev.displacement == 0.5);
    REQUIRE(w2.objects[0].pose.position.z == 2.5);
    REQUIRE(w2.objects[0].pose.position.x == 1.625);
    REQUIRE_NOTHROW(validate_state(w2));
    const double oracle = sampling_sweep_oracle(w, 0, 0, 1, 0.5);
    REQUIRE_THAT(ev.displacement, WithinAbs(oracle, 2e-3));
  }
  SECTION("mass factor scales displacement") {
    w.objects.push_back(make_object(0, 0.5, 0.5, 0.5, 1.625, 2.0, 0.0, 2.0));
    observe(w);
    auto [w2, ev] = step(w, Action::kPush);
    REQUIRE(ev.displacement == 0.25);
  }
  SECTION("flush against a wall gives zero displacement") {
    w.objects.push_back(make_object(0, 0.5, 0.5, 0.5, 1.625, 2.5));
    observe(w);
    auto [w2, ev] = step(w, Action::kPush);
    REQUIRE(ev.pushed_object == 0);
    REQUIRE(ev.displacement == 0.0);
    REQUIRE(w2.objects[0] == w.objects[0]);
  }
  SECTION("stops exactly at a wall part-way") {
    // rear face at 2.45, wall face at 2.75: free distance 0.3
    w.objects.push_back(make_object(0, 0.5, 0.5, 0.5, 1.625, 2.2));
    observe(w);
    auto [w2, ev] = step(w, Action::kPush);
    REQUIRE_THAT(ev.displacement, WithinAbs(0.3, 1e-12));
    REQUIRE_THAT(w2.objects[0].pose.position.z, WithinAbs(2.5, 1e-12));
    REQUIRE_NOTHROW(validate_state(w2));
    const double oracle = sampling_sweep_oracle(w, 0, 0, 1, 0.5);
    REQUIRE_THAT(ev.displacement, WithinAbs(oracle, 2e-3));
  }
  SECTION("stops at another object") {
    w.objects.push_back(make_object(0, 0.5, 0.5, 0.5, 1.625, 2.0));
    w.objects.push_back(make_object(1, 0.4, 0.4, 0.5, 1.625, 2.55));
    observe(w);
    auto [w2, ev] = step(w, Action::kPush);
    REQUIRE(ev.pushed_object == 0);  // closer of the two
    REQUIRE_THAT(ev.displacement, WithinAbs(0.1, 1e-12));
    REQUIRE_NOTHROW(validate_state(w2));
    const double oracle = sampling_sweep_oracle(w, 0, 0, 1, 0.5);
    REQUIRE_THAT(ev.displacement, WithinAbs(oracle, 2e-3));
  }
  SECTION("pull stops at the agent") {
    w.objects.push_back(make_object(0, 0.5, 0.5, 0.5, 1.625, 2.125));
    observe(w);
    auto [w2, ev] = step(w, Action::kPull);
    // object near face at 1.875, agent quad far face at 1.75
    REQUIRE_THAT(ev.displacement, WithinAbs(0.125, 1e-12));
    REQUIRE_NOTHROW(validate_state(w2));
  }
  SECTION("rotated object sweeps correctly") {
    w.objects.push_back(make_object(0, 0.5, 0.3, 0.5, 1.625, 2.05, 30.0));
    observe(w);
    auto [w2, ev] = step(w, Action::kPush);
    REQUIRE_NOTHROW(validate_state(w2));
    const double oracle = sampling_sweep_oracle(w, 0, 0, 1, 0.5);
    REQUIRE_THAT(ev.displacement, WithinAbs(oracle, 2e-3));
  }
  SECTION("side pushes move along the agent lateral axis") {
    w.objects.push_back(make_object(0, 0.5, 0.5, 0.5, 1.625, 2.0));
    observe(w);
    auto [wr, er] = step(w, Action::kRightPush);
    REQUIRE(wr.objects[0].pose.position.x == 1.625 + 0.5);
    REQUIRE(wr.objects[0].pose.position.z == 2.0);
    auto [wl, el] = step(w, Action::kLeftPush);
    REQUIRE(wl.objects[0].pose.position.x == 1.625 - 0.5);
  }
  SECTION("no visible object is a no-op with a no-target event") {
    w.objects.push_back(make_object(0, 0.5, 0.5, 0.5, 1.625, 2.0));
    w.visible_ids.clear();
    auto [w2, ev] = step(w, Action::kPush);
    REQUIRE(ev.no_target);
    REQUIRE(ev.pushed_object == -1);
    REQUIRE(w2.objects[0] == w.objects[0]);
  }
  SECTION("closest visible object wins, ties to the lower id") {
    w.objects.push_back(make_object(7, 0.4, 0.4, 0.5, 1.125, 2.125));
    w.objects.push_back(make_object(3, 0.4, 0.4, 0.5, 2.375, 2.125));
    w.visible_ids = {3, 7};
    auto [w2, ev] = step(w, Action::kPush);
    REQUIRE(ev.pushed_object == 7);  // strictly closer despite the higher id
    w.objects[1].pose.position.x = 2.125;  // now symmetric about the agent
    auto [w3, ev3] = step(w, Action::kPush);
    REQUIRE(ev3.pushed_object == 3);  // exact tie broken toward the lower id
  }
}

TEST_CASE("step determinism is bitwise") {
  WorldState w = basic_room();
  w.agent.azimuth_deg = 0;
  w.objects.push_back(make_object(0, 0.5, 0.5, 0.5, 1.7, 2.0, 17.0, 1.5));
  observe(w);
  auto [a, ea] = step(w, Action::kPush);
  auto [b, eb] = step(w, Action::kPush);
  REQUIRE(a.objects[0] == b.objects[0]);
  REQUIRE(a.agent == b.agent);
  REQUIRE(scene_to_json(a).dump() == scene_to_json(b).dump());
}

TEST_CASE("action class separation and invariant preservation") {
  WorldState w = basic_room();
  w.objects.push_back(make_object(0, 0.5, 0.5, 0.5, 1.0, 1.0, 20.0, 1.0));
  w.objects.push_back(make_object(1, 0.4, 0.6, 0.7, 2.2, 2.2, 0.0, 2.0));
  std::mt19937_64 rng(71);
  std::uniform_int_distribution<int> pick(0, 8);  // everything except End
  for (int it = 0; it < 400; ++it) {
    observe(w);
    const Action a = static_cast<Action>(pick(rng));
    auto [w2, ev] = step(w, a);
    if (is_interaction(a)) {
      REQUIRE(w2.agent == w.agent);
    } else {
      for (size_t i = 0; i < w.objects.size(); ++i)
        REQUIRE(w2.objects[i] == w.objects[i]);
    }
    REQUIRE_NOTHROW(validate_state(w2));
    REQUIRE_FALSE((ev.path_opened && ev.path_blocked));
    w = w2;
  }
}

TEST_CASE("geodesic distances") {
  SECTION("straight corridor of 10 cells") {
    WorldState w = make_empty_room(14, 5);
    const Vec3 from = w.cell_center(2, 2);
    const Vec3 to = w.cell_center(12, 2);
    REQUIRE(geodesic_distance(w, from, to) == 2.5);
  }
  SECTION("enclosed target is unreachable") {
    WorldState w = basic_room();
    for (int ix = 4; ix <= 8; ++ix) {
      w.set_wall(ix, 4);
      w.set_wall(ix, 8);
    }
    for (int iz = 4; iz <= 8; ++iz) {
      w.set_wall(4, iz);
      w.set_wall(8, iz);
    }
    w.agent.position = w.cell_center(2, 2);
    REQUIRE(geodesic_distance(w, w.agent.position, w.cell_center(6, 6)) ==
            kUnreachable);
  }
  SECTION("L-shaped path matches the relaxation oracle") {
    WorldState w = basic_room();
    for (int iz = 1; iz <= 8; ++iz) w.set_wall(6, iz);
    const Vec3 from = w.cell_center(3, 3);
    const Vec3 to = w.cell_center(9, 3);
    const double got = geodesic_distance(w, from, to);
    const double want =
        relaxation_oracle(w, detail::blocked_grid(w, Mover::walls_only()), 3, 3, 9, 3);
    REQUIRE(got == want);
    REQUIRE(got > 1.5);  // forced detour, strictly longer than the straight line
  }
  SECTION("random gridworlds match the oracle for agent and walls-only movers") {
    std::mt19937_64 rng(73);
    for (int trial = 0; trial < 25; ++trial) {
      WorldState w = make_empty_room(10, 10);
      std::uniform_int_distribution<int> cell(1, 8);
      std::bernoulli_distribution coin(0.25);
      for (int iz = 1; iz < 9; ++iz)
        for (int ix = 1; ix < 9; ++ix)
          if (coin(rng)) w.set_wall(ix, iz);
      if (coin(rng))
        w.objects.push_back(make_object(0, 0.4, 0.4, 0.5,
                                        w.cell_center(cell(rng), cell(rng)).x,
                                        w.cell_center(cell(rng), cell(rng)).z));
      const int sx = cell(rng), sz = cell(rng), tx = cell(rng), tz = cell(rng);
      if (w.wall_at(sx, sz)) continue;
      for (auto mover : {Mover::agent(), Mover::walls_only()}) {
        const auto blocked = detail::blocked_grid(w, mover);
        if (blocked[static_cast<size_t>(sz) * w.cells_w + sx]) continue;
        const double got =
            geodesic_distance(w, w.cell_center(sx, sz), w.cell_center(tx, tz), mover);
        const double want = relaxation_oracle(w, blocked, sx, sz, tx, tz);
        REQUIRE(got == want);
      }
    }
  }
  SECTION("object mover respects the footprint width") {
    WorldState w = basic_room();
    // one-cell doorway in a full wall column: a slim object squeezes through,
    // a wide one cannot
    for (int iz = 1; iz < 11; ++iz)
      if (iz != 6) w.set_wall(6, iz);
    w.objects.push_back(make_object(0, 0.2, 0.2, 0.5, 1.125, 1.625));
    w.objects.push_back(make_object(1, 0.45, 0.45, 0.5, 1.125, 0.625));
    const Vec3 to = w.cell_center(9, 6);
    REQUIRE(geodesic_distance(w, w.objects[0].pose.position, to,
                              Mover::object(0)) != kUnreachable);
    REQUIRE(geodesic_distance(w, w.objects[1].pose.position, to,
                              Mover::object(1)) == kUnreachable);
    REQUIRE_THROWS_AS(geodesic_distance(w, to, to, Mover::object(99)), SimError);
  }
}

TEST_CASE("path events on pushes") {
  WorldState w = basic_room();
  // wall column at ix=6 with a three-cell doorway, sealed by a tall thin slab
  for (int iz = 1; iz < 11; ++iz)
    if (iz < 5 || iz > 7) w.set_wall(6, iz);
  w.objects.push_back(make_object(0, 0.25, 0.75, 1.2, 1.675, 1.625));
  w.agent.position = w.cell_center(4, 6);
  w.agent.azimuth_deg = 90;
  w.target = w.cell_center(10, 6);
  REQUIRE_NOTHROW(validate_state(w));
  REQUIRE_FALSE(path_exists(w));

  observe(w);
  auto [w2, ev] = step(w, Action::kPush);
  REQUIRE(ev.pushed_object == 0);
  REQUIRE(ev.displacement == 0.5);
  REQUIRE(path_exists(w2));
  REQUIRE(ev.path_opened);
  REQUIRE_FALSE(ev.path_blocked);

  // pulling it back into the doorway blocks the path again
  observe(w2);
  auto [w3, ev3] = step(w2, Action::kPull);
  REQUIRE(ev3.displacement == 0.5);
  REQUIRE(ev3.path_blocked);
  REQUIRE_FALSE(ev3.path_opened);
  REQUIRE_FALSE(path_exists(w3));
}

TEST_CASE("rendering") {
  SECTION("perpendicular wall depth is planar") {
    WorldState w = basic_room();
    w.agent.position = {1.5, 0, 1.5};
    w.agent.azimuth_deg = 0;
    // interior wall row 1.0 m ahead of the eye
    for (int ix = 1; ix < 11; ++ix) w.set_wall(ix, 10);
    Observation obs = render(w);
    const CameraModel cam = agent_camera(w);
    int wall_pixels = 0;
    for (int v = 0; v < obs.height; ++v)
      for (int u = 0; u < obs.width; ++u) {
        const size_t i = static_cast<size_t>(v) * obs.width + u;
        if (obs.instance[i] != kSegWall) continue;
        ++wall_pixels;
        REQUIRE_THAT(obs.depth[static_cast<int64_t>(i)], WithinAbs(1.0, 1e-6));
        // euclidean ray length relates to planar depth by the ray angle
        const double px = (u - cam.cx) / cam.f, py = -(v - cam.cy) / cam.f;
        const double ray_len = std::sqrt(1 + px * px + py * py);
        const double cos_theta = 1.0 / ray_len;
        REQUIRE_THAT(obs.depth[static_cast<int64_t>(i)] * ray_len,
                     WithinAbs(1.0 / cos_theta, 1e-6));
      }
    REQUIRE(wall_pixels > obs.width * obs.height / 4);
  }

  SECTION("depth matches an analytic face-intersection oracle") {
    WorldState w;
    w.cells_w = 12;
    w.cells_h = 12;
    w.walls.assign(144, 0);
    w.set_wall(8, 8);
    w.set_wall(9, 8);
    w.objects.push_back(make_object(0, 0.5, 0.3, 0.6, 1.2, 2.0, 25.0));
    w.agent.position = {1.5, 0, 1.0};

    for (int az : {0, 90, 180, 270}) {
      for (int el : {-30, 0, 30}) {
        w.agent.azimuth_deg = az;
        w.agent.elevation_deg = el;
        Observation obs = render(w);
        const CameraModel cam = agent_camera(w);
        const CameraBasis basis = camera_basis(az, el);

        // face-rectangle oracle: intersect each bounding plane and keep hits
        // inside the face bounds
        auto face_hits = [&](Vec3 o, Vec3 d, Vec3 lo, Vec3 hi) {
          double best = std::numeric_limits<double>::infinity();
          auto try_face = [&](int axis, double plane) {
            const double dv = axis == 0 ? d.x : (axis == 1 ? d.y : d.z);
            const double ov = axis == 0 ? o.x : (axis == 1 ? o.y : o.z);
            if (dv == 0) return;
            const double t = (plane - ov) / dv;
            if (t <= 1e-9 || t >= best) return;
            const Vec3 p = o + t * d;
            const bool inside =
                (axis == 0 || (p.x >= lo.x - 1e-12 && p.x <= hi.x + 1e-12)) &&
                (axis == 1 || (p.y >= lo.y - 1e-12 && p.y <= hi.y + 1e-12)) &&
                (axis == 2 || (p.z >= lo.z - 1e-12 && p.z <= hi.z + 1e-12));
            if (inside) best = t;
          };
          try_face(0, lo.x);
          try_face(0, hi.x);
          try_face(1, lo.y);
          try_face(1, hi.y);
          try_face(2, lo.z);
          try_face(2, hi.z);
          return best;
        };

        const Vec3 origin = w.agent.position + Vec3{0, w.agent.camera_height, 0};
        const double c = std::cos(deg2rad(25.0)), s = std::sin(deg2rad(25.0));
        for (int v = 0; v < obs.height; ++v)
          for (int u = 0; u < obs.width; ++u) {
            const double px = (u - cam.cx) / cam.f, py = -(v - cam.cy) / cam.f;
            const Vec3 d = basis.right * px + basis.up * py + basis.forward;
            double best = w.params.far_depth;
            if (d.y < 0) {
              const double t = -origin.y / d.y;
              const double hx = origin.x + t * d.x, hz = origin.z + t * d.z;
              if (t < best && hx >= 0 && hx <= 3.0 && hz >= 0 && hz <= 3.0)
                best = t;
            }
            best = std::min(best, face_hits(origin, d, {2.0, 0, 2.0},
                                            {2.5, w.params.wall_height, 2.25}));
            // object box, tested in its local frame
            const Vec3 rel = origin - w.objects[0].pose.position;
            const Vec3 lo{rel.x * c - rel.z * s, rel.y, rel.x * s + rel.z * c};
            const Vec3 ld{d.x * c - d.z * s, d.y, d.x * s + d.z * c};
            best = std::min(
                best, face_hits(lo, ld, {-0.25, 0, -0.15}, {0.25, 0.6, 0.15}));
            best = std::min(best, w.params.far_depth);

            const size_t i = static_cast<size_t>(v) * obs.width + u;
            REQUIRE_THAT(obs.depth[static_cast<int64_t>(i)], WithinAbs(best, 1e-6));
          }
      }
    }
  }

  SECTION("occluded object has no pixels") {
    WorldState w = basic_room();
    w.agent.position = w.cell_center(6, 2);
    w.agent.azimuth_deg = 0;
    w.objects.push_back(make_object(0, 1.0, 0.4, 1.0, 1.625, 1.5));
    w.objects.push_back(make_object(1, 0.3, 0.3, 0.4, 1.625, 2.2));
    Observation obs = render(w);
    int near_pixels = 0;
    for (int32_t id : obs.instance) {
      REQUIRE(id != 1);
      if (id == 0) ++near_pixels;
    }
    REQUIRE(near_pixels > 0);
    REQUIRE(visible_object_ids(obs) == std::vector<int64_t>{0});
  }

  SECTION("looking up over the walls sees background") {
    WorldState w = basic_room();
    w.agent.elevation_deg = 30;
    Observation obs = render(w);
    const size_t top = 0;
    REQUIRE(obs.instance[top] == kSegNone);
    REQUIRE(obs.depth[0] == static_cast<float>(w.params.far_depth));
    const Rgb bg = category_color(kSegNone);
    REQUIRE(obs.color[0] == bg.r);
  }

  SECTION("floor and wall ids are the reserved values") {
    WorldState w = basic_room();
    w.agent.elevation_deg = -30;
    Observation obs = render(w);
    bool saw_floor = false, saw_wall = false;
    for (int32_t id : obs.instance) {
      saw_floor = saw_floor || id == kSegFloor;
      saw_wall = saw_wall || id == kSegWall;
    }
    REQUIRE(saw_floor);
    REQUIRE(saw_wall);
  }
}

TEST_CASE("scene serialization") {
  WorldState w = basic_room();
  w.task_tag = "obsnav";
  w.seed = 12345;
  w.objects.push_back(make_object(0, 0.5, 0.4, 0.6, 1.1, 2.0, 33.25, 2.5, 4));
  w.objects.push_back(make_object(1, 0.3, 0.3, 0.3, 2.2, 0.9, 0.0, 1.0, 2));
  w.agent.azimuth_deg = 270;
  w.agent.elevation_deg = -30;
  w.target = {0.6, 0, 2.8};

  SECTION("round trip preserves everything") {
    const Json j = scene_to_json(w);
    WorldState r = scene_from_json(j);
    REQUIRE(r.cells_w == w.cells_w);
    REQUIRE(r.walls == w.walls);
    REQUIRE(r.objects == w.objects);
    REQUIRE(r.agent == w.agent);
    REQUIRE(r.target == w.target);
    REQUIRE(r.task_tag == w.task_tag);
    REQUIRE(r.seed == w.seed);
    REQUIRE(r.params == w.params);
    REQUIRE(scene_to_json(r).dump() == j.dump());
  }
  SECTION("bad version rejected") {
    Json j = scene_to_json(w);
    j["version"] = 99;
    REQUIRE_THROWS_AS(scene_from_json(j), SimError);
  }
  SECTION("invariant-violating document rejected") {
    Json j = scene_to_json(w);
    j["objects"][0]["position"][0] = -5.0;
    REQUIRE_THROWS_AS(scene_from_json(j), SimError);
  }
  SECTION("file round trip") {
    save_scene(w, "scene_test.json");
    WorldState r = load_scene("scene_test.json");
    REQUIRE(r.objects == w.objects);
    std::remove("scene_test.json");
  }
}
