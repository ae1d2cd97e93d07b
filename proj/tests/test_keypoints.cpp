#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "nie/keypoints.hpp"
#include "nie/scene_io.hpp"

using Catch::Matchers::WithinAbs;
using namespace nie;

namespace {

// Exhaustive oracle with an explicit lexicographic tie rule, independent of
// pixel enumeration order.
std::array<Corner, 8> oracle_corners(const Mask& m) {
  std::vector<Corner> px;
  for (int v = 0; v < m.height; ++v)
    for (int u = 0; u < m.width; ++u)
      if (m.at(u, v)) px.push_back({u, v});
  REQUIRE(!px.empty());

  auto argbest = [&](auto value, bool want_max) {
    Corner best = px[0];
    for (const Corner& c : px) {
      const int64_t s = value(c), sb = value(best);
      const bool better = want_max ? s > sb : s < sb;
      const bool tie = s == sb && (c.v < best.v || (c.v == best.v && c.u < best.u));
      if (better || tie) best = c;
    }
    return best;
  };
  auto x = [](const Corner& c) { return int64_t{c.u}; };
  auto y = [](const Corner& c) { return int64_t{c.v}; };
  auto sum = [](const Corner& c) { return int64_t{c.u} + c.v; };
  auto dif = [](const Corner& c) { return int64_t{c.u} - c.v; };
  return {argbest(x, true),   argbest(y, true),  argbest(x, false),
          argbest(y, false),  argbest(sum, true), argbest(sum, false),
          argbest(dif, true), argbest(dif, false)};
}

Mask make_mask(int w, int h) {
  Mask m;
  m.width = w;
  m.height = h;
  m.member.assign(static_cast<size_t>(w) * h, 0);
  return m;
}

void set_px(Mask& m, int u, int v) {
  m.member[static_cast<size_t>(v) * m.width + u] = 1;
}

Mask random_blob(std::mt19937_64& rng, int size) {
  Mask m = make_mask(size, size);
  std::uniform_int_distribution<int> coord(0, size - 1);
  std::uniform_int_distribution<int> kind(0, 2);
  const int shapes = std::uniform_int_distribution<int>(1, 3)(rng);
  for (int s = 0; s < shapes; ++s) {
    const int k = kind(rng);
    if (k == 0) {
      int x0 = coord(rng), x1 = coord(rng), y0 = coord(rng), y1 = coord(rng);
      if (x0 > x1) std::swap(x0, x1);
      if (y0 > y1) std::swap(y0, y1);
      for (int v = y0; v <= y1; ++v)
        for (int u = x0; u <= x1; ++u) set_px(m, u, v);
    } else if (k == 1) {
      const int cx = coord(rng), cy = coord(rng);
      const int r = std::uniform_int_distribution<int>(1, size / 3)(rng);
      for (int v = 0; v < size; ++v)
        for (int u = 0; u < size; ++u)
          if ((u - cx) * (u - cx) + (v - cy) * (v - cy) <= r * r) set_px(m, u, v);
    } else {
      const int n = std::uniform_int_distribution<int>(1, 20)(rng);
      for (int i = 0; i < n; ++i) set_px(m, coord(rng), coord(rng));
    }
  }
  if (m.count() == 0) set_px(m, coord(rng), coord(rng));
  return m;
}

Observation blank_observation(int size, float depth) {
  Observation obs;
  obs.width = size;
  obs.height = size;
  obs.depth = Tensor<float>({size, size}, depth);
  obs.color = Tensor<float>({3, size, size});
  obs.instance.assign(static_cast<size_t>(size) * size, kSegNone);
  obs.category.assign(static_cast<size_t>(size) * size, kSegNone);
  return obs;
}

void stamp(Observation& obs, int u, int v, int32_t instance, int32_t category) {
  const size_t i = static_cast<size_t>(v) * obs.width + u;
  obs.instance[i] = instance;
  obs.category[i] = category;
}

// Signed distance to the surface of an upright box (y in [0, height]).
double box_sdf(const ObjectInstance& o, const Vec3& p_world) {
  const Vec3 l = o.pose.to_affine().rigid_inverse().transform_point(p_world);
  const double qx = std::abs(l.x) - o.width / 2;
  const double qy = std::abs(l.y - o.height / 2) - o.height / 2;
  const double qz = std::abs(l.z) - o.depth / 2;
  const double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0),
               oz = std::max(qz, 0.0);
  return std::sqrt(ox * ox + oy * oy + oz * oz) +
         std::min(std::max({qx, qy, qz}), 0.0);
}

}  // namespace

TEST_CASE("corner detection") {
  SECTION("singleton mask repeats the pixel in all slots") {
    Mask m = make_mask(16, 16);
    set_px(m, 5, 7);
    const auto c = detect_corners(m);
    for (const auto& p : c) REQUIRE(p == Corner{5, 7});
  }
  SECTION("filled rectangle hits the documented extrema") {
    Mask m = make_mask(8, 8);
    for (int v = 1; v <= 3; ++v)
      for (int u = 2; u <= 4; ++u) set_px(m, u, v);
    const auto c = detect_corners(m);
    REQUIRE(c[0] == Corner{4, 1});
    REQUIRE(c[1] == Corner{2, 3});
    REQUIRE(c[2] == Corner{2, 1});
    REQUIRE(c[3] == Corner{2, 1});
    REQUIRE(c[4] == Corner{4, 3});
    REQUIRE(c[5] == Corner{2, 1});
    REQUIRE(c[6] == Corner{4, 1});
    REQUIRE(c[7] == Corner{2, 3});
    REQUIRE(c == oracle_corners(m));
  }
  SECTION("random blobs match the exhaustive oracle exactly") {
    std::mt19937_64 rng(97);
    for (int trial = 0; trial < 1000; ++trial) {
      const Mask m = random_blob(rng, 32);
      const auto got = detect_corners(m);
      const auto want = oracle_corners(m);
      for (int k = 0; k < 8; ++k) {
        REQUIRE(got[static_cast<size_t>(k)] == want[static_cast<size_t>(k)]);
        REQUIRE(m.at(got[static_cast<size_t>(k)].u, got[static_cast<size_t>(k)].v));
      }
    }
  }
  SECTION("empty mask is an error") {
    REQUIRE_THROWS_AS(detect_corners(make_mask(4, 4)), KeypointError);
  }
}

TEST_CASE("lifting to camera-frame keypoints") {
  SECTION("no objects means no presence") {
    const Observation obs = blank_observation(64, 5.f);
    const CameraModel cam = make_camera(64, 90.0, {0, 1, 0}, 0, 0);
    const KeypointSet k = lift_keypoints(obs, cam, 3);
    REQUIRE(k.num_categories == 3);
    for (int c = 0; c < 3; ++c) {
      REQUIRE_FALSE(k.present[static_cast<size_t>(c)]);
      for (const Vec3& p : k.points[static_cast<size_t>(c)])
        REQUIRE(p == Vec3{0, 0, 0});
    }
  }
  SECTION("pixel at the principal point lifts to the optical axis") {
    // odd image size puts the principal point on an integer pixel
    Observation obs = blank_observation(65, 2.f);
    stamp(obs, 32, 32, 0, 1);
    const CameraModel cam = make_camera(65, 90.0, {0, 1, 0}, 0, 0);
    const KeypointSet k = lift_keypoints(obs, cam, 2);
    REQUIRE(k.present[1]);
    REQUIRE_FALSE(k.present[0]);
    for (const Vec3& p : k.points[1]) REQUIRE(p == Vec3{0, 0, 2.0});
  }
  SECTION("largest instance wins, ties to the lower id") {
    Observation obs = blank_observation(16, 1.f);
    stamp(obs, 1, 1, 5, 0);
    stamp(obs, 2, 1, 5, 0);
    stamp(obs, 10, 10, 2, 0);
    stamp(obs, 11, 10, 2, 0);
    const CameraModel cam = make_camera(16, 90.0, {0, 1, 0}, 0, 0);
    KeypointSet k = lift_keypoints(obs, cam, 1);
    // tie at two pixels each: instance 2 wins, so corners sit near (10..11,10)
    const CameraModel c16 = cam;
    const Vec3 expect = backproject(10, 10, 1.0, c16);
    REQUIRE(k.points[0][2] == expect);  // argmin x
    stamp(obs, 3, 1, 5, 0);
    k = lift_keypoints(obs, cam, 1);
    REQUIRE(k.points[0][2] == backproject(1, 1, 1.0, c16));
  }
  SECTION("category out of range is an error") {
    Observation obs = blank_observation(16, 1.f);
    stamp(obs, 4, 4, 0, 7);
    const CameraModel cam = make_camera(16, 90.0, {0, 1, 0}, 0, 0);
    REQUIRE_THROWS_AS(lift_keypoints(obs, cam, 3), KeypointError);
  }
  SECTION("lifted keypoints from a render lie on the box surface") {
    WorldState w = make_empty_room(12, 12);
    w.agent.position = w.cell_center(6, 2);
    w.objects.push_back(
        {7, 2, 0.6, 0.4, 0.9, {{1.2, 0, 1.8}, 35.0}, 1.0});
    validate_state(w);
    for (int el : {0, -30}) {
      w.agent.elevation_deg = el;
      const Observation obs = render(w);
      const CameraModel cam = agent_camera(w);
      const KeypointSet k = lift_keypoints(obs, cam, 4);
      REQUIRE(k.present[2]);
      REQUIRE_FALSE(k.present[0]);
      const Affine4 cam_to_world = cam.extrinsic().rigid_inverse();
      for (const Vec3& p : k.points[2]) {
        const Vec3 pw = cam_to_world.transform_point(p);
        REQUIRE_THAT(box_sdf(w.objects[0], pw), WithinAbs(0.0, 1e-4));
      }
      // deterministic: a second lift reproduces the same points bit for bit
      const KeypointSet k2 = lift_keypoints(render(w), cam, 4);
      for (int i = 0; i < 8; ++i)
        REQUIRE(k.points[2][static_cast<size_t>(i)] ==
                k2.points[2][static_cast<size_t>(i)]);
    }
  }
}

TEST_CASE("mask corruption") {
  SECTION("dropout removes whole instances") {
    Observation obs = blank_observation(16, 1.f);
    for (int u = 2; u <= 5; ++u) stamp(obs, u, 3, 0, 0);
    for (int u = 9; u <= 12; ++u) stamp(obs, u, 8, 1, 1);
    std::mt19937_64 rng(5);
    corrupt_segmentation(obs, MaskNoise{1.0, 0, 0}, rng);
    for (int32_t id : obs.instance) REQUIRE(id == kSegNone);
    for (int32_t c : obs.category) REQUIRE(c == kSegNone);
  }
  SECTION("erosion shrinks a rectangle by its radius") {
    Observation obs = blank_observation(16, 1.f);
    for (int v = 2; v <= 8; ++v)
      for (int u = 3; u <= 11; ++u) stamp(obs, u, v, 0, 0);
    std::mt19937_64 rng(5);
    corrupt_segmentation(obs, MaskNoise{0.0, 1, 0}, rng);
    const Mask m = mask_for_instance(obs, 0);
    for (int v = 0; v < 16; ++v)
      for (int u = 0; u < 16; ++u)
        REQUIRE(m.at(u, v) == (u >= 4 && u <= 10 && v >= 3 && v <= 7));
  }
  SECTION("dilation grows a rectangle into background only") {
    Observation obs = blank_observation(16, 1.f);
    for (int v = 4; v <= 6; ++v)
      for (int u = 4; u <= 6; ++u) stamp(obs, u, v, 0, 0);
    stamp(obs, 7, 5, 3, 1);  // neighbor instance must survive
    std::mt19937_64 rng(5);
    corrupt_segmentation(obs, MaskNoise{0.0, 0, 1}, rng);
    const Mask m = mask_for_instance(obs, 0);
    REQUIRE(m.at(3, 3));
    REQUIRE(m.at(7, 7));
    REQUIRE_FALSE(m.at(7, 5));
    const size_t neighbor = static_cast<size_t>(5) * 16 + 7;
    REQUIRE(obs.instance[neighbor] == 3);
    REQUIRE(obs.category[neighbor] == 1);
  }
  SECTION("same seed gives the same corruption") {
    Observation a = blank_observation(16, 1.f);
    for (int v = 4; v <= 6; ++v)
      for (int u = 4; u <= 9; ++u) stamp(a, u, v, 0, 0);
    Observation b = a;
    std::mt19937_64 ra(11), rb(11);
    corrupt_segmentation(a, MaskNoise{0.5, 1, 0}, ra);
    corrupt_segmentation(b, MaskNoise{0.5, 1, 0}, rb);
    REQUIRE(a.instance == b.instance);
  }
}
