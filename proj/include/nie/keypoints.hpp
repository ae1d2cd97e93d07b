#pragma once

// Heuristic box keypoints from segmentation masks: the eight pixel extrema of
// x, y, x+y and x-y over an instance mask, lifted to camera-frame 3-D points
// through the depth map. An optional corruption mode degrades the masks the
// way an imperfect detector would.

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

#include "nie/geometry.hpp"
#include "nie/render.hpp"

namespace nie {

struct KeypointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr int kNumKeypoints = 8;

// ----- Masks ---------------------------------------------------------------------

struct Mask {
  int width = 0, height = 0;
  std::vector<uint8_t> member;  // row-major width*height

  bool at(int u, int v) const {
    return member[static_cast<size_t>(v) * width + u] != 0;
  }
  int64_t count() const {
    int64_t n = 0;
    for (uint8_t m : member) n += m != 0;
    return n;
  }
};

inline Mask mask_for_instance(const Observation& obs, int32_t instance_id) {
  Mask m;
  m.width = obs.width;
  m.height = obs.height;
  m.member.resize(obs.instance.size());
  for (size_t i = 0; i < obs.instance.size(); ++i)
    m.member[i] = obs.instance[i] == instance_id ? 1 : 0;
  return m;
}

// ----- Corner detection ------------------------------------------------------------

struct Corner {
  int u = 0, v = 0;

  bool operator==(const Corner&) const = default;
};

// Extrema of x, y, x+y and x-y over member pixels, in that criterion order
// (max x, max y, min x, min y, max x+y, min x+y, max x-y, min x-y). Ties go
// to the smallest v, then the smallest u; duplicates across slots are normal
// for thin or small masks.
inline std::array<Corner, kNumKeypoints> detect_corners(const Mask& mask) {
  std::array<Corner, kNumKeypoints> best{};
  std::array<int64_t, kNumKeypoints> score;
  score.fill(std::numeric_limits<int64_t>::min());
  bool any = false;
  for (int v = 0; v < mask.height; ++v)
    for (int u = 0; u < mask.width; ++u) {
      if (!mask.at(u, v)) continue;
      any = true;
      const std::array<int64_t, kNumKeypoints> vals = {
          u, v, -u, -v, u + v, -(u + v), u - v, -(u - v)};
      for (int k = 0; k < kNumKeypoints; ++k)
        if (vals[static_cast<size_t>(k)] > score[static_cast<size_t>(k)]) {
          score[static_cast<size_t>(k)] = vals[static_cast<size_t>(k)];
          best[static_cast<size_t>(k)] = {u, v};
        }
    }
  if (!any) throw KeypointError("corner detection on an empty mask");
  return best;
}

// ----- Mask corruption ---------------------------------------------------------------

// Detector-imperfection model: whole instances vanish with probability
// drop_prob, then mask boundaries are eroded and dilated by a Chebyshev
// radius. Dilation only claims background pixels.
struct MaskNoise {
  double drop_prob = 0.0;
  int erode_px = 0;
  int dilate_px = 0;

  bool active() const { return drop_prob > 0 || erode_px > 0 || dilate_px > 0; }
};

inline void corrupt_segmentation(Observation& obs, const MaskNoise& noise,
                                 std::mt19937_64& rng) {
  std::vector<int32_t> ids;
  for (int32_t id : obs.instance)
    if (id >= 0) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());

  std::bernoulli_distribution drop(noise.drop_prob);
  for (int32_t id : ids) {
    if (noise.drop_prob > 0 && drop(rng)) {
      for (size_t i = 0; i < obs.instance.size(); ++i)
        if (obs.instance[i] == id) {
          obs.instance[i] = kSegNone;
          obs.category[i] = kSegNone;
        }
      continue;
    }
    if (noise.erode_px <= 0 && noise.dilate_px <= 0) continue;

    int32_t cat = kSegNone;
    Mask m = mask_for_instance(obs, id);
    for (size_t i = 0; i < obs.instance.size(); ++i)
      if (obs.instance[i] == id) cat = obs.category[i];

    auto within = [&](const Mask& src, int u, int v, int r, bool value) {
      for (int dv = -r; dv <= r; ++dv)
        for (int du = -r; du <= r; ++du) {
          const int uu = u + du, vv = v + dv;
          if (uu < 0 || vv < 0 || uu >= src.width || vv >= src.height) {
            if (!value) return true;  // image border counts as background
            continue;
          }
          if (src.at(uu, vv) == value) return true;
        }
      return false;
    };

    if (noise.erode_px > 0) {
      Mask out = m;
      for (int v = 0; v < m.height; ++v)
        for (int u = 0; u < m.width; ++u)
          if (m.at(u, v) && within(m, u, v, noise.erode_px, false))
            out.member[static_cast<size_t>(v) * m.width + u] = 0;
      m = out;
    }
    if (noise.dilate_px > 0) {
      Mask out = m;
      for (int v = 0; v < m.height; ++v)
        for (int u = 0; u < m.width; ++u)
          if (!m.at(u, v) && within(m, u, v, noise.dilate_px, true))
            out.member[static_cast<size_t>(v) * m.width + u] = 1;
      m = out;
    }

    for (size_t i = 0; i < obs.instance.size(); ++i) {
      const bool now = m.member[i] != 0;
      if (obs.instance[i] == id && !now) {
        obs.instance[i] = kSegNone;
        obs.category[i] = kSegNone;
      } else if (now && obs.instance[i] < 0) {
        obs.instance[i] = id;
        obs.category[i] = cat;
      }
    }
  }
}

// ----- Lifting to camera-frame keypoints ----------------------------------------------

struct KeypointSet {
  int num_categories = 0;
  std::vector<std::array<Vec3, kNumKeypoints>> points;  // camera frame, meters
  std::vector<uint8_t> present;
  std::vector<int32_t> instances;  // picked instance per category, -1 if absent

  static KeypointSet empty(int num_categories) {
    KeypointSet k;
    k.num_categories = num_categories;
    k.points.assign(static_cast<size_t>(num_categories),
                    {Vec3{}, Vec3{}, Vec3{}, Vec3{}, Vec3{}, Vec3{}, Vec3{}, Vec3{}});
    k.present.assign(static_cast<size_t>(num_categories), 0);
    k.instances.assign(static_cast<size_t>(num_categories), -1);
    return k;
  }
};

// For each category present in the segmentation, picks the instance with the
// most pixels (ties to the lower id), detects its corners and back-projects
// them through the depth map. Categories without pixels stay zeroed with
// presence=false.
inline KeypointSet lift_keypoints(const Observation& obs, const CameraModel& cam,
                                  int num_categories) {
  KeypointSet out = KeypointSet::empty(num_categories);

  struct Count {
    int32_t instance;
    int64_t pixels;
  };
  std::vector<std::vector<Count>> per_cat(static_cast<size_t>(num_categories));
  for (size_t i = 0; i < obs.instance.size(); ++i) {
    const int32_t id = obs.instance[i];
    if (id < 0) continue;
    const int32_t cat = obs.category[i];
    if (cat < 0 || cat >= num_categories)
      throw KeypointError("segmentation category " + std::to_string(cat) +
                          " out of range");
    auto& counts = per_cat[static_cast<size_t>(cat)];
    bool found = false;
    for (auto& c : counts)
      if (c.instance == id) {
        ++c.pixels;
        found = true;
      }
    if (!found) counts.push_back({id, 1});
  }

  for (int cat = 0; cat < num_categories; ++cat) {
    const auto& counts = per_cat[static_cast<size_t>(cat)];
    if (counts.empty()) continue;
    int32_t pick = counts[0].instance;
    int64_t pixels = counts[0].pixels;
    for (const auto& c : counts)
      if (c.pixels > pixels || (c.pixels == pixels && c.instance < pick)) {
        pick = c.instance;
        pixels = c.pixels;
      }
    const auto corners = detect_corners(mask_for_instance(obs, pick));
    for (int k = 0; k < kNumKeypoints; ++k) {
      const auto [u, v] = corners[static_cast<size_t>(k)];
      const double depth =
          obs.depth[static_cast<int64_t>(v) * obs.width + u];
      out.points[static_cast<size_t>(cat)][static_cast<size_t>(k)] =
          backproject(u, v, depth, cam);
    }
    out.present[static_cast<size_t>(cat)] = 1;
    out.instances[static_cast<size_t>(cat)] = pick;
  }
  return out;
}

}  // namespace nie
