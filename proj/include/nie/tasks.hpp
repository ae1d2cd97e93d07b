#pragma once

// Episode generation, reward shaping, success predicates and metrics for the
// two interactive tasks. Obstructed navigation spawns the agent in a room
// whose only route to the target is sealed by a movable box; object placement
// spawns a payload object at least two meters from a marked floor point the
// agent must push it onto.
//
// Reward shaping distances use walls-only geodesics so that moving an object
// never changes the potential function; path open/block bonuses come from the
// simulator's step events instead.

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nie/scene_io.hpp"
#include "nie/worldsim.hpp"

namespace nie {

struct TaskError : std::runtime_error {
  explicit TaskError(const std::string& what) : std::runtime_error(what) {}
};

enum class Task { kObsNav, kObjPlace };

inline const char* task_name(Task t) {
  return t == Task::kObsNav ? "obsnav" : "objplace";
}
inline Task task_from_name(const std::string& name) {
  if (name == "obsnav") return Task::kObsNav;
  if (name == "objplace") return Task::kObjPlace;
  throw TaskError("unknown task: " + name);
}

// ----- Configuration -----------------------------------------------------------------

struct RewardConfig {
  double success_reward = 10.0;
  double path_change = 0.5;  // bonus for opening a path, penalty for blocking
  double step_penalty_obsnav = -0.01;
  double step_penalty_objplace = -0.002;
  double success_radius = 0.2;
  int max_steps = 500;

  double step_penalty(Task t) const {
    return t == Task::kObsNav ? step_penalty_obsnav : step_penalty_objplace;
  }
  bool operator==(const RewardConfig&) const = default;
};

struct GenConfig {
  int min_cells_w = 12, max_cells_w = 24;  // 3-6 m sides at the default pitch
  int min_cells_h = 12, max_cells_h = 24;
  int max_stub_walls = 3;
  int max_clutter = 2;      // decorative objects beyond the task-critical one
  int num_categories = 8;
  int size_variant = 2;     // 0..4, scales object sizes per dataset split
  int max_attempts = 200;
  SimParams params;
};

inline double variant_scale(int v) {
  if (v < 0 || v > 4) throw TaskError("size variant must be in 0..4");
  return 0.8 + 0.1 * v;
}

// ----- Episode -----------------------------------------------------------------------

struct Episode {
  WorldState scene;
  Task task = Task::kObsNav;
  int64_t target_object_id = -1;  // object placement payload
  double optimal_length = 0.0;    // shortest-path meters at spawn
  uint64_t seed = 0;
};

inline int target_category(const Episode& ep) {
  const ObjectInstance* o = ep.scene.find_object(ep.target_object_id);
  if (!o) throw TaskError("episode references a missing payload object");
  return o->category;
}

struct EpisodeResult {
  bool success = false;
  double final_distance = 0.0;  // meters to the target when the episode ended
  double path_length = 0.0;     // meters traveled (agent or payload)
  double optimal_length = 0.0;  // carried from the episode
  int64_t steps = 0;
};

struct Metrics {
  double sr = 0.0;   // percent
  double fdt = 0.0;  // meters
  double spl = 0.0;  // ratio in [0,1]
};

// ----- Success and reward ------------------------------------------------------------

// Straight-line distance between the task entity and the target point.
inline double success_distance(const Episode& ep, const WorldState& s) {
  Vec3 from = s.agent.position;
  if (ep.task == Task::kObjPlace) {
    const ObjectInstance* o = s.find_object(ep.target_object_id);
    if (!o) throw TaskError("state lost the payload object");
    from = o->pose.position;
  }
  return planar_distance(from, s.target);
}

inline bool is_success(const Episode& ep, const WorldState& s, bool invoked_end,
                       const RewardConfig& cfg) {
  return invoked_end && success_distance(ep, s) <= cfg.success_radius;
}

// Geodesic shaping distance, walls-only so interactions preserve it.
inline double task_distance(const Episode& ep, const WorldState& s) {
  Vec3 from = s.agent.position;
  if (ep.task == Task::kObjPlace) {
    const ObjectInstance* o = s.find_object(ep.target_object_id);
    if (!o) throw TaskError("state lost the payload object");
    from = o->pose.position;
  }
  return geodesic_distance(s, from, s.target, Mover::walls_only());
}

// r = [success] + [path change] + (d_prev - d_next) + step penalty
inline double reward_formula(bool goal_reached, double d_prev, double d_next,
                             int path_delta, double step_penalty,
                             const RewardConfig& cfg) {
  double r = goal_reached ? cfg.success_reward : 0.0;
  r += cfg.path_change * path_delta;
  r += d_prev - d_next;
  r += step_penalty;
  return r;
}

inline double compute_reward(const Episode& ep, const WorldState& prev,
                             Action action, const WorldState& next,
                             const StepEvent& event, const RewardConfig& cfg) {
  const double d_prev = task_distance(ep, prev);
  const double d_next = task_distance(ep, next);
  int path_delta = 0;
  if (ep.task == Task::kObsNav) {
    if (event.path_opened) path_delta = 1;
    if (event.path_blocked) path_delta = -1;
  }
  const bool goal = is_success(ep, next, action == Action::kEnd, cfg);
  return reward_formula(goal, d_prev, d_next, path_delta,
                        cfg.step_penalty(ep.task), cfg);
}

// ----- Metrics -----------------------------------------------------------------------

inline Metrics compute_metrics(const std::vector<EpisodeResult>& results) {
  if (results.empty()) throw TaskError("metrics need at least one episode");
  double successes = 0.0, fdt = 0.0, spl = 0.0;
  for (const auto& r : results) {
    if (!(r.optimal_length > 0.0))
      throw TaskError("degenerate episode: optimal length must be positive");
    successes += r.success ? 1.0 : 0.0;
    fdt += r.final_distance;
    if (r.success)
      spl += r.optimal_length / std::max(r.path_length, r.optimal_length);
  }
  const double n = static_cast<double>(results.size());
  return {100.0 * successes / n, fdt / n, spl / n};
}

// ----- Generation --------------------------------------------------------------------

namespace detail {

inline int rand_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}
inline double rand_real(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline bool state_valid(const WorldState& w) {
  try {
    validate_state(w);
  } catch (const SimError&) {
    return false;
  }
  return true;
}

// Partial wall run growing inward from a perimeter side.
inline void add_stub_wall(WorldState& w, std::mt19937_64& rng) {
  if (w.cells_w < 8 || w.cells_h < 8) return;
  const bool horizontal = rand_int(rng, 0, 1) == 0;
  if (horizontal) {
    const int iz = rand_int(rng, 3, w.cells_h - 4);
    const int len = rand_int(rng, 2, std::max(2, w.cells_w / 2 - 1));
    const bool from_left = rand_int(rng, 0, 1) == 0;
    for (int k = 0; k < len; ++k)
      w.set_wall(from_left ? 1 + k : w.cells_w - 2 - k, iz);
  } else {
    const int ix = rand_int(rng, 3, w.cells_w - 4);
    const int len = rand_int(rng, 2, std::max(2, w.cells_h / 2 - 1));
    const bool from_top = rand_int(rng, 0, 1) == 0;
    for (int k = 0; k < len; ++k)
      w.set_wall(ix, from_top ? 1 + k : w.cells_h - 2 - k);
  }
}

inline std::vector<std::pair<int, int>> interior_free_cells(const WorldState& w) {
  std::vector<std::pair<int, int>> cells;
  for (int iz = 1; iz < w.cells_h - 1; ++iz)
    for (int ix = 1; ix < w.cells_w - 1; ++ix)
      if (!w.wall_at(ix, iz)) cells.push_back({ix, iz});
  return cells;
}

// Tries to place an object at random free cells until the state validates.
inline bool place_object(WorldState& w, ObjectInstance obj, std::mt19937_64& rng,
                         int tries = 40) {
  const auto cells = interior_free_cells(w);
  if (cells.empty()) return false;
  for (int t = 0; t < tries; ++t) {
    const auto [ix, iz] = cells[static_cast<size_t>(
        rand_int(rng, 0, static_cast<int>(cells.size()) - 1))];
    obj.pose.position = w.cell_center(ix, iz);
    w.objects.push_back(obj);
    if (state_valid(w)) return true;
    w.objects.pop_back();
  }
  return false;
}

inline bool place_agent(WorldState& w, std::mt19937_64& rng, int lo_x, int hi_x,
                        int lo_z, int hi_z, int tries = 40) {
  for (int t = 0; t < tries; ++t) {
    const int ix = rand_int(rng, lo_x, hi_x);
    const int iz = rand_int(rng, lo_z, hi_z);
    if (w.wall_at(ix, iz)) continue;
    w.agent.position = w.cell_center(ix, iz);
    w.agent.azimuth_deg = 90 * rand_int(rng, 0, 3);
    w.agent.elevation_deg = 0;
    if (state_valid(w)) return true;
  }
  return false;
}

inline ObjectInstance make_box(int64_t id, int category, double width,
                               double depth, double height, double mass) {
  ObjectInstance o;
  o.id = id;
  o.category = category;
  o.width = width;
  o.depth = depth;
  o.height = height;
  o.mass_factor = mass;
  return o;
}

// Certifies that displacing the blocker along one room axis opens the path.
inline bool blocker_solvable(const WorldState& w, int64_t blocker_id,
                             bool divider_horizontal) {
  const ObjectInstance* box = w.find_object(blocker_id);
  if (!box) return false;
  const double dx = divider_horizontal ? 0.0 : 1.0;
  const double dz = divider_horizontal ? 1.0 : 0.0;
  for (const double sign : {1.0, -1.0}) {
    const double free_dist =
        push_free_distance(w, *box, sign * dx, sign * dz, 1.0);
    if (free_dist < 0.35) continue;
    WorldState probe = w;
    ObjectInstance* moved = probe.find_object(blocker_id);
    moved->pose.position += free_dist * Vec3{sign * dx, 0.0, sign * dz};
    if (!state_valid(probe)) continue;
    if (path_exists(probe)) return true;
  }
  return false;
}

// The agent must be able to walk up to the blocker's doorway.
inline bool doorway_approachable(const WorldState& w, int door_ix, int door_iz,
                                 bool divider_horizontal) {
  const auto [ax, az] = w.cell_of(w.agent.position);
  const int agent_side =
      (divider_horizontal ? az - door_iz : ax - door_ix) < 0 ? -1 : 1;
  for (int off = 2; off <= 3; ++off) {
    const int ix = divider_horizontal ? door_ix : door_ix + agent_side * off;
    const int iz = divider_horizontal ? door_iz + agent_side * off : door_iz;
    if (ix < 1 || iz < 1 || ix > w.cells_w - 2 || iz > w.cells_h - 2) continue;
    if (geodesic_distance(w, w.agent.position, w.cell_center(ix, iz),
                          Mover::agent()) != kUnreachable)
      return true;
  }
  return false;
}

}  // namespace detail

// Room split by a full dividing wall with a three-cell doorway sealed by a
// pushable box; the agent spawns on one side, the target on the other.
inline Episode gen_obsnav(uint64_t seed, const GenConfig& cfg) {
  if (cfg.min_cells_w < 7 || cfg.min_cells_h < 9)
    throw TaskError("obsnav room template too small for a divided room");
  std::mt19937_64 rng(seed);
  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    const int cw = detail::rand_int(rng, cfg.min_cells_w, cfg.max_cells_w);
    const int ch = detail::rand_int(rng, cfg.min_cells_h, cfg.max_cells_h);
    WorldState w = make_empty_room(cw, ch, cfg.params);
    w.task_tag = task_name(Task::kObsNav);
    w.seed = seed;

    // dividing wall with a doorway; orientation picked per attempt
    const bool horizontal = cw < 9 || detail::rand_int(rng, 0, 1) == 0;
    const int span = horizontal ? ch : cw;
    const int cross = horizontal ? cw : ch;
    const int line = detail::rand_int(rng, 4, span - 5);
    const int door = detail::rand_int(rng, 2, std::max(2, cross - 5));
    for (int k = 1; k < cross - 1; ++k) {
      if (k >= door && k < door + 3) continue;
      if (horizontal) w.set_wall(k, line);
      else w.set_wall(line, k);
    }
    const int door_ix = horizontal ? door + 1 : line;
    const int door_iz = horizontal ? line : door + 1;

    const double scale = variant_scale(cfg.size_variant);
    const double across = detail::rand_real(rng, 0.60, 0.73);
    const double along = detail::rand_real(rng, 0.30, 0.45);
    ObjectInstance blocker = detail::make_box(
        0, detail::rand_int(rng, 0, cfg.num_categories - 1),
        horizontal ? across : along, horizontal ? along : across,
        scale * detail::rand_real(rng, 0.6, 1.1),
        static_cast<double>(detail::rand_int(rng, 1, 2)));
    blocker.pose.position = w.cell_center(door_ix, door_iz);
    w.objects.push_back(blocker);
    if (!detail::state_valid(w)) continue;

    const int agent_side = detail::rand_int(rng, 0, 1) == 0 ? -1 : 1;
    const auto side_range = [&](int side) {
      return side < 0 ? std::pair<int, int>{1, line - 1}
                      : std::pair<int, int>{line + 1, span - 2};
    };
    const auto [a_lo, a_hi] = side_range(agent_side);
    const bool agent_ok =
        horizontal ? detail::place_agent(w, rng, 1, cw - 2, a_lo, a_hi)
                   : detail::place_agent(w, rng, a_lo, a_hi, 1, ch - 2);
    if (!agent_ok) continue;

    const auto [t_lo, t_hi] = side_range(-agent_side);
    bool target_ok = false;
    for (int t = 0; t < 40 && !target_ok; ++t) {
      const int c1 = detail::rand_int(rng, 1, cross - 2);
      const int c2 = detail::rand_int(rng, t_lo, t_hi);
      const int ix = horizontal ? c1 : c2;
      const int iz = horizontal ? c2 : c1;
      if (w.wall_at(ix, iz)) continue;
      w.target = w.cell_center(ix, iz);
      target_ok = true;
    }
    if (!target_ok) continue;

    for (int k = detail::rand_int(rng, 0, cfg.max_clutter); k > 0; --k) {
      ObjectInstance clutter = detail::make_box(
          static_cast<int64_t>(w.objects.size()),
          detail::rand_int(rng, 0, cfg.num_categories - 1),
          scale * detail::rand_real(rng, 0.2, 0.45),
          scale * detail::rand_real(rng, 0.2, 0.45),
          scale * detail::rand_real(rng, 0.3, 0.9),
          static_cast<double>(detail::rand_int(rng, 1, 4)));
      WorldState before = w;
      if (detail::place_object(w, clutter, rng) &&
          (!detail::doorway_approachable(w, door_ix, door_iz, horizontal) ||
           !detail::blocker_solvable(w, 0, horizontal)))
        w = before;
    }

    const double optimal =
        geodesic_distance(w, w.agent.position, w.target, Mover::walls_only());
    if (optimal == kUnreachable || optimal < 1.0) continue;
    if (path_exists(w)) continue;
    if (!detail::doorway_approachable(w, door_ix, door_iz, horizontal)) continue;
    if (!detail::blocker_solvable(w, 0, horizontal)) continue;
    if (!detail::state_valid(w)) continue;

    Episode ep;
    ep.scene = std::move(w);
    ep.task = Task::kObsNav;
    ep.optimal_length = optimal;
    ep.seed = seed;
    return ep;
  }
  throw TaskError("obsnav generation failed after " +
                  std::to_string(cfg.max_attempts) + " attempts (template " +
                  std::to_string(cfg.min_cells_w) + ".." +
                  std::to_string(cfg.max_cells_w) + " x " +
                  std::to_string(cfg.min_cells_h) + ".." +
                  std::to_string(cfg.max_cells_h) + ")");
}

// Open room with optional wall stubs; a payload object spawns at least two
// meters from the marked target point.
inline Episode gen_objplace(uint64_t seed, const GenConfig& cfg) {
  const double reach_w = (cfg.max_cells_w - 3) * cfg.params.pitch;
  const double reach_h = (cfg.max_cells_h - 3) * cfg.params.pitch;
  if (std::hypot(reach_w, reach_h) < 2.0)
    throw TaskError("room template cannot admit a 2 m object-target separation");

  std::mt19937_64 rng(seed);
  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    const int cw = detail::rand_int(rng, cfg.min_cells_w, cfg.max_cells_w);
    const int ch = detail::rand_int(rng, cfg.min_cells_h, cfg.max_cells_h);
    WorldState w = make_empty_room(cw, ch, cfg.params);
    w.task_tag = task_name(Task::kObjPlace);
    w.seed = seed;
    for (int k = detail::rand_int(rng, 0, cfg.max_stub_walls); k > 0; --k)
      detail::add_stub_wall(w, rng);

    const double scale = variant_scale(cfg.size_variant);
    ObjectInstance payload = detail::make_box(
        0, detail::rand_int(rng, 0, cfg.num_categories - 1),
        scale * detail::rand_real(rng, 0.3, 0.5),
        scale * detail::rand_real(rng, 0.3, 0.5),
        scale * detail::rand_real(rng, 0.4, 0.9),
        static_cast<double>(detail::rand_int(rng, 1, 2)));
    const auto free_cells = detail::interior_free_cells(w);
    if (free_cells.empty()) continue;
    w.agent.position =  // provisional spot so placement validation can run
        w.cell_center(free_cells.front().first, free_cells.front().second);
    if (!detail::place_object(w, payload, rng)) continue;
    const Vec3 payload_pos = w.objects.back().pose.position;

    bool target_ok = false;
    for (int t = 0; t < 60 && !target_ok; ++t) {
      const int ix = detail::rand_int(rng, 1, cw - 2);
      const int iz = detail::rand_int(rng, 1, ch - 2);
      if (w.wall_at(ix, iz)) continue;
      const Vec3 cand = w.cell_center(ix, iz);
      if (planar_distance(cand, payload_pos) < 2.0) continue;
      if (geodesic_distance(w, payload_pos, cand, Mover::object(0)) ==
          kUnreachable)
        continue;
      w.target = cand;
      target_ok = true;
    }
    if (!target_ok) continue;

    if (!detail::place_agent(w, rng, 1, cw - 2, 1, ch - 2)) continue;

    for (int k = detail::rand_int(rng, 0, cfg.max_clutter); k > 0; --k) {
      ObjectInstance clutter = detail::make_box(
          static_cast<int64_t>(w.objects.size()),
          detail::rand_int(rng, 0, cfg.num_categories - 1),
          scale * detail::rand_real(rng, 0.2, 0.4),
          scale * detail::rand_real(rng, 0.2, 0.4),
          scale * detail::rand_real(rng, 0.3, 0.9),
          static_cast<double>(detail::rand_int(rng, 1, 4)));
      WorldState before = w;
      if (detail::place_object(w, clutter, rng) &&
          geodesic_distance(w, payload_pos, w.target, Mover::object(0)) ==
              kUnreachable)
        w = before;
    }

    const double optimal =
        geodesic_distance(w, payload_pos, w.target, Mover::object(0));
    if (optimal == kUnreachable || optimal <= 0.0) continue;
    bool agent_reaches = false;
    const auto [ox, oz] = w.cell_of(payload_pos);
    for (const auto& [nx, nz] : std::vector<std::pair<int, int>>{
             {ox + 2, oz}, {ox - 2, oz}, {ox, oz + 2}, {ox, oz - 2}}) {
      if (nx < 1 || nz < 1 || nx > cw - 2 || nz > ch - 2) continue;
      if (geodesic_distance(w, w.agent.position, w.cell_center(nx, nz),
                            Mover::agent()) != kUnreachable) {
        agent_reaches = true;
        break;
      }
    }
    if (!agent_reaches) continue;
    if (!detail::state_valid(w)) continue;

    Episode ep;
    ep.scene = std::move(w);
    ep.task = Task::kObjPlace;
    ep.target_object_id = 0;
    ep.optimal_length = optimal;
    ep.seed = seed;
    return ep;
  }
  throw TaskError("objplace generation failed after " +
                  std::to_string(cfg.max_attempts) + " attempts (template " +
                  std::to_string(cfg.min_cells_w) + ".." +
                  std::to_string(cfg.max_cells_w) + " x " +
                  std::to_string(cfg.min_cells_h) + ".." +
                  std::to_string(cfg.max_cells_h) + ")");
}

// Sanity task: an open room with nothing to move, scored and rewarded exactly
// like obstructed navigation (the path terms simply never fire).
inline Episode gen_pointgoal(uint64_t seed, const GenConfig& cfg) {
  std::mt19937_64 rng(seed);
  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    const int cw = detail::rand_int(rng, cfg.min_cells_w, cfg.max_cells_w);
    const int ch = detail::rand_int(rng, cfg.min_cells_h, cfg.max_cells_h);
    WorldState w = make_empty_room(cw, ch, cfg.params);
    w.task_tag = "pointgoal";
    w.seed = seed;

    if (!detail::place_agent(w, rng, 1, cw - 2, 1, ch - 2)) continue;
    bool target_ok = false;
    for (int t = 0; t < 40 && !target_ok; ++t) {
      const int ix = detail::rand_int(rng, 1, cw - 2);
      const int iz = detail::rand_int(rng, 1, ch - 2);
      w.target = w.cell_center(ix, iz);
      if (planar_distance(w.target, w.agent.position) < 1.0) continue;
      target_ok = true;
    }
    if (!target_ok) continue;

    const double optimal =
        geodesic_distance(w, w.agent.position, w.target, Mover::walls_only());
    if (optimal == kUnreachable || optimal < 1.0) continue;
    if (!path_exists(w)) continue;
    if (!detail::state_valid(w)) continue;

    Episode ep;
    ep.scene = std::move(w);
    ep.task = Task::kObsNav;
    ep.optimal_length = optimal;
    ep.seed = seed;
    return ep;
  }
  throw TaskError("pointgoal generation failed after " +
                  std::to_string(cfg.max_attempts) + " attempts (template " +
                  std::to_string(cfg.min_cells_w) + ".." +
                  std::to_string(cfg.max_cells_w) + " x " +
                  std::to_string(cfg.min_cells_h) + ".." +
                  std::to_string(cfg.max_cells_h) + ")");
}

// ----- Dataset serialization -----------------------------------------------------------

constexpr int kDatasetFormatVersion = 1;

inline Json episode_to_json(const Episode& ep) {
  Json j;
  j["scene"] = scene_to_json(ep.scene);
  j["task"] = task_name(ep.task);
  j["target_object_id"] = ep.target_object_id;
  j["optimal_length"] = ep.optimal_length;
  j["seed"] = ep.seed;
  return j;
}

inline Episode episode_from_json(const Json& j) {
  Episode ep;
  ep.scene = scene_from_json(j.at("scene"));
  ep.task = task_from_name(j.at("task").get<std::string>());
  ep.target_object_id = j.at("target_object_id").get<int64_t>();
  ep.optimal_length = j.at("optimal_length").get<double>();
  ep.seed = j.at("seed").get<uint64_t>();
  if (ep.task == Task::kObjPlace && !ep.scene.find_object(ep.target_object_id))
    throw TaskError("dataset episode references a missing payload object");
  return ep;
}

inline Json dataset_to_json(const std::vector<Episode>& episodes) {
  Json j;
  j["version"] = kDatasetFormatVersion;
  Json list = Json::array();
  for (const auto& ep : episodes) list.push_back(episode_to_json(ep));
  j["episodes"] = std::move(list);
  return j;
}

inline std::vector<Episode> dataset_from_json(const Json& j) {
  if (!j.contains("version") ||
      j.at("version").get<int>() != kDatasetFormatVersion)
    throw TaskError("unsupported dataset format version");
  std::vector<Episode> episodes;
  for (const auto& je : j.at("episodes"))
    episodes.push_back(episode_from_json(je));
  return episodes;
}

inline void save_dataset(const std::vector<Episode>& episodes,
                         const std::string& path) {
  std::ofstream os(path);
  if (!os) throw TaskError("cannot open dataset file for writing: " + path);
  os << dataset_to_json(episodes).dump(2) << "\n";
}

inline std::vector<Episode> load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw TaskError("cannot open dataset file: " + path);
  Json j;
  try {
    is >> j;
  } catch (const std::exception& e) {
    throw TaskError("dataset parse error in " + path + ": " + e.what());
  }
  return dataset_from_json(j);
}

}  // namespace nie
