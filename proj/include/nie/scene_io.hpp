#pragma once

// Scene (episode start state) serialization. A scene document captures the
// room, walls, objects, agent spawn, target, task tag and seed; loading
// validates every state invariant before returning.

#include <fstream>
#include <string>

#include <json.hpp>

#include "nie/worldsim.hpp"

namespace nie {

using Json = nlohmann::ordered_json;

constexpr int kSceneFormatVersion = 1;

inline Json scene_to_json(const WorldState& w) {
  Json j;
  j["version"] = kSceneFormatVersion;
  j["task"] = w.task_tag;
  j["seed"] = w.seed;
  j["room"] = {{"cells_w", w.cells_w}, {"cells_h", w.cells_h}};
  Json walls = Json::array();
  for (int iz = 0; iz < w.cells_h; ++iz)
    for (int ix = 0; ix < w.cells_w; ++ix)
      if (w.wall_at(ix, iz)) walls.push_back({ix, iz});
  j["walls"] = std::move(walls);
  Json objects = Json::array();
  for (const auto& o : w.objects) {
    Json jo;
    jo["id"] = o.id;
    jo["category"] = o.category;
    jo["size"] = {o.width, o.depth, o.height};
    jo["position"] = {o.pose.position.x, o.pose.position.y, o.pose.position.z};
    jo["yaw"] = o.pose.yaw_deg;
    jo["mass_factor"] = o.mass_factor;
    objects.push_back(std::move(jo));
  }
  j["objects"] = std::move(objects);
  j["agent"] = {
      {"position", {w.agent.position.x, w.agent.position.y, w.agent.position.z}},
      {"azimuth", w.agent.azimuth_deg},
      {"elevation", w.agent.elevation_deg},
      {"camera_height", w.agent.camera_height}};
  j["target"] = {w.target.x, w.target.z};
  j["sim"] = {{"pitch", w.params.pitch},
              {"base_displacement", w.params.base_displacement},
              {"wall_height", w.params.wall_height},
              {"fov_deg", w.params.fov_deg},
              {"render_size", w.params.render_size},
              {"far_depth", w.params.far_depth},
              {"slip_kappa", w.params.slip_kappa}};
  return j;
}

inline WorldState scene_from_json(const Json& j) {
  if (!j.contains("version") || j.at("version").get<int>() != kSceneFormatVersion)
    throw SimError("unsupported scene format version");
  WorldState w;
  w.task_tag = j.at("task").get<std::string>();
  w.seed = j.at("seed").get<uint64_t>();
  w.cells_w = j.at("room").at("cells_w").get<int>();
  w.cells_h = j.at("room").at("cells_h").get<int>();
  const auto& sim = j.at("sim");
  w.params.pitch = sim.at("pitch").get<double>();
  w.params.base_displacement = sim.at("base_displacement").get<double>();
  w.params.wall_height = sim.at("wall_height").get<double>();
  w.params.fov_deg = sim.at("fov_deg").get<double>();
  w.params.render_size = sim.at("render_size").get<int>();
  w.params.far_depth = sim.at("far_depth").get<double>();
  w.params.slip_kappa = sim.at("slip_kappa").get<double>();
  w.walls.assign(static_cast<size_t>(w.cells_w) * w.cells_h, 0);
  for (const auto& cell : j.at("walls"))
    w.set_wall(cell.at(0).get<int>(), cell.at(1).get<int>());
  for (const auto& jo : j.at("objects")) {
    ObjectInstance o;
    o.id = jo.at("id").get<int64_t>();
    o.category = jo.at("category").get<int>();
    o.width = jo.at("size").at(0).get<double>();
    o.depth = jo.at("size").at(1).get<double>();
    o.height = jo.at("size").at(2).get<double>();
    o.pose.position = {jo.at("position").at(0).get<double>(),
                       jo.at("position").at(1).get<double>(),
                       jo.at("position").at(2).get<double>()};
    o.pose.yaw_deg = jo.at("yaw").get<double>();
    o.mass_factor = jo.at("mass_factor").get<double>();
    w.objects.push_back(o);
  }
  const auto& ja = j.at("agent");
  w.agent.position = {ja.at("position").at(0).get<double>(),
                      ja.at("position").at(1).get<double>(),
                      ja.at("position").at(2).get<double>()};
  w.agent.azimuth_deg = ja.at("azimuth").get<int>();
  w.agent.elevation_deg = ja.at("elevation").get<int>();
  w.agent.camera_height = ja.at("camera_height").get<double>();
  w.target = {j.at("target").at(0).get<double>(), 0.0,
              j.at("target").at(1).get<double>()};
  validate_state(w);
  return w;
}

inline void save_scene(const WorldState& w, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw SimError("cannot open scene file for writing: " + path);
  os << scene_to_json(w).dump(2) << "\n";
}

inline WorldState load_scene(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw SimError("cannot open scene file: " + path);
  Json j;
  try {
    is >> j;
  } catch (const std::exception& e) {
    throw SimError("scene parse error in " + path + ": " + e.what());
  }
  return scene_from_json(j);
}

// Rectangular room whose one-cell-thick perimeter is wall.
inline WorldState make_empty_room(int cells_w, int cells_h,
                                  const SimParams& params = {}) {
  WorldState w;
  w.params = params;
  w.cells_w = cells_w;
  w.cells_h = cells_h;
  w.walls.assign(static_cast<size_t>(cells_w) * cells_h, 0);
  for (int ix = 0; ix < cells_w; ++ix) {
    w.set_wall(ix, 0);
    w.set_wall(ix, cells_h - 1);
  }
  for (int iz = 0; iz < cells_h; ++iz) {
    w.set_wall(0, iz);
    w.set_wall(cells_w - 1, iz);
  }
  w.agent.position = w.cell_center(cells_w / 2, cells_h / 2);
  w.target = w.agent.position;
  return w;
}

}  // namespace nie
