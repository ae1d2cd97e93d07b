#pragma once

// Run configuration and the plumbing behind the command-line tool: dataset
// generation, training, evaluation, and trajectory replay with image dumps.
// Every knob lives in one flat key-value document so a run is reproducible
// from its echoed configuration plus the seed.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nie/trainer.hpp"

namespace nie {

struct CliError : std::runtime_error {
  explicit CliError(const std::string& what) : std::runtime_error(what) {}
};

// ----- Run configuration --------------------------------------------------------------

struct RunConfig {
  std::string task = "obsnav";
  std::string variant = "nie";
  std::string data_dir = "data";
  std::string run_dir = "runs/default";
  std::string checkpoint;  // empty means freshly initialized weights
  std::string split = "val";
  std::string out_dir = "replay_frames";
  uint64_t seed = 1;

  // optimization
  int workers = 8;
  int horizon = 30;
  int ppo_epochs = 4;
  int minibatches = 2;
  double clip_eps = 0.2;
  double gamma = 0.99;
  double lambda_gae = 0.95;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  double alpha = 3.0;
  double lr = 3e-4;
  double grad_clip = 0.5;
  int64_t total_steps = 2'000'000;
  int64_t eval_period = 200'000;
  int eval_episodes = 20;
  double stop_sr = -1.0;

  // rewards
  double success_reward = 10.0;
  double path_change = 0.5;
  double step_penalty_obsnav = -0.01;
  double step_penalty_objplace = -0.002;
  double success_radius = 0.2;
  int max_steps = 500;

  // model
  int64_t image_size = 64;
  std::vector<int64_t> color_channels = {16, 32, 64};
  std::vector<int64_t> depth_channels = {8, 16, 32};
  int64_t v_dim = 256;
  int64_t goal_dim = 32;
  int64_t gru_hidden = 512;
  int64_t categories = 8;
  int64_t obs_feat_dim = 288;
  int64_t kp_emb_dim = 32;
  int64_t emb_dim = 32;
  int64_t nie_hidden = 128;
  int64_t state_dim = 128;
  int64_t attn_dim = 128;
  int64_t out_dim = 32;
  int64_t depth_pool = 4;

  // generation
  int min_cells_w = 12;
  int max_cells_w = 24;
  int min_cells_h = 12;
  int max_cells_h = 24;
  int max_stub_walls = 3;
  int max_clutter = 2;
  int size_variant = 2;
  int max_attempts = 200;
  int train_count = 500;
  int val_count = 100;
  int test_count = 100;

  Json to_json() const {
    Json j;
    j["task"] = task;
    j["variant"] = variant;
    j["data_dir"] = data_dir;
    j["run_dir"] = run_dir;
    j["checkpoint"] = checkpoint;
    j["split"] = split;
    j["out_dir"] = out_dir;
    j["seed"] = seed;
    j["workers"] = workers;
    j["horizon"] = horizon;
    j["ppo_epochs"] = ppo_epochs;
    j["minibatches"] = minibatches;
    j["clip_eps"] = clip_eps;
    j["gamma"] = gamma;
    j["lambda_gae"] = lambda_gae;
    j["entropy_coef"] = entropy_coef;
    j["value_coef"] = value_coef;
    j["alpha"] = alpha;
    j["lr"] = lr;
    j["grad_clip"] = grad_clip;
    j["total_steps"] = total_steps;
    j["eval_period"] = eval_period;
    j["eval_episodes"] = eval_episodes;
    j["stop_sr"] = stop_sr;
    j["success_reward"] = success_reward;
    j["path_change"] = path_change;
    j["step_penalty_obsnav"] = step_penalty_obsnav;
    j["step_penalty_objplace"] = step_penalty_objplace;
    j["success_radius"] = success_radius;
    j["max_steps"] = max_steps;
    j["image_size"] = image_size;
    j["color_channels"] = color_channels;
    j["depth_channels"] = depth_channels;
    j["v_dim"] = v_dim;
    j["goal_dim"] = goal_dim;
    j["gru_hidden"] = gru_hidden;
    j["categories"] = categories;
    j["obs_feat_dim"] = obs_feat_dim;
    j["kp_emb_dim"] = kp_emb_dim;
    j["emb_dim"] = emb_dim;
    j["nie_hidden"] = nie_hidden;
    j["state_dim"] = state_dim;
    j["attn_dim"] = attn_dim;
    j["out_dim"] = out_dim;
    j["depth_pool"] = depth_pool;
    j["min_cells_w"] = min_cells_w;
    j["max_cells_w"] = max_cells_w;
    j["min_cells_h"] = min_cells_h;
    j["max_cells_h"] = max_cells_h;
    j["max_stub_walls"] = max_stub_walls;
    j["max_clutter"] = max_clutter;
    j["size_variant"] = size_variant;
    j["max_attempts"] = max_attempts;
    j["train_count"] = train_count;
    j["val_count"] = val_count;
    j["test_count"] = test_count;
    return j;
  }

  static RunConfig from_json(const Json& j) {
    RunConfig c;
    for (const auto& [key, value] : j.items()) {
      try {
        if (key == "task") c.task = value.get<std::string>();
        else if (key == "variant") c.variant = value.get<std::string>();
        else if (key == "data_dir") c.data_dir = value.get<std::string>();
        else if (key == "run_dir") c.run_dir = value.get<std::string>();
        else if (key == "checkpoint") c.checkpoint = value.get<std::string>();
        else if (key == "split") c.split = value.get<std::string>();
        else if (key == "out_dir") c.out_dir = value.get<std::string>();
        else if (key == "seed") c.seed = value.get<uint64_t>();
        else if (key == "workers") c.workers = value.get<int>();
        else if (key == "horizon") c.horizon = value.get<int>();
        else if (key == "ppo_epochs") c.ppo_epochs = value.get<int>();
        else if (key == "minibatches") c.minibatches = value.get<int>();
        else if (key == "clip_eps") c.clip_eps = value.get<double>();
        else if (key == "gamma") c.gamma = value.get<double>();
        else if (key == "lambda_gae") c.lambda_gae = value.get<double>();
        else if (key == "entropy_coef") c.entropy_coef = value.get<double>();
        else if (key == "value_coef") c.value_coef = value.get<double>();
        else if (key == "alpha") c.alpha = value.get<double>();
        else if (key == "lr") c.lr = value.get<double>();
        else if (key == "grad_clip") c.grad_clip = value.get<double>();
        else if (key == "total_steps") c.total_steps = value.get<int64_t>();
        else if (key == "eval_period") c.eval_period = value.get<int64_t>();
        else if (key == "eval_episodes") c.eval_episodes = value.get<int>();
        else if (key == "stop_sr") c.stop_sr = value.get<double>();
        else if (key == "success_reward") c.success_reward = value.get<double>();
        else if (key == "path_change") c.path_change = value.get<double>();
        else if (key == "step_penalty_obsnav")
          c.step_penalty_obsnav = value.get<double>();
        else if (key == "step_penalty_objplace")
          c.step_penalty_objplace = value.get<double>();
        else if (key == "success_radius") c.success_radius = value.get<double>();
        else if (key == "max_steps") c.max_steps = value.get<int>();
        else if (key == "image_size") c.image_size = value.get<int64_t>();
        else if (key == "color_channels")
          c.color_channels = value.get<std::vector<int64_t>>();
        else if (key == "depth_channels")
          c.depth_channels = value.get<std::vector<int64_t>>();
        else if (key == "v_dim") c.v_dim = value.get<int64_t>();
        else if (key == "goal_dim") c.goal_dim = value.get<int64_t>();
        else if (key == "gru_hidden") c.gru_hidden = value.get<int64_t>();
        else if (key == "categories") c.categories = value.get<int64_t>();
        else if (key == "obs_feat_dim") c.obs_feat_dim = value.get<int64_t>();
        else if (key == "kp_emb_dim") c.kp_emb_dim = value.get<int64_t>();
        else if (key == "emb_dim") c.emb_dim = value.get<int64_t>();
        else if (key == "nie_hidden") c.nie_hidden = value.get<int64_t>();
        else if (key == "state_dim") c.state_dim = value.get<int64_t>();
        else if (key == "attn_dim") c.attn_dim = value.get<int64_t>();
        else if (key == "out_dim") c.out_dim = value.get<int64_t>();
        else if (key == "depth_pool") c.depth_pool = value.get<int64_t>();
        else if (key == "min_cells_w") c.min_cells_w = value.get<int>();
        else if (key == "max_cells_w") c.max_cells_w = value.get<int>();
        else if (key == "min_cells_h") c.min_cells_h = value.get<int>();
        else if (key == "max_cells_h") c.max_cells_h = value.get<int>();
        else if (key == "max_stub_walls") c.max_stub_walls = value.get<int>();
        else if (key == "max_clutter") c.max_clutter = value.get<int>();
        else if (key == "size_variant") c.size_variant = value.get<int>();
        else if (key == "max_attempts") c.max_attempts = value.get<int>();
        else if (key == "train_count") c.train_count = value.get<int>();
        else if (key == "val_count") c.val_count = value.get<int>();
        else if (key == "test_count") c.test_count = value.get<int>();
        else throw CliError("unknown configuration key '" + key + "'");
      } catch (const Json::exception&) {
        throw CliError("configuration key '" + key + "' has the wrong type");
      }
    }
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw CliError("cannot open config file: " + path);
    Json j;
    try {
      is >> j;
    } catch (const Json::exception& e) {
      throw CliError("config file " + path + " is not valid JSON: " + e.what());
    }
    return from_json(j);
  }

  Task task_enum() const { return task_from_name(task == "pointgoal" ? "obsnav" : task); }

  TrainConfig train_config() const {
    TrainConfig t;
    t.variant = variant_from_name(variant);
    t.workers = workers;
    t.horizon = horizon;
    t.ppo_epochs = ppo_epochs;
    t.minibatches = minibatches;
    t.clip_eps = clip_eps;
    t.gamma = gamma;
    t.lambda_gae = lambda_gae;
    t.entropy_coef = entropy_coef;
    t.value_coef = value_coef;
    t.alpha = alpha;
    t.lr = lr;
    t.grad_clip = grad_clip;
    t.total_steps = total_steps;
    t.eval_period = eval_period;
    t.eval_episodes = eval_episodes;
    t.stop_sr = stop_sr;
    t.seed = seed;
    return t;
  }

  RewardConfig reward_config() const {
    RewardConfig r;
    r.success_reward = success_reward;
    r.path_change = path_change;
    r.step_penalty_obsnav = step_penalty_obsnav;
    r.step_penalty_objplace = step_penalty_objplace;
    r.success_radius = success_radius;
    r.max_steps = max_steps;
    return r;
  }

  ModelConfig model_config() const {
    if (color_channels.size() != 3 || depth_channels.size() != 3)
      throw CliError("conv channel lists must have exactly three entries");
    ModelConfig m;
    m.policy.image_size = image_size;
    for (size_t i = 0; i < 3; ++i) {
      m.policy.color_channels[i] = color_channels[i];
      m.policy.depth_channels[i] = depth_channels[i];
    }
    m.policy.v_dim = v_dim;
    m.policy.goal_dim = goal_dim;
    m.policy.hidden = gru_hidden;
    m.policy.num_actions = kNumActions;
    m.policy.num_categories = categories;
    m.nie.num_categories = categories;
    m.nie.num_actions = kNumActions;
    m.nie.obs_feat_dim = obs_feat_dim;
    m.nie.kp_emb_dim = kp_emb_dim;
    m.nie.emb_dim = emb_dim;
    m.nie.hidden = nie_hidden;
    m.nie.state_dim = state_dim;
    m.nie.attn_dim = attn_dim;
    m.nie.out_dim = out_dim;
    m.policy.repr_dim = m.nie.ra_flat_dim();
    m.depth_pool = depth_pool;
    return m;
  }

  GenConfig gen_config() const {
    GenConfig g;
    g.min_cells_w = min_cells_w;
    g.max_cells_w = max_cells_w;
    g.min_cells_h = min_cells_h;
    g.max_cells_h = max_cells_h;
    g.max_stub_walls = max_stub_walls;
    g.max_clutter = max_clutter;
    g.num_categories = static_cast<int>(categories);
    g.size_variant = size_variant;
    g.max_attempts = max_attempts;
    g.params.render_size = static_cast<int>(image_size);
    return g;
  }

  std::string dataset_path(const std::string& which_split) const {
    return data_dir + "/" + task + "_" + which_split + ".json";
  }
};

// ----- Dataset generation -----------------------------------------------------------------

inline uint64_t split_seed_base(const std::string& split, uint64_t seed) {
  if (split == "train") return seed;
  if (split == "val") return seed + 1'000'000;
  if (split == "test") return seed + 2'000'000;
  throw CliError("unknown split '" + split + "' (expected train, val, or test)");
}

inline int default_split_count(const std::string& split, const RunConfig& cfg) {
  if (split == "train") return cfg.train_count;
  if (split == "val") return cfg.val_count;
  if (split == "test") return cfg.test_count;
  throw CliError("unknown split '" + split + "' (expected train, val, or test)");
}

inline std::vector<Episode> generate_split(const RunConfig& cfg,
                                           const std::string& split, int count) {
  const GenConfig g = cfg.gen_config();
  const uint64_t base = split_seed_base(split, cfg.seed);
  std::vector<Episode> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const uint64_t s = base + static_cast<uint64_t>(i);
    if (cfg.task == "obsnav") out.push_back(gen_obsnav(s, g));
    else if (cfg.task == "objplace") out.push_back(gen_objplace(s, g));
    else if (cfg.task == "pointgoal") out.push_back(gen_pointgoal(s, g));
    else throw CliError("unknown task '" + cfg.task + "'");
  }
  return out;
}

// ----- Image emission ------------------------------------------------------------------------

inline void write_ppm(const std::string& path, int width, int height,
                      const std::vector<uint8_t>& rgb) {
  if (rgb.size() != static_cast<size_t>(width) * static_cast<size_t>(height) * 3)
    throw CliError("pixel buffer does not match the image size");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CliError("cannot open image for writing: " + path);
  os << "P6\n" << width << " " << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(rgb.data()),
           static_cast<std::streamsize>(rgb.size()));
  if (!os) throw CliError("image write failed: " + path);
}

namespace detail {

inline uint8_t to_byte(double v) {
  if (v <= 0.0) return 0;
  if (v >= 1.0) return 255;
  return static_cast<uint8_t>(v * 255.0 + 0.5);
}

}  // namespace detail

inline std::vector<uint8_t> color_image(const Observation& o) {
  const size_t hw = static_cast<size_t>(o.width) * static_cast<size_t>(o.height);
  std::vector<uint8_t> rgb(hw * 3);
  for (size_t i = 0; i < hw; ++i)
    for (size_t ch = 0; ch < 3; ++ch)
      rgb[i * 3 + ch] = detail::to_byte(o.color[static_cast<int64_t>(ch * hw + i)]);
  return rgb;
}

inline std::vector<uint8_t> depth_image(const Observation& o, double far_depth) {
  const size_t hw = static_cast<size_t>(o.width) * static_cast<size_t>(o.height);
  std::vector<uint8_t> rgb(hw * 3);
  for (size_t i = 0; i < hw; ++i) {
    const uint8_t v =
        detail::to_byte(o.depth[static_cast<int64_t>(i)] / far_depth);
    rgb[i * 3] = rgb[i * 3 + 1] = rgb[i * 3 + 2] = v;
  }
  return rgb;
}

inline std::vector<uint8_t> segmentation_image(const Observation& o) {
  const size_t hw = static_cast<size_t>(o.width) * static_cast<size_t>(o.height);
  std::vector<uint8_t> rgb(hw * 3);
  for (size_t i = 0; i < hw; ++i) {
    const Rgb c = category_color(o.category[i]);
    rgb[i * 3] = detail::to_byte(c.r);
    rgb[i * 3 + 1] = detail::to_byte(c.g);
    rgb[i * 3 + 2] = detail::to_byte(c.b);
  }
  return rgb;
}

// Color frame with a cross marking every lifted keypoint, tinted by category.
inline std::vector<uint8_t> keypoint_image(const Observation& o,
                                           const KeypointSet& kp,
                                           const CameraModel& cam) {
  std::vector<uint8_t> rgb = color_image(o);
  auto paint = [&](int u, int v, const Rgb& c) {
    if (u < 0 || u >= o.width || v < 0 || v >= o.height) return;
    const size_t i = (static_cast<size_t>(v) * static_cast<size_t>(o.width) +
                      static_cast<size_t>(u)) * 3;
    rgb[i] = detail::to_byte(c.r);
    rgb[i + 1] = detail::to_byte(c.g);
    rgb[i + 2] = detail::to_byte(c.b);
  };
  for (int c = 0; c < kp.num_categories; ++c) {
    if (!kp.present[static_cast<size_t>(c)]) continue;
    const Rgb tint = category_color(c);
    for (int k = 0; k < kNumKeypoints; ++k) {
      const Vec3& p = kp.points[static_cast<size_t>(c)][static_cast<size_t>(k)];
      if (!(p.z > 0)) continue;
      const PixelDepth px = project(p, cam);
      const int u = static_cast<int>(std::lround(px.u));
      const int v = static_cast<int>(std::lround(px.v));
      paint(u, v, tint);
      paint(u - 1, v, tint);
      paint(u + 1, v, tint);
      paint(u, v - 1, tint);
      paint(u, v + 1, tint);
    }
  }
  return rgb;
}

// ----- Trajectory replay ----------------------------------------------------------------------

struct TrajRow {
  int64_t episode = 0, step = 0;
  int action = 0;
  std::string reward, distance;  // kept verbatim for bitwise comparison
};

inline std::vector<TrajRow> read_trajectory_log(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw CliError("cannot open trajectory log: " + path);
  std::string line;
  if (!std::getline(is, line) || line != "episode,step,action,reward,distance")
    throw CliError(path + " does not look like a trajectory log");
  std::vector<TrajRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    TrajRow row;
    std::string field;
    if (!std::getline(ss, field, ',')) throw CliError("bad trajectory row: " + line);
    row.episode = std::stoll(field);
    if (!std::getline(ss, field, ',')) throw CliError("bad trajectory row: " + line);
    row.step = std::stoll(field);
    if (!std::getline(ss, field, ',')) throw CliError("bad trajectory row: " + line);
    row.action = std::stoi(field);
    if (!std::getline(ss, row.reward, ','))
      throw CliError("bad trajectory row: " + line);
    if (!std::getline(ss, row.distance))
      throw CliError("bad trajectory row: " + line);
    rows.push_back(std::move(row));
  }
  return rows;
}

struct ReplayResult {
  int64_t steps = 0;
  std::string csv_path;
};

// Re-simulates one logged episode action by action, writing the four frame
// images per step and a rewards CSV whose rows must match the original log.
inline ReplayResult replay_trajectory(const std::string& traj_path,
                                      int64_t episode_index,
                                      const std::vector<Episode>& episodes,
                                      const RewardConfig& rcfg,
                                      int num_categories,
                                      const std::string& out_dir) {
  const std::vector<TrajRow> all = read_trajectory_log(traj_path);
  std::vector<TrajRow> rows;
  for (const TrajRow& r : all)
    if (r.episode == episode_index) rows.push_back(r);
  if (rows.empty())
    throw CliError("trajectory log has no rows for episode " +
                   std::to_string(episode_index));
  if (episode_index < 0 ||
      episode_index >= static_cast<int64_t>(episodes.size()))
    throw CliError("episode index " + std::to_string(episode_index) +
                   " outside the dataset (" + std::to_string(episodes.size()) +
                   " episodes)");

  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const Episode& ep = episodes[static_cast<size_t>(episode_index)];
  WorldState s = ep.scene;

  std::ofstream csv(out_dir + "/rewards.csv");
  if (!csv) throw CliError("cannot open rewards CSV in " + out_dir);
  csv << "episode,step,action,reward,distance\n";

  char name[64];
  for (size_t i = 0; i < rows.size(); ++i) {
    const Observation o = observe(s);
    const CameraModel cam = agent_camera(s);
    const KeypointSet kp = lift_keypoints(o, cam, num_categories);
    std::snprintf(name, sizeof name, "/frame_%05zu", i);
    const std::string stem = out_dir + name;
    write_ppm(stem + "_color.ppm", o.width, o.height, color_image(o));
    write_ppm(stem + "_depth.ppm", o.width, o.height,
              depth_image(o, s.params.far_depth));
    write_ppm(stem + "_seg.ppm", o.width, o.height, segmentation_image(o));
    write_ppm(stem + "_kp.ppm", o.width, o.height, keypoint_image(o, kp, cam));

    const Action a = static_cast<Action>(rows[i].action);
    auto [next, event] = step(s, a);
    const double r = compute_reward(ep, s, a, next, event, rcfg);
    s = std::move(next);
    csv << episode_index << "," << i << "," << rows[i].action << ","
        << detail::fmt_double(r) << ","
        << detail::fmt_double(success_distance(ep, s)) << "\n";
  }
  if (!csv) throw CliError("rewards CSV write failed");
  ReplayResult res;
  res.steps = static_cast<int64_t>(rows.size());
  res.csv_path = out_dir + "/rewards.csv";
  return res;
}

}  // namespace nie
