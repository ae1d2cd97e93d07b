#pragma once

// Clipped-surrogate policy optimization with generalized advantage estimation
// over lockstep simulator workers. The combined objective adds the
// interaction-prediction loss on top of the policy terms; baselines drop the
// representation or its supervision. One learner owns the parameter store;
// workers only produce observations and transitions.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nie/nie_model.hpp"
#include "nie/optim.hpp"
#include "nie/params.hpp"
#include "nie/policy.hpp"
#include "nie/render.hpp"
#include "nie/tasks.hpp"

namespace nie {

struct TrainError : std::runtime_error {
  explicit TrainError(const std::string& what) : std::runtime_error(what) {}
};

// ----- Configuration -------------------------------------------------------------------

enum class Variant { kNie, kPpo, kRgbdk };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kNie: return "nie";
    case Variant::kPpo: return "ppo";
    case Variant::kRgbdk: return "rgbdk";
  }
  throw TrainError("unknown model variant");
}

inline Variant variant_from_name(const std::string& name) {
  if (name == "nie") return Variant::kNie;
  if (name == "ppo") return Variant::kPpo;
  if (name == "rgbdk") return Variant::kRgbdk;
  throw TrainError("unknown model variant '" + name + "'");
}

struct TrainConfig {
  Variant variant = Variant::kNie;
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
  double stop_sr = -1.0;  // end training once eval SR reaches this; negative disables
  uint64_t seed = 1;

  int64_t steps_per_update() const {
    return static_cast<int64_t>(workers) * horizon;
  }
  int64_t num_updates() const { return total_steps / steps_per_update(); }

  void validate() const {
    if (workers < 1) throw TrainError("workers must be at least 1");
    if (horizon < 1) throw TrainError("rollout horizon must be at least 1");
    if (ppo_epochs < 1) throw TrainError("ppo epochs must be at least 1");
    if (minibatches < 1 || workers % minibatches != 0)
      throw TrainError("workers must split evenly into minibatches");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw TrainError("gamma must be in (0,1]");
    if (!(lambda_gae > 0.0 && lambda_gae <= 1.0))
      throw TrainError("lambda must be in (0,1]");
    if (!(clip_eps > 0.0)) throw TrainError("clip epsilon must be positive");
    if (alpha < 0.0) throw TrainError("alpha must be non-negative");
    if (!(lr > 0.0)) throw TrainError("learning rate must be positive");
    if (!(grad_clip > 0.0)) throw TrainError("gradient clip must be positive");
    if (entropy_coef < 0.0 || value_coef < 0.0)
      throw TrainError("loss coefficients must be non-negative");
    if (total_steps < steps_per_update())
      throw TrainError("total steps must cover at least one update");
    if (eval_period < steps_per_update())
      throw TrainError("eval period must cover at least one update");
    if (eval_episodes < 1) throw TrainError("eval episodes must be at least 1");
  }
};

// ----- Generalized advantage estimation ---------------------------------------------------

struct GaeResult {
  std::vector<double> advantages, returns;
};

// values carries one entry per step plus the bootstrap value of the state
// after the last step.
inline GaeResult compute_gae(const std::vector<double>& rewards,
                             const std::vector<double>& values,
                             const std::vector<uint8_t>& dones, double gamma,
                             double lambda) {
  const size_t steps = rewards.size();
  if (values.size() != steps + 1)
    throw TrainError("compute_gae needs one value per step plus a bootstrap");
  if (dones.size() != steps)
    throw TrainError("compute_gae needs one done flag per step");
  GaeResult out;
  out.advantages.assign(steps, 0.0);
  out.returns.assign(steps, 0.0);
  double running = 0.0;
  for (size_t i = steps; i-- > 0;) {
    const double mask = dones[i] ? 0.0 : 1.0;
    const double delta = rewards[i] + gamma * values[i + 1] * mask - values[i];
    running = delta + gamma * lambda * mask * running;
    out.advantages[i] = running;
    out.returns[i] = running + values[i];
  }
  return out;
}

// Shifts and scales to zero mean and unit standard deviation; returns the
// moments the batch had before normalization.
inline std::pair<double, double> normalize_advantages(std::vector<double>& xs) {
  if (xs.empty()) throw TrainError("cannot normalize an empty advantage batch");
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size());
  const double sd = std::sqrt(var);
  const double scale = 1.0 / std::max(sd, 1e-8);
  for (double& x : xs) x = (x - mean) * scale;
  return {mean, sd};
}

// ----- Model bundle ------------------------------------------------------------------------

struct ModelConfig {
  PolicyConfig policy;
  NieConfig nie;
  int depth_pool = 4;  // average-pooling factor feeding the interaction features

  int64_t pooled_side() const { return policy.image_size / depth_pool; }
  int64_t pooled_dim() const { return pooled_side() * pooled_side(); }

  void validate() const {
    if (depth_pool < 1 || policy.image_size % depth_pool != 0)
      throw TrainError("depth pooling must divide the image size");
    if (policy.num_actions != nie.num_actions)
      throw TrainError("policy and interaction engine disagree on actions");
    if (policy.num_categories != nie.num_categories)
      throw TrainError("policy and interaction engine disagree on categories");
    if (policy.repr_dim != nie.ra_flat_dim())
      throw TrainError("policy representation slot must fit the per-action rows");
  }
};

template <typename T>
struct ModelBundle {
  Variant variant = Variant::kNie;
  ModelConfig cfg;
  PolicyNetwork<T> policy;
  NieNetwork<T> nie;
  Linear<T> nie_obs;  // pooled depth -> interaction observation features

  bool uses_nie() const { return variant != Variant::kPpo; }

  static ModelBundle create(ParameterStore<T>& store, const ModelConfig& cfg,
                            Variant variant, std::mt19937_64& rng) {
    cfg.validate();
    ModelBundle m;
    m.variant = variant;
    m.cfg = cfg;
    m.policy = PolicyNetwork<T>::create(store, "policy", cfg.policy, rng);
    if (variant != Variant::kPpo) {
      m.nie = NieNetwork<T>::create(store, "nie", cfg.nie, rng);
      m.nie_obs = Linear<T>::create(store, "nie.obs", cfg.pooled_dim(),
                                    cfg.nie.obs_feat_dim, rng);
    }
    return m;
  }
};

// Compares parameter names and shapes; loaded checkpoints must match the
// model that is about to consume them.
template <typename T>
void verify_compatible(const ParameterStore<T>& expected,
                       const ParameterStore<T>& loaded) {
  if (expected.size() != loaded.size())
    throw TrainError("checkpoint holds " + std::to_string(loaded.size()) +
                     " parameters, the model expects " +
                     std::to_string(expected.size()));
  for (const auto& [name, e] : expected.entries()) {
    if (!loaded.has(name))
      throw TrainError("checkpoint is missing parameter '" + name + "'");
    if (!loaded.get(name).same_shape(e.value))
      throw TrainError("checkpoint shape mismatch for '" + name + "'");
  }
}

// ----- Observation assembly ------------------------------------------------------------------

// Goal reading relative to the agent: planar distance and signed heading,
// positive to the agent's right.
inline std::pair<double, double> goal_reading(const WorldState& s) {
  const Vec3 d = s.target - s.agent.position;
  const Vec3 f = azimuth_axis(s.agent.azimuth_deg);
  const Vec3 r = azimuth_axis((s.agent.azimuth_deg + 90) % 360);
  const double fwd = d.x * f.x + d.z * f.z;
  const double lat = d.x * r.x + d.z * r.z;
  return {std::hypot(d.x, d.z), std::atan2(lat, fwd)};
}

template <typename T>
struct ObsRow {
  Tensor<T> color;    // (1, 3, S, S)
  Tensor<T> depth;    // (1, 1, S, S), scaled by the far plane
  Tensor<T> pooled;   // (1, P*P) average-pooled scaled depth
  Tensor<T> goal;     // (1, 2)
  Tensor<T> kp;       // (1, C, 24)
  Tensor<T> present;  // (1, C)
  KeypointSet kpset;
  int64_t goal_cat = -1;
};

// Renders (stamping visibility on the state) and packs every policy input.
template <typename T>
ObsRow<T> observe_row(WorldState& s, const Episode& ep, const ModelConfig& mc) {
  const Observation o = observe(s);
  const int64_t S = mc.policy.image_size;
  if (o.width != S || o.height != S)
    throw TrainError("render size " + std::to_string(o.width) +
                     " does not match the policy image size " +
                     std::to_string(S));
  const int64_t C = mc.policy.num_categories;
  const double inv_far = 1.0 / s.params.far_depth;

  ObsRow<T> row;
  row.color = Tensor<T>({1, 3, S, S});
  for (int64_t i = 0; i < o.color.numel(); ++i)
    row.color[i] = static_cast<T>(o.color[i]);
  row.depth = Tensor<T>({1, 1, S, S});
  for (int64_t i = 0; i < o.depth.numel(); ++i)
    row.depth[i] = static_cast<T>(o.depth[i] * inv_far);

  const int64_t P = mc.pooled_side(), pool = mc.depth_pool;
  row.pooled = Tensor<T>({1, P * P});
  const double inv_cells = 1.0 / static_cast<double>(pool * pool);
  for (int64_t py = 0; py < P; ++py)
    for (int64_t px = 0; px < P; ++px) {
      double acc = 0.0;
      for (int64_t dy = 0; dy < pool; ++dy)
        for (int64_t dx = 0; dx < pool; ++dx)
          acc += o.depth[(py * pool + dy) * S + px * pool + dx];
      row.pooled[py * P + px] = static_cast<T>(acc * inv_cells * inv_far);
    }

  const auto [dist, heading] = goal_reading(s);
  row.goal = Tensor<T>({1, 2});
  row.goal[0] = static_cast<T>(dist);
  row.goal[1] = static_cast<T>(heading);

  row.kpset = lift_keypoints(o, agent_camera(s), static_cast<int>(C));
  row.kp = keypoints_tensor<T>(row.kpset).reshaped({1, C, kKpCoords});
  row.present = presence_tensor<T>(row.kpset).reshaped({1, C});
  row.goal_cat = ep.task == Task::kObjPlace ? target_category(ep) : -1;
  return row;
}

namespace detail {

template <typename T>
void copy_row(Tensor<T>& dst, int64_t row, const Tensor<T>& src) {
  const int64_t n = src.numel();
  T* out = dst.data() + row * n;
  for (int64_t i = 0; i < n; ++i) out[i] = src[i];
}

inline int sample_categorical(const float* p, int n, std::mt19937_64& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double cum = 0.0;
  for (int i = 0; i < n; ++i) {
    cum += static_cast<double>(p[i]);
    if (u < cum) return i;
  }
  return n - 1;
}

inline int sample_categorical(const double* p, int n, std::mt19937_64& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double cum = 0.0;
  for (int i = 0; i < n; ++i) {
    cum += p[i];
    if (u < cum) return i;
  }
  return n - 1;
}

inline int argmax_row(const std::vector<double>& xs) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(xs.size()); ++i)
    if (xs[static_cast<size_t>(i)] > xs[static_cast<size_t>(best)]) best = i;
  return best;
}

}  // namespace detail

// ----- Environment workers --------------------------------------------------------------------

// One worker owns one simulator instance and an episode-sampling stream; the
// collector advances all workers in lockstep.
template <typename T>
class EnvWorker {
 public:
  EnvWorker(const std::vector<Episode>* dataset, RewardConfig rcfg, uint64_t seed)
      : dataset_(dataset), rcfg_(rcfg), rng_(seed) {
    if (!dataset_ || dataset_->empty())
      throw TrainError("worker needs a non-empty episode dataset");
    reset();
  }

  const Episode& episode() const { return ep_; }
  WorldState& state() { return state_; }

  ObsRow<T> observe_now(const ModelConfig& mc) {
    return observe_row<T>(state_, ep_, mc);
  }

  struct StepOut {
    double reward = 0.0;
    bool done = false;
    bool success = false;
    Tensor<T> nie_target;    // (C, 24) for categories observed before the step
    Tensor<T> nie_observed;  // (C)
  };

  // Applies the action, scores it, and derives the supervision targets from
  // the simulator's rigid motion. Resets into a fresh episode when done.
  StepOut step(Action a, const KeypointSet& kp_t, int64_t num_categories) {
    const CameraModel cam_t = agent_camera(state_);
    auto [next, event] = nie::step(state_, a);
    const CameraModel cam_t1 = agent_camera(next);

    StepOut out;
    out.reward = compute_reward(ep_, state_, a, next, event, rcfg_);
    out.nie_target = Tensor<T>({num_categories, kKpCoords});
    out.nie_observed = Tensor<T>({num_categories});
    for (int64_t c = 0; c < num_categories; ++c) {
      if (!kp_t.present[static_cast<size_t>(c)]) continue;
      const int64_t id = kp_t.instances[static_cast<size_t>(c)];
      const ObjectInstance* before = state_.find_object(id);
      const ObjectInstance* after = next.find_object(id);
      if (!before || !after)
        throw TrainError("tracked object vanished during a step");
      const Affine4 m =
          ground_truth_affine(before->pose, after->pose, cam_t, cam_t1);
      for (int k = 0; k < kNumKeypoints; ++k) {
        const Vec3 p =
            m.transform_point(kp_t.points[static_cast<size_t>(c)][static_cast<size_t>(k)]);
        T* dst = out.nie_target.data() + c * kKpCoords + k * 3;
        dst[0] = static_cast<T>(p.x);
        dst[1] = static_cast<T>(p.y);
        dst[2] = static_cast<T>(p.z);
      }
      out.nie_observed[c] = T(1);
    }

    ++steps_;
    out.done = next.done || steps_ >= rcfg_.max_steps;
    out.success = is_success(ep_, next, a == Action::kEnd, rcfg_);
    state_ = std::move(next);
    if (out.done) reset();
    return out;
  }

 private:
  void reset() {
    const int i = detail::rand_int(
        rng_, 0, static_cast<int>(dataset_->size()) - 1);
    ep_ = (*dataset_)[static_cast<size_t>(i)];
    state_ = ep_.scene;
    steps_ = 0;
  }

  const std::vector<Episode>* dataset_;
  RewardConfig rcfg_;
  std::mt19937_64 rng_;
  Episode ep_;
  WorldState state_;
  int64_t steps_ = 0;
};

// ----- Rollout storage -----------------------------------------------------------------------

template <typename T>
struct RolloutBuffer {
  int64_t workers = 0, horizon = 0;
  // per timestep, stacked over workers
  std::vector<Tensor<T>> color, depth, pooled, goal, kp, present;
  std::vector<std::vector<int64_t>> goal_cats;  // empty when the task has none
  std::vector<std::vector<int64_t>> actions;
  std::vector<std::vector<double>> old_logp, values, rewards;
  std::vector<std::vector<uint8_t>> dones;
  std::vector<Tensor<T>> nie_target, nie_observed;
  Tensor<T> hidden0;              // recurrent state entering the segment
  std::vector<double> bootstrap;  // value of the post-segment states

  void check_full() const {
    const size_t h = static_cast<size_t>(horizon);
    if (color.size() != h || depth.size() != h || pooled.size() != h ||
        goal.size() != h || kp.size() != h || present.size() != h ||
        actions.size() != h || old_logp.size() != h || values.size() != h ||
        rewards.size() != h || dones.size() != h || nie_target.size() != h ||
        nie_observed.size() != h ||
        bootstrap.size() != static_cast<size_t>(workers))
      throw TrainError("rollout buffer sequences disagree on the horizon");
  }
};

// Single-timestep batched forward shared by acting and evaluation.
template <typename T>
PolicyOut<T> policy_step(Tape<T>& tape, ParameterStore<T>& store,
                         const ModelBundle<T>& model, const Tensor<T>& color,
                         const Tensor<T>& depth, const Tensor<T>& pooled,
                         const Tensor<T>& goal,
                         const std::vector<int64_t>& goal_cats,
                         const Tensor<T>& kp, const Tensor<T>& present,
                         const Tensor<T>& hidden) {
  const int64_t n = color.dim(0);
  Var<T> v = model.policy.encode_visual(tape, store, tape.input(color.clone()),
                                        tape.input(depth.clone()));
  Var<T> g =
      model.policy.encode_goal(tape, store, tape.input(goal.clone()), goal_cats);
  Var<T> repr;
  if (model.uses_nie()) {
    Var<T> obs_feat =
        model.nie_obs.apply(tape, store, tape.input(pooled.clone()));
    repr = nie_forward(tape, store, model.nie, tape.input(kp.clone()), present,
                       obs_feat)
               .ra;
  } else {
    repr = tape.input(Tensor<T>({n, model.cfg.policy.repr_dim}, T(0)));
  }
  return model.policy.forward(tape, store, v, g, repr, tape.input(hidden.clone()));
}

struct RolloutStats {
  double reward_sum = 0.0;
  int64_t episodes = 0, successes = 0;
};

// Advances every worker `horizon` steps under the sampling policy, recording
// everything the update consumes. `hidden` carries recurrent state across
// segments and is masked on episode boundaries.
template <typename T>
RolloutBuffer<T> collect_rollout(ParameterStore<T>& store,
                                 const ModelBundle<T>& model,
                                 std::vector<EnvWorker<T>>& workers,
                                 Tensor<T>& hidden, int horizon,
                                 std::mt19937_64& act_rng,
                                 RolloutStats* stats = nullptr) {
  const int64_t N = static_cast<int64_t>(workers.size());
  const ModelConfig& mc = model.cfg;
  const int64_t S = mc.policy.image_size, C = mc.policy.num_categories;
  const int64_t A = mc.policy.num_actions, P2 = mc.pooled_dim();

  RolloutBuffer<T> buf;
  buf.workers = N;
  buf.horizon = horizon;
  buf.hidden0 = hidden.clone();

  for (int t = 0; t < horizon; ++t) {
    Tensor<T> color({N, 3, S, S}), depth({N, 1, S, S}), pooled({N, P2});
    Tensor<T> goal({N, 2}), kp({N, C, kKpCoords}), present({N, C});
    std::vector<int64_t> gcats;
    std::vector<KeypointSet> kpsets(static_cast<size_t>(N));
    for (int64_t i = 0; i < N; ++i) {
      ObsRow<T> row = workers[static_cast<size_t>(i)].observe_now(mc);
      detail::copy_row(color, i, row.color);
      detail::copy_row(depth, i, row.depth);
      detail::copy_row(pooled, i, row.pooled);
      detail::copy_row(goal, i, row.goal);
      detail::copy_row(kp, i, row.kp);
      detail::copy_row(present, i, row.present);
      kpsets[static_cast<size_t>(i)] = std::move(row.kpset);
      if (row.goal_cat >= 0) gcats.push_back(row.goal_cat);
    }
    if (!gcats.empty() && static_cast<int64_t>(gcats.size()) != N)
      throw TrainError("workers disagree on goal categories");

    Tape<T> tape(false);
    PolicyOut<T> po = policy_step(tape, store, model, color, depth, pooled,
                                  goal, gcats, kp, present, hidden);
    const Tensor<T>& probs = tape.softmax(po.logits).value();
    const Tensor<T>& logp = tape.log_softmax(po.logits).value();

    std::vector<int64_t> actions(static_cast<size_t>(N));
    std::vector<double> old_lp(static_cast<size_t>(N)),
        values(static_cast<size_t>(N)), rewards(static_cast<size_t>(N));
    std::vector<uint8_t> dones(static_cast<size_t>(N));
    Tensor<T> tgt({N, C, kKpCoords}), obsv({N, C});
    for (int64_t i = 0; i < N; ++i) {
      const int a =
          detail::sample_categorical(probs.data() + i * A, static_cast<int>(A),
                                     act_rng);
      actions[static_cast<size_t>(i)] = a;
      old_lp[static_cast<size_t>(i)] = static_cast<double>(logp[i * A + a]);
      values[static_cast<size_t>(i)] = static_cast<double>(po.value.value()[i]);
      auto so = workers[static_cast<size_t>(i)].step(
          static_cast<Action>(a), kpsets[static_cast<size_t>(i)], C);
      rewards[static_cast<size_t>(i)] = so.reward;
      dones[static_cast<size_t>(i)] = so.done ? 1 : 0;
      detail::copy_row(tgt, i, so.nie_target);
      detail::copy_row(obsv, i, so.nie_observed);
      if (stats) {
        stats->reward_sum += so.reward;
        if (so.done) {
          ++stats->episodes;
          if (so.success) ++stats->successes;
        }
      }
    }

    const Tensor<T>& h_next = po.hidden.value();
    for (int64_t i = 0; i < N; ++i) {
      const T keep = dones[static_cast<size_t>(i)] ? T(0) : T(1);
      for (int64_t j = 0; j < hidden.dim(1); ++j)
        hidden[i * hidden.dim(1) + j] = keep * h_next[i * hidden.dim(1) + j];
    }

    buf.color.push_back(std::move(color));
    buf.depth.push_back(std::move(depth));
    buf.pooled.push_back(std::move(pooled));
    buf.goal.push_back(std::move(goal));
    buf.kp.push_back(std::move(kp));
    buf.present.push_back(std::move(present));
    buf.goal_cats.push_back(std::move(gcats));
    buf.actions.push_back(std::move(actions));
    buf.old_logp.push_back(std::move(old_lp));
    buf.values.push_back(std::move(values));
    buf.rewards.push_back(std::move(rewards));
    buf.dones.push_back(std::move(dones));
    buf.nie_target.push_back(std::move(tgt));
    buf.nie_observed.push_back(std::move(obsv));
  }

  // bootstrap values for the states the segment stopped in
  {
    Tensor<T> color({N, 3, S, S}), depth({N, 1, S, S}), pooled({N, P2});
    Tensor<T> goal({N, 2}), kp({N, C, kKpCoords}), present({N, C});
    std::vector<int64_t> gcats;
    for (int64_t i = 0; i < N; ++i) {
      ObsRow<T> row = workers[static_cast<size_t>(i)].observe_now(mc);
      detail::copy_row(color, i, row.color);
      detail::copy_row(depth, i, row.depth);
      detail::copy_row(pooled, i, row.pooled);
      detail::copy_row(goal, i, row.goal);
      detail::copy_row(kp, i, row.kp);
      detail::copy_row(present, i, row.present);
      if (row.goal_cat >= 0) gcats.push_back(row.goal_cat);
    }
    Tape<T> tape(false);
    PolicyOut<T> po = policy_step(tape, store, model, color, depth, pooled,
                                  goal, gcats, kp, present, hidden);
    buf.bootstrap.resize(static_cast<size_t>(N));
    for (int64_t i = 0; i < N; ++i)
      buf.bootstrap[static_cast<size_t>(i)] =
          static_cast<double>(po.value.value()[i]);
  }

  buf.check_full();
  return buf;
}

// ----- The update ------------------------------------------------------------------------------

template <typename T>
struct LossReport {
  double policy_loss = 0.0, value_loss = 0.0, entropy = 0.0, nie_loss = 0.0;
  double total = 0.0, grad_norm = 0.0;
  double adv_mean = 0.0, adv_std = 0.0;  // before normalization
  double norm_mean = 0.0, norm_std = 0.0;  // after normalization
};

namespace detail {

// One minibatch of worker trajectories flattened t-major for batched
// encoding; small per-step slices drive the recurrent loop.
template <typename T>
struct Minibatch {
  int64_t n = 0, horizon = 0;
  Tensor<T> color, depth, pooled, goal, kp, present, target, observed;
  std::vector<int64_t> goal_cats, a_star;
  Tensor<T> h0;
  std::vector<Tensor<T>> onehots, advs, rets, old_lps, keep_masks;
};

template <typename T>
Minibatch<T> slice_minibatch(const RolloutBuffer<T>& buf,
                             const std::vector<int>& ws,
                             const std::vector<double>& adv_flat,
                             const std::vector<double>& ret_flat,
                             int64_t num_actions) {
  const int64_t n = static_cast<int64_t>(ws.size());
  const int64_t H = buf.horizon, N = buf.workers;
  const int64_t S = buf.color[0].dim(2), C = buf.kp[0].dim(1);
  const int64_t P2 = buf.pooled[0].dim(1);

  Minibatch<T> mb;
  mb.n = n;
  mb.horizon = H;
  mb.color = Tensor<T>({H * n, 3, S, S});
  mb.depth = Tensor<T>({H * n, 1, S, S});
  mb.pooled = Tensor<T>({H * n, P2});
  mb.goal = Tensor<T>({H * n, 2});
  mb.kp = Tensor<T>({H * n, C, kKpCoords});
  mb.present = Tensor<T>({H * n, C});
  mb.target = Tensor<T>({H * n, C, kKpCoords});
  mb.observed = Tensor<T>({H * n, C});
  mb.h0 = Tensor<T>({n, buf.hidden0.dim(1)});
  mb.a_star.resize(static_cast<size_t>(H * n));

  auto pick = [&](Tensor<T>& dst, const std::vector<Tensor<T>>& src, int64_t t,
                  int64_t j, int w) {
    const int64_t numel = src[static_cast<size_t>(t)].numel() / N;
    const T* from = src[static_cast<size_t>(t)].data() + w * numel;
    T* to = dst.data() + (t * n + j) * numel;
    for (int64_t i = 0; i < numel; ++i) to[i] = from[i];
  };

  for (int64_t j = 0; j < n; ++j) {
    const int w = ws[static_cast<size_t>(j)];
    const int64_t hd = buf.hidden0.dim(1);
    for (int64_t i = 0; i < hd; ++i)
      mb.h0[j * hd + i] = buf.hidden0[w * hd + i];
  }

  for (int64_t t = 0; t < H; ++t) {
    Tensor<T> onehot({n, num_actions}, T(0));
    Tensor<T> adv({n}), ret({n}), old_lp({n}), keep({n, 1});
    for (int64_t j = 0; j < n; ++j) {
      const int w = ws[static_cast<size_t>(j)];
      pick(mb.color, buf.color, t, j, w);
      pick(mb.depth, buf.depth, t, j, w);
      pick(mb.pooled, buf.pooled, t, j, w);
      pick(mb.goal, buf.goal, t, j, w);
      pick(mb.kp, buf.kp, t, j, w);
      pick(mb.present, buf.present, t, j, w);
      pick(mb.target, buf.nie_target, t, j, w);
      pick(mb.observed, buf.nie_observed, t, j, w);
      if (!buf.goal_cats[static_cast<size_t>(t)].empty())
        mb.goal_cats.push_back(
            buf.goal_cats[static_cast<size_t>(t)][static_cast<size_t>(w)]);
      const int64_t act =
          buf.actions[static_cast<size_t>(t)][static_cast<size_t>(w)];
      mb.a_star[static_cast<size_t>(t * n + j)] = act;
      onehot[j * num_actions + act] = T(1);
      adv[j] = static_cast<T>(adv_flat[static_cast<size_t>(t * N + w)]);
      ret[j] = static_cast<T>(ret_flat[static_cast<size_t>(t * N + w)]);
      old_lp[j] = static_cast<T>(
          buf.old_logp[static_cast<size_t>(t)][static_cast<size_t>(w)]);
      keep[j] =
          buf.dones[static_cast<size_t>(t)][static_cast<size_t>(w)] ? T(0) : T(1);
    }
    mb.onehots.push_back(std::move(onehot));
    mb.advs.push_back(std::move(adv));
    mb.rets.push_back(std::move(ret));
    mb.old_lps.push_back(std::move(old_lp));
    mb.keep_masks.push_back(std::move(keep));
  }
  return mb;
}

}  // namespace detail

template <typename T>
struct MinibatchTerms {
  Var<T> total;
  double policy = 0.0, value = 0.0, entropy = 0.0, nie = 0.0;
};

// Builds the clipped-surrogate objective plus value, entropy, and
// interaction-prediction terms over one minibatch, recurrent state threaded
// through time with resets on episode boundaries.
template <typename T>
MinibatchTerms<T> minibatch_loss(Tape<T>& tape, ParameterStore<T>& store,
                                 const ModelBundle<T>& model,
                                 const detail::Minibatch<T>& mb,
                                 double clip_eps, double value_coef,
                                 double entropy_coef, double alpha) {
  const int64_t n = mb.n, H = mb.horizon;
  const PolicyNetwork<T>& P = model.policy;

  Var<T> v_all = P.encode_visual(tape, store, tape.input(mb.color.clone()),
                                 tape.input(mb.depth.clone()));
  Var<T> g_all = P.encode_goal(tape, store, tape.input(mb.goal.clone()),
                               mb.goal_cats);
  Var<T> repr_all;
  NieOutput<T> nie_out;
  if (model.uses_nie()) {
    Var<T> obs_feat =
        model.nie_obs.apply(tape, store, tape.input(mb.pooled.clone()));
    nie_out = nie_forward(tape, store, model.nie, tape.input(mb.kp.clone()),
                          mb.present, obs_feat);
    repr_all = nie_out.ra;
  } else {
    repr_all =
        tape.input(Tensor<T>({H * n, model.cfg.policy.repr_dim}, T(0)));
  }

  Var<T> h = tape.input(mb.h0.clone());
  Var<T> pol_acc, val_acc, ent_acc;
  for (int64_t t = 0; t < H; ++t) {
    std::vector<int64_t> rows(static_cast<size_t>(n));
    std::iota(rows.begin(), rows.end(), t * n);
    PolicyOut<T> po =
        P.forward(tape, store, tape.gather(v_all, rows),
                  tape.gather(g_all, rows), tape.gather(repr_all, rows), h);
    h = tape.mul(po.hidden,
                 tape.input(mb.keep_masks[static_cast<size_t>(t)].clone()));

    Var<T> lp = tape.log_softmax(po.logits);
    Var<T> lp_a = tape.sum_axis(
        tape.mul(lp, tape.input(mb.onehots[static_cast<size_t>(t)].clone())), 1);
    Var<T> ratio = tape.exp_(tape.sub(
        lp_a, tape.input(mb.old_lps[static_cast<size_t>(t)].clone())));
    Var<T> adv = tape.input(mb.advs[static_cast<size_t>(t)].clone());
    Var<T> surr = tape.minimum(
        tape.mul(ratio, adv),
        tape.mul(tape.clip(ratio, T(1.0 - clip_eps), T(1.0 + clip_eps)), adv));
    Var<T> pol_t = tape.sum_all(surr);

    Var<T> vdiff = tape.sub(
        tape.reshape(po.value, {n}),
        tape.input(mb.rets[static_cast<size_t>(t)].clone()));
    Var<T> val_t = tape.sum_all(tape.mul(vdiff, vdiff));
    Var<T> ent_t = tape.sum_all(tape.mul(tape.softmax(po.logits), lp));

    pol_acc = t == 0 ? pol_t : tape.add(pol_acc, pol_t);
    val_acc = t == 0 ? val_t : tape.add(val_acc, val_t);
    ent_acc = t == 0 ? ent_t : tape.add(ent_acc, ent_t);
  }

  const T inv = T(1) / static_cast<T>(H * n);
  Var<T> policy_loss = tape.affine(pol_acc, -inv, T(0));
  Var<T> value_loss = tape.affine(val_acc, inv, T(0));
  Var<T> plogp_mean = tape.affine(ent_acc, inv, T(0));  // negative entropy

  MinibatchTerms<T> terms;
  terms.policy = static_cast<double>(policy_loss.value()[0]);
  terms.value = static_cast<double>(value_loss.value()[0]);
  terms.entropy = -static_cast<double>(plogp_mean.value()[0]);

  Var<T> total = tape.add(
      tape.add(policy_loss, tape.affine(value_loss, T(value_coef), T(0))),
      tape.affine(plogp_mean, T(entropy_coef), T(0)));
  if (model.uses_nie()) {
    NieTarget<T> tgt{mb.target, mb.a_star, mb.observed};
    Var<T> nie_l = nie_loss(tape, nie_out, tgt);
    terms.nie = static_cast<double>(nie_l.value()[0]);
    if (alpha != 0.0)
      total = tape.add(total, tape.affine(nie_l, T(alpha), T(0)));
  }
  terms.total = total;
  return terms;
}

// GAE, advantage normalization, then several epochs of minibatch updates.
// Throws with a diagnostic dump if any loss component leaves the reals.
template <typename T>
LossReport<T> ppo_update(ParameterStore<T>& store, const ModelBundle<T>& model,
                         const RolloutBuffer<T>& buf, const TrainConfig& cfg,
                         double lr, std::mt19937_64& shuffle_rng) {
  buf.check_full();
  const int64_t N = buf.workers, H = buf.horizon;

  std::vector<double> adv_flat(static_cast<size_t>(H * N)),
      ret_flat(static_cast<size_t>(H * N));
  for (int64_t w = 0; w < N; ++w) {
    std::vector<double> rewards(static_cast<size_t>(H)),
        values(static_cast<size_t>(H + 1));
    std::vector<uint8_t> dones(static_cast<size_t>(H));
    for (int64_t t = 0; t < H; ++t) {
      rewards[static_cast<size_t>(t)] =
          buf.rewards[static_cast<size_t>(t)][static_cast<size_t>(w)];
      values[static_cast<size_t>(t)] =
          buf.values[static_cast<size_t>(t)][static_cast<size_t>(w)];
      dones[static_cast<size_t>(t)] =
          buf.dones[static_cast<size_t>(t)][static_cast<size_t>(w)];
    }
    values[static_cast<size_t>(H)] = buf.bootstrap[static_cast<size_t>(w)];
    const GaeResult g = compute_gae(rewards, values, dones, cfg.gamma,
                                    cfg.lambda_gae);
    for (int64_t t = 0; t < H; ++t) {
      adv_flat[static_cast<size_t>(t * N + w)] =
          g.advantages[static_cast<size_t>(t)];
      ret_flat[static_cast<size_t>(t * N + w)] =
          g.returns[static_cast<size_t>(t)];
    }
  }

  LossReport<T> rep;
  {
    const auto [mean, sd] = normalize_advantages(adv_flat);
    rep.adv_mean = mean;
    rep.adv_std = sd;
    double m = 0.0, v = 0.0;
    for (double a : adv_flat) m += a;
    m /= static_cast<double>(adv_flat.size());
    for (double a : adv_flat) v += (a - m) * (a - m);
    rep.norm_mean = m;
    rep.norm_std = std::sqrt(v / static_cast<double>(adv_flat.size()));
  }

  std::vector<int> order(static_cast<size_t>(N));
  std::iota(order.begin(), order.end(), 0);
  const int per_mb = static_cast<int>(N) / cfg.minibatches;
  const AdamConfig<T> adam{static_cast<T>(lr), T(0.9), T(0.999), T(1e-8)};

  int batches = 0;
  for (int epoch = 0; epoch < cfg.ppo_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (int b = 0; b < cfg.minibatches; ++b) {
      const std::vector<int> ws(order.begin() + b * per_mb,
                                order.begin() + (b + 1) * per_mb);
      auto mb = detail::slice_minibatch(buf, ws, adv_flat, ret_flat,
                                        model.cfg.policy.num_actions);
      Tape<T> tape;
      MinibatchTerms<T> terms =
          minibatch_loss(tape, store, model, mb, cfg.clip_eps, cfg.value_coef,
                         cfg.entropy_coef, cfg.alpha);
      const double total = static_cast<double>(terms.total.value()[0]);
      if (!std::isfinite(total) || !std::isfinite(terms.policy) ||
          !std::isfinite(terms.value) || !std::isfinite(terms.entropy) ||
          !std::isfinite(terms.nie)) {
        std::string who;
        for (int w : ws) who += std::to_string(w) + " ";
        throw TrainError(
            "non-finite loss (epoch " + std::to_string(epoch) + ", minibatch " +
            std::to_string(b) + ", workers " + who + "): policy=" +
            std::to_string(terms.policy) + " value=" +
            std::to_string(terms.value) + " entropy=" +
            std::to_string(terms.entropy) + " interaction=" +
            std::to_string(terms.nie));
      }
      tape.backward(terms.total);
      auto grads = tape.grads();
      rep.grad_norm =
          static_cast<double>(clip_gradients(grads, static_cast<T>(cfg.grad_clip)));
      adam_step(store, grads, adam);

      rep.policy_loss += terms.policy;
      rep.value_loss += terms.value;
      rep.entropy += terms.entropy;
      rep.nie_loss += terms.nie;
      rep.total += total;
      ++batches;
    }
  }
  const double inv = 1.0 / static_cast<double>(batches);
  rep.policy_loss *= inv;
  rep.value_loss *= inv;
  rep.entropy *= inv;
  rep.nie_loss *= inv;
  rep.total *= inv;
  return rep;
}

// ----- Evaluation ------------------------------------------------------------------------------

struct EvalTrajectory {
  uint64_t episode_seed = 0;
  std::vector<int> actions;
  std::vector<double> rewards, distances;
};

struct EvalOutcome {
  Metrics metrics;
  std::vector<EpisodeResult> results;
  std::vector<EvalTrajectory> trajectories;
};

// Greedy rollouts over a fixed episode list; deterministic for a given
// checkpoint, which makes logged trajectories replayable.
template <typename T>
EvalOutcome evaluate(ParameterStore<T>& store, const ModelBundle<T>& model,
                     const std::vector<Episode>& episodes,
                     const RewardConfig& rcfg) {
  if (episodes.empty()) throw TrainError("evaluation needs at least one episode");
  EvalOutcome out;
  const int64_t A = model.cfg.policy.num_actions;
  for (const Episode& ep : episodes) {
    WorldState s = ep.scene;
    Tensor<T> hidden({1, model.cfg.policy.hidden}, T(0));
    EvalTrajectory traj;
    traj.episode_seed = ep.seed;
    double path = 0.0;
    int64_t steps = 0;
    bool success = false;
    while (true) {
      ObsRow<T> row = observe_row<T>(s, ep, model.cfg);
      std::vector<int64_t> gcats;
      if (row.goal_cat >= 0) gcats.push_back(row.goal_cat);
      Tape<T> tape(false);
      PolicyOut<T> po =
          policy_step(tape, store, model, row.color, row.depth, row.pooled,
                      row.goal, gcats, row.kp, row.present, hidden);
      hidden = po.hidden.value().clone();
      std::vector<double> logits(static_cast<size_t>(A));
      for (int64_t a = 0; a < A; ++a)
        logits[static_cast<size_t>(a)] =
            static_cast<double>(po.logits.value()[a]);
      const int a = detail::argmax_row(logits);

      const Vec3 before = ep.task == Task::kObjPlace
                              ? s.find_object(ep.target_object_id)->pose.position
                              : s.agent.position;
      auto [next, event] = step(s, static_cast<Action>(a));
      const double r =
          compute_reward(ep, s, static_cast<Action>(a), next, event, rcfg);
      const Vec3 after = ep.task == Task::kObjPlace
                             ? next.find_object(ep.target_object_id)->pose.position
                             : next.agent.position;
      path += planar_distance(before, after);
      ++steps;
      traj.actions.push_back(a);
      traj.rewards.push_back(r);
      traj.distances.push_back(success_distance(ep, next));
      const bool done = next.done || steps >= rcfg.max_steps;
      if (static_cast<Action>(a) == Action::kEnd)
        success = is_success(ep, next, true, rcfg);
      s = std::move(next);
      if (done) break;
    }
    out.results.push_back(EpisodeResult{success, success_distance(ep, s), path,
                                        ep.optimal_length, steps});
    out.trajectories.push_back(std::move(traj));
  }
  out.metrics = compute_metrics(out.results);
  return out;
}

// ----- Training loop -----------------------------------------------------------------------------

struct TrainResult {
  Metrics final_metrics;
  int64_t updates = 0;
  int64_t env_steps = 0;
  std::string final_checkpoint;
};

namespace detail {

inline void write_line(std::ofstream& os, const std::string& line) {
  os << line << "\n";
  if (!os) throw TrainError("log write failed");
  os.flush();
}

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_trajectories(const std::string& path,
                               const std::vector<EvalTrajectory>& trajs) {
  std::ofstream os(path);
  if (!os) throw TrainError("cannot open trajectory log: " + path);
  os << "episode,step,action,reward,distance\n";
  for (size_t e = 0; e < trajs.size(); ++e) {
    const auto& tr = trajs[e];
    for (size_t t = 0; t < tr.actions.size(); ++t)
      os << e << "," << t << "," << tr.actions[t] << ","
         << fmt_double(tr.rewards[t]) << "," << fmt_double(tr.distances[t])
         << "\n";
  }
  if (!os) throw TrainError("trajectory log write failed: " + path);
}

}  // namespace detail

// Runs the full schedule: rollouts, updates with linearly decaying learning
// rate, periodic evaluation with trajectory logs and checkpoints. The echoed
// configuration document is copied verbatim into the run directory.
template <typename T>
TrainResult train_loop(const TrainConfig& tcfg, const ModelConfig& mcfg,
                       const std::vector<Episode>& train_eps,
                       const std::vector<Episode>& val_eps,
                       const RewardConfig& rcfg, const std::string& run_dir,
                       const Json& config_echo, std::ostream* progress = nullptr) {
  tcfg.validate();
  mcfg.validate();
  if (train_eps.empty()) throw TrainError("training dataset is empty");
  if (val_eps.empty()) throw TrainError("validation dataset is empty");

  namespace fs = std::filesystem;
  fs::create_directories(run_dir);
  {
    std::ofstream os(run_dir + "/config.json");
    if (!os) throw TrainError("cannot write config copy in " + run_dir);
    os << config_echo.dump(2) << "\n";
  }

  std::mt19937_64 master(tcfg.seed);
  ParameterStore<T> store;
  std::mt19937_64 init_rng(master());
  ModelBundle<T> model =
      ModelBundle<T>::create(store, mcfg, tcfg.variant, init_rng);

  std::vector<EnvWorker<T>> workers;
  workers.reserve(static_cast<size_t>(tcfg.workers));
  for (int i = 0; i < tcfg.workers; ++i)
    workers.emplace_back(&train_eps, rcfg, master());
  std::mt19937_64 act_rng(master()), shuffle_rng(master());

  Tensor<T> hidden({tcfg.workers, mcfg.policy.hidden}, T(0));
  const LinearDecay<double> decay{tcfg.lr, tcfg.num_updates()};

  std::ofstream train_log(run_dir + "/train_log.csv");
  std::ofstream eval_log(run_dir + "/eval_log.csv");
  if (!train_log || !eval_log)
    throw TrainError("cannot open training logs in " + run_dir);
  detail::write_line(train_log,
                     "step,lr,reward_mean,train_sr,policy_loss,value_loss,"
                     "entropy,nie_loss,total_loss,grad_norm");
  detail::write_line(eval_log, "step,sr,fdt,spl");

  const std::vector<Episode> val_slice(
      val_eps.begin(),
      val_eps.begin() + std::min<size_t>(val_eps.size(),
                                         static_cast<size_t>(tcfg.eval_episodes)));

  TrainResult result;
  const int64_t spu = tcfg.steps_per_update();
  const int64_t updates = tcfg.num_updates();
  auto run_eval = [&](int64_t step) {
    EvalOutcome ev = evaluate(store, model, val_slice, rcfg);
    detail::write_line(eval_log, std::to_string(step) + "," +
                                     detail::fmt_double(ev.metrics.sr) + "," +
                                     detail::fmt_double(ev.metrics.fdt) + "," +
                                     detail::fmt_double(ev.metrics.spl));
    char name[64];
    std::snprintf(name, sizeof name, "/ckpt_%010lld.bin",
                  static_cast<long long>(step));
    save_checkpoint(store, run_dir + name);
    std::snprintf(name, sizeof name, "/traj_%010lld.csv",
                  static_cast<long long>(step));
    detail::write_trajectories(run_dir + name, ev.trajectories);
    if (progress)
      *progress << "eval step " << step << " sr " << ev.metrics.sr << " fdt "
                << ev.metrics.fdt << " spl " << ev.metrics.spl << std::endl;
    return ev.metrics;
  };

  Metrics last_metrics{};
  int64_t last_eval_step = -1;
  for (int64_t u = 0; u < updates; ++u) {
    RolloutStats stats;
    RolloutBuffer<T> buf = collect_rollout(store, model, workers, hidden,
                                           tcfg.horizon, act_rng, &stats);
    const double lr = decay.at(u);
    const LossReport<T> rep =
        ppo_update(store, model, buf, tcfg, lr, shuffle_rng);

    const int64_t step = (u + 1) * spu;
    const double reward_mean =
        stats.reward_sum / static_cast<double>(spu);
    const double train_sr =
        stats.episodes > 0
            ? 100.0 * static_cast<double>(stats.successes) /
                  static_cast<double>(stats.episodes)
            : 0.0;
    detail::write_line(
        train_log,
        std::to_string(step) + "," + detail::fmt_double(lr) + "," +
            detail::fmt_double(reward_mean) + "," +
            detail::fmt_double(train_sr) + "," +
            detail::fmt_double(rep.policy_loss) + "," +
            detail::fmt_double(rep.value_loss) + "," +
            detail::fmt_double(rep.entropy) + "," +
            detail::fmt_double(rep.nie_loss) + "," +
            detail::fmt_double(rep.total) + "," +
            detail::fmt_double(rep.grad_norm));
    if (progress && (u % 25 == 0 || u + 1 == updates))
      *progress << "update " << u + 1 << "/" << updates << " step " << step
                << " reward " << reward_mean << " loss " << rep.total
                << std::endl;

    result.updates = u + 1;
    result.env_steps = step;
    if ((step / tcfg.eval_period) > ((step - spu) / tcfg.eval_period)) {
      last_metrics = run_eval(step);
      last_eval_step = step;
      if (tcfg.stop_sr >= 0.0 && last_metrics.sr >= tcfg.stop_sr) break;
    }
  }

  if (last_eval_step != result.env_steps) last_metrics = run_eval(result.env_steps);
  result.final_metrics = last_metrics;
  result.final_checkpoint = run_dir + "/ckpt_final.bin";
  save_checkpoint(store, result.final_checkpoint);
  return result;
}

}  // namespace nie
