#pragma once

// Recurrent actor-critic. Color and depth pass through separate conv stacks
// fused into a visual feature v; the goal reading is embedded (optionally with
// a target-category embedding); v, the goal embedding g and an interaction
// representation are concatenated into a GRU whose state feeds the actor and
// critic heads. A zero interaction representation recovers the plain
// recurrent baseline, and encode_raw_keypoints provides the keypoints-only
// variant.

#include <array>
#include <string>
#include <vector>

#include "nie/autodiff.hpp"
#include "nie/nie_model.hpp"
#include "nie/nn.hpp"

namespace nie {

struct PolicyConfig {
  int64_t image_size = 64;
  std::array<int64_t, 3> color_channels = {16, 32, 64};
  std::array<int64_t, 3> depth_channels = {8, 16, 32};
  int64_t v_dim = 256;
  int64_t goal_dim = 32;
  int64_t repr_dim = 320;  // width of the interaction representation input
  int64_t hidden = 512;
  int64_t num_actions = kNumActions;
  int64_t num_categories = 8;

  static constexpr std::array<int64_t, 3> kKernels = {5, 3, 3};
  static constexpr std::array<int64_t, 3> kStrides = {2, 2, 2};
  static constexpr std::array<int64_t, 3> kPads = {2, 1, 1};

  int64_t conv_out_size() const {
    if (image_size < 1) throw TensorError("image size must be positive");
    int64_t s = image_size;
    for (int i = 0; i < 3; ++i)
      s = (s + 2 * kPads[static_cast<size_t>(i)] - kKernels[static_cast<size_t>(i)]) /
              kStrides[static_cast<size_t>(i)] +
          1;
    return s;
  }
  int64_t gru_in() const { return goal_dim + v_dim + repr_dim; }
};

template <typename T>
struct PolicyOut {
  Var<T> logits;  // (B, num_actions)
  Var<T> value;   // (B, 1)
  Var<T> hidden;  // (B, hidden)
};

template <typename T>
struct PolicyNetwork {
  PolicyConfig cfg;
  std::array<Conv2d<T>, 3> color_stack, depth_stack;
  Linear<T> fuse;
  Linear<T> goal_lin;
  std::string goal_cat_table;
  Linear<T> kp_lin;  // raw-keypoint path for the keypoints-only variant
  GRUCell<T> gru;
  Linear<T> actor, critic;

  static PolicyNetwork create(ParameterStore<T>& store, const std::string& prefix,
                              const PolicyConfig& cfg, std::mt19937_64& rng) {
    PolicyNetwork n;
    n.cfg = cfg;
    auto stack = [&](const char* name, int64_t in_ch,
                     const std::array<int64_t, 3>& ch) {
      std::array<Conv2d<T>, 3> s;
      for (int i = 0; i < 3; ++i) {
        s[static_cast<size_t>(i)] = Conv2d<T>::create(
            store, prefix + "." + name + std::to_string(i),
            i == 0 ? in_ch : ch[static_cast<size_t>(i - 1)],
            ch[static_cast<size_t>(i)], PolicyConfig::kKernels[static_cast<size_t>(i)],
            PolicyConfig::kStrides[static_cast<size_t>(i)],
            PolicyConfig::kPads[static_cast<size_t>(i)], rng);
      }
      return s;
    };
    n.color_stack = stack("cconv", 3, cfg.color_channels);
    n.depth_stack = stack("dconv", 1, cfg.depth_channels);
    const int64_t side = cfg.conv_out_size();
    const int64_t flat = side * side * (cfg.color_channels[2] + cfg.depth_channels[2]);
    n.fuse = Linear<T>::create(store, prefix + ".fuse", flat, cfg.v_dim, rng);
    n.goal_lin = Linear<T>::create(store, prefix + ".goal", 2, cfg.goal_dim, rng);
    n.goal_cat_table = prefix + ".goal_cat";
    store.add(n.goal_cat_table,
              detail::fan_in_uniform<T>({cfg.num_categories, cfg.goal_dim},
                                        cfg.goal_dim, T(1), rng));
    n.kp_lin = Linear<T>::create(
        store, prefix + ".kp",
        cfg.num_categories * (kKpCoords + 1), cfg.repr_dim, rng);
    n.gru = GRUCell<T>::create(store, prefix + ".gru", cfg.gru_in(), cfg.hidden, rng);
    n.actor = Linear<T>::create(store, prefix + ".actor", cfg.hidden,
                                cfg.num_actions, rng, T(0.01));
    n.critic = Linear<T>::create(store, prefix + ".critic", cfg.hidden, 1, rng);
    return n;
  }

  // color (B, 3, H, W) in [0,1]; depth (B, 1, H, W) normalized by the caller
  Var<T> encode_visual(Tape<T>& tape, ParameterStore<T>& store, Var<T> color,
                       Var<T> depth) const {
    Var<T> c = color, d = depth;
    for (const auto& conv : color_stack)
      c = tape.relu(conv.apply(tape, store, c));
    for (const auto& conv : depth_stack)
      d = tape.relu(conv.apply(tape, store, d));
    const int64_t b = c.value().dim(0);
    c = tape.reshape(c, {b, c.value().numel() / b});
    d = tape.reshape(d, {b, d.value().numel() / b});
    return tape.relu(fuse.apply(tape, store, tape.concat({c, d})));
  }

  // goal (B, 2): target displacement in the agent frame; target_cats add a
  // category embedding when the task names an object
  Var<T> encode_goal(Tape<T>& tape, ParameterStore<T>& store, Var<T> goal,
                     const std::vector<int64_t>& target_cats = {}) const {
    Var<T> g = goal_lin.apply(tape, store, goal);
    if (!target_cats.empty()) {
      if (static_cast<int64_t>(target_cats.size()) != goal.value().dim(0))
        throw TensorError("one target category per sample required");
      g = tape.add(g, tape.embedding(store, goal_cat_table, target_cats));
    }
    return tape.relu(g);
  }

  // keypoints (B, C, 24) + presence (B, C) straight into the representation
  // slot, bypassing the interaction engine
  Var<T> encode_raw_keypoints(Tape<T>& tape, ParameterStore<T>& store,
                              Var<T> keypoints, const Tensor<T>& present) const {
    const int64_t b = keypoints.value().dim(0);
    Var<T> kp = tape.reshape(keypoints, {b, cfg.num_categories * kKpCoords});
    Var<T> p = tape.input(present.reshaped({b, cfg.num_categories}));
    return tape.relu(kp_lin.apply(tape, store, tape.concat({kp, p})));
  }

  PolicyOut<T> forward(Tape<T>& tape, ParameterStore<T>& store, Var<T> v,
                       Var<T> g, Var<T> repr, Var<T> hidden) const {
    Var<T> f = tape.concat({g, v, repr});
    Var<T> h = gru.apply(tape, store, f, hidden);
    return {actor.apply(tape, store, h), critic.apply(tape, store, h), h};
  }
};

}  // namespace nie
