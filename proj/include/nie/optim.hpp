#pragma once

// Adam with bias correction, global-norm gradient clipping, and a linear
// learning-rate decay schedule.

#include <cmath>
#include <map>
#include <string>

#include "nie/params.hpp"
#include "nie/tensor.hpp"

namespace nie {

template <typename T>
struct AdamConfig {
  T lr = T(3e-4);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
};

// Rescales gradients in place so their joint L2 norm is at most max_norm.
// Returns the pre-clip norm.
template <typename T>
T clip_gradients(std::map<std::string, Tensor<T>>& grads, T max_norm) {
  T sq = T(0);
  for (auto& [name, g] : grads)
    for (int64_t i = 0; i < g.numel(); ++i) sq += g[i] * g[i];
  const T norm = std::sqrt(sq);
  if (norm > max_norm && norm > T(0)) {
    const T scale = max_norm / norm;
    for (auto& [name, g] : grads)
      for (int64_t i = 0; i < g.numel(); ++i) g[i] *= scale;
  }
  return norm;
}

// One Adam update over every parameter with a gradient entry. Increments the
// store's step count once per call; moments live in the store so updates
// resume exactly across checkpoints.
template <typename T>
void adam_step(ParameterStore<T>& store, const std::map<std::string, Tensor<T>>& grads,
               const AdamConfig<T>& cfg) {
  store.step_count += 1;
  const T t = static_cast<T>(store.step_count);
  const T bc1 = T(1) - std::pow(cfg.beta1, t);
  const T bc2 = T(1) - std::pow(cfg.beta2, t);
  for (const auto& [name, g] : grads) {
    auto& e = store.entry(name);
    if (!e.value.same_shape(g))
      throw TensorError("adam_step: gradient shape mismatch for " + name);
    Tensor<T>& v = e.value;
    Tensor<T>& m1 = e.m;
    Tensor<T>& m2 = e.v;
    for (int64_t i = 0; i < v.numel(); ++i) {
      m1[i] = cfg.beta1 * m1[i] + (T(1) - cfg.beta1) * g[i];
      m2[i] = cfg.beta2 * m2[i] + (T(1) - cfg.beta2) * g[i] * g[i];
      const T mhat = m1[i] / bc1;
      const T vhat = m2[i] / bc2;
      v[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// lr(t) = lr0 * (1 - t/total), clamped at zero.
template <typename T>
struct LinearDecay {
  T lr0;
  int64_t total_updates;

  T at(int64_t update_index) const {
    if (total_updates <= 0) return lr0;
    T frac = T(1) - static_cast<T>(update_index) / static_cast<T>(total_updates);
    if (frac < T(0)) frac = T(0);
    return lr0 * frac;
  }
};

}  // namespace nie
