#pragma once

// Layer helpers: each layer registers named parameters in a ParameterStore at
// build time and applies them on a Tape at run time. Layers hold only names
// and dimensions, so they are cheap to copy and safe to share across threads.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "nie/autodiff.hpp"
#include "nie/params.hpp"
#include "nie/tensor.hpp"

namespace nie {

enum class Act { kNone, kRelu, kTanh };

template <typename T>
Var<T> activate(Tape<T>& tape, Var<T> x, Act act) {
  switch (act) {
    case Act::kRelu: return tape.relu(x);
    case Act::kTanh: return tape.tanh_(x);
    case Act::kNone: return x;
  }
  return x;
}

namespace detail {

// Uniform(-k, k) with k = gain / sqrt(fan_in), matching the usual dense-layer
// default.
template <typename T>
Tensor<T> fan_in_uniform(const Shape& shape, int64_t fan_in, T gain,
                         std::mt19937_64& rng) {
  Tensor<T> t(shape);
  const T k = gain / std::sqrt(static_cast<T>(fan_in));
  fill_uniform(t, rng, -k, k);
  return t;
}

}  // namespace detail

// ----- Linear ----------------------------------------------------------------

template <typename T>
struct Linear {
  std::string w, b;
  int64_t in = 0, out = 0;

  // weight_gain scales the weight init only; heads that should start near
  // zero (e.g. an actor head) pass a small gain.
  static Linear create(ParameterStore<T>& store, const std::string& prefix,
                       int64_t in, int64_t out, std::mt19937_64& rng,
                       T weight_gain = T(1)) {
    Linear l;
    l.w = prefix + ".w";
    l.b = prefix + ".b";
    l.in = in;
    l.out = out;
    store.add(l.w, detail::fan_in_uniform<T>({out, in}, in, weight_gain, rng));
    store.add(l.b, detail::fan_in_uniform<T>({out}, in, T(1), rng));
    return l;
  }

  // x: (..., in) -> (..., out)
  Var<T> apply(Tape<T>& tape, ParameterStore<T>& store, Var<T> x) const {
    Shape xs = x.shape();
    const int64_t rows = x.numel() / in;
    Var<T> flat = xs.size() == 2 ? x : tape.reshape(x, {rows, in});
    Var<T> y = tape.matmul(flat, tape.param(store, w), false, true);
    y = tape.add(y, tape.param(store, b));
    if (xs.size() != 2) {
      xs.back() = out;
      y = tape.reshape(y, xs);
    }
    return y;
  }
};

// ----- MLP --------------------------------------------------------------------

template <typename T>
struct MLP {
  std::vector<Linear<T>> layers;
  Act hidden_act = Act::kRelu;
  Act out_act = Act::kNone;

  static MLP create(ParameterStore<T>& store, const std::string& prefix,
                    const std::vector<int64_t>& dims, std::mt19937_64& rng,
                    Act hidden_act = Act::kRelu, Act out_act = Act::kNone) {
    if (dims.size() < 2) throw TensorError("MLP needs at least [in, out] dims");
    MLP m;
    m.hidden_act = hidden_act;
    m.out_act = out_act;
    for (size_t i = 0; i + 1 < dims.size(); ++i)
      m.layers.push_back(Linear<T>::create(
          store, prefix + ".l" + std::to_string(i), dims[i], dims[i + 1], rng));
    return m;
  }

  Var<T> apply(Tape<T>& tape, ParameterStore<T>& store, Var<T> x) const {
    for (size_t i = 0; i < layers.size(); ++i) {
      x = layers[i].apply(tape, store, x);
      x = activate(tape, x, i + 1 < layers.size() ? hidden_act : out_act);
    }
    return x;
  }
};

// ----- Conv2d -------------------------------------------------------------------

template <typename T>
struct Conv2d {
  std::string w, b;
  int64_t in_ch = 0, out_ch = 0, k = 0, stride = 1, pad = 0;

  static Conv2d create(ParameterStore<T>& store, const std::string& prefix,
                       int64_t in_ch, int64_t out_ch, int64_t k, int64_t stride,
                       int64_t pad, std::mt19937_64& rng) {
    Conv2d c;
    c.w = prefix + ".w";
    c.b = prefix + ".b";
    c.in_ch = in_ch;
    c.out_ch = out_ch;
    c.k = k;
    c.stride = stride;
    c.pad = pad;
    const int64_t fan_in = in_ch * k * k;
    store.add(c.w,
              detail::fan_in_uniform<T>({out_ch, in_ch, k, k}, fan_in, T(1), rng));
    store.add(c.b, detail::fan_in_uniform<T>({out_ch}, fan_in, T(1), rng));
    return c;
  }

  Var<T> apply(Tape<T>& tape, ParameterStore<T>& store, Var<T> x) const {
    return tape.conv2d(x, tape.param(store, w), tape.param(store, b), stride, pad);
  }
};

// ----- GRU cell ----------------------------------------------------------------

// Gate equations:
//   r = sigmoid(x W_ir' + b_ir + h W_hr' + b_hr)
//   z = sigmoid(x W_iz' + b_iz + h W_hz' + b_hz)
//   n = tanh(x W_in' + b_in + r * (h W_hn' + b_hn))
//   h' = (1 - z) * n + z * h
template <typename T>
struct GRUCell {
  std::string w_ir, w_iz, w_in, w_hr, w_hz, w_hn;
  std::string b_ir, b_iz, b_in, b_hr, b_hz, b_hn;
  int64_t in = 0, hidden = 0;

  static GRUCell create(ParameterStore<T>& store, const std::string& prefix,
                        int64_t in, int64_t hidden, std::mt19937_64& rng) {
    GRUCell g;
    g.in = in;
    g.hidden = hidden;
    auto add_w = [&](std::string& slot, const char* tag, int64_t cols) {
      slot = prefix + "." + tag;
      store.add(slot, detail::fan_in_uniform<T>({hidden, cols}, hidden, T(1), rng));
    };
    auto add_b = [&](std::string& slot, const char* tag) {
      slot = prefix + "." + tag;
      store.add(slot, detail::fan_in_uniform<T>({hidden}, hidden, T(1), rng));
    };
    add_w(g.w_ir, "w_ir", in);
    add_w(g.w_iz, "w_iz", in);
    add_w(g.w_in, "w_in", in);
    add_w(g.w_hr, "w_hr", hidden);
    add_w(g.w_hz, "w_hz", hidden);
    add_w(g.w_hn, "w_hn", hidden);
    add_b(g.b_ir, "b_ir");
    add_b(g.b_iz, "b_iz");
    add_b(g.b_in, "b_in");
    add_b(g.b_hr, "b_hr");
    add_b(g.b_hz, "b_hz");
    add_b(g.b_hn, "b_hn");
    return g;
  }

  // x: (B, in), h: (B, hidden) -> (B, hidden)
  Var<T> apply(Tape<T>& tape, ParameterStore<T>& store, Var<T> x, Var<T> h) const {
    auto gate = [&](const std::string& wi, const std::string& bi,
                    const std::string& wh, const std::string& bh) {
      Var<T> gx = tape.add(tape.matmul(x, tape.param(store, wi), false, true),
                           tape.param(store, bi));
      Var<T> gh = tape.add(tape.matmul(h, tape.param(store, wh), false, true),
                           tape.param(store, bh));
      return std::make_pair(gx, gh);
    };
    auto [rx, rh] = gate(w_ir, b_ir, w_hr, b_hr);
    Var<T> r = tape.sigmoid(tape.add(rx, rh));
    auto [zx, zh] = gate(w_iz, b_iz, w_hz, b_hz);
    Var<T> z = tape.sigmoid(tape.add(zx, zh));
    auto [nx, nh] = gate(w_in, b_in, w_hn, b_hn);
    Var<T> n = tape.tanh_(tape.add(nx, tape.mul(r, nh)));
    Var<T> one_minus_z = tape.affine(z, T(-1), T(1));
    return tape.add(tape.mul(one_minus_z, n), tape.mul(z, h));
  }
};

// ----- Attention -----------------------------------------------------------------

// Scaled dot-product self-attention over the middle axis. q, k, v: (B, L, D).
// key_mask: (B, L) with 1 for usable keys; fully masked rows yield zeros.
template <typename T>
Var<T> scaled_dot_attention(Tape<T>& tape, Var<T> q, Var<T> k, Var<T> v,
                            const Tensor<T>& key_mask) {
  const int64_t batch = q.shape()[0], len = q.shape()[1], d = q.shape()[2];
  if (!(key_mask.ndim() == 2 && key_mask.dim(0) == batch && key_mask.dim(1) == len))
    throw TensorError("attention: key_mask must be (B, L), got " +
                      shape_str(key_mask.shape()));
  Var<T> scores = tape.bmm(q, k, /*trans_b=*/true);
  scores = tape.affine(scores, T(1) / std::sqrt(static_cast<T>(d)), T(0));
  Tensor<T> full({batch, len, len});
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t i = 0; i < len; ++i)
      for (int64_t j = 0; j < len; ++j)
        full[(b * len + i) * len + j] = key_mask[b * len + j];
  Var<T> attn = tape.masked_softmax(scores, full);
  return tape.bmm(attn, v);
}

}  // namespace nie
