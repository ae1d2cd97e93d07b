#pragma once

// Interaction engine: predicts a per-category, per-action affine transform of
// the current keypoints, applies it, encodes current and predicted keypoint
// centers, and summarizes everything with masked self-attention over the
// category axis into one representation vector per action.
//
// Row layouts are (batch, category, action) with action fastest unless noted.

#include <string>
#include <vector>

#include "nie/autodiff.hpp"
#include "nie/geometry.hpp"
#include "nie/keypoints.hpp"
#include "nie/nn.hpp"

namespace nie {

constexpr int64_t kKpCoords = kNumKeypoints * 3;  // 24 numbers per category

struct NieConfig {
  int64_t num_categories = 8;
  int64_t num_actions = kNumActions;
  int64_t obs_feat_dim = 288;  // width of the observation features input
  int64_t kp_emb_dim = 32;
  int64_t emb_dim = 32;     // category and action embeddings
  int64_t hidden = 128;
  int64_t state_dim = 128;  // center-encoder output width
  int64_t attn_dim = 128;
  int64_t out_dim = 32;     // per-action representation width

  int64_t ra_flat_dim() const { return num_actions * out_dim; }
};

template <typename T>
struct NieNetwork {
  NieConfig cfg;
  MLP<T> kp_mlp;        // 24 -> hidden -> kp_emb_dim
  std::string cat_table, act_table;
  MLP<T> affine_hidden;  // concat features -> hidden (relu)
  Linear<T> rot_head;    // hidden -> 9, initialized to the identity block
  Linear<T> trans_head;  // hidden -> 3, initialized to zero
  MLP<T> center_mlp;     // 3 -> hidden -> state_dim
  Linear<T> wq, wk, wv;  // r rows -> attn_dim
  Linear<T> out_proj;    // attn_dim -> out_dim

  static NieNetwork create(ParameterStore<T>& store, const std::string& prefix,
                           const NieConfig& cfg, std::mt19937_64& rng) {
    NieNetwork n;
    n.cfg = cfg;
    n.kp_mlp = MLP<T>::create(store, prefix + ".kp",
                              {kKpCoords, cfg.hidden, cfg.kp_emb_dim}, rng);
    n.cat_table = prefix + ".cat_table";
    store.add(n.cat_table,
              detail::fan_in_uniform<T>({cfg.num_categories, cfg.emb_dim},
                                        cfg.emb_dim, T(1), rng));
    n.act_table = prefix + ".act_table";
    store.add(n.act_table,
              detail::fan_in_uniform<T>({cfg.num_actions, cfg.emb_dim},
                                        cfg.emb_dim, T(1), rng));
    const int64_t aff_in =
        cfg.kp_emb_dim + 2 * cfg.emb_dim + cfg.obs_feat_dim;
    n.affine_hidden = MLP<T>::create(store, prefix + ".aff",
                                     {aff_in, cfg.hidden}, rng, Act::kRelu,
                                     Act::kRelu);
    n.rot_head = Linear<T>::create(store, prefix + ".rot", cfg.hidden, 9, rng);
    n.trans_head =
        Linear<T>::create(store, prefix + ".trans", cfg.hidden, 3, rng);
    // identity at initialization: zero weights, identity-block bias
    store.get(n.rot_head.w).fill(T(0));
    Tensor<T>& rb = store.get(n.rot_head.b);
    rb.fill(T(0));
    rb[0] = rb[4] = rb[8] = T(1);
    store.get(n.trans_head.w).fill(T(0));
    store.get(n.trans_head.b).fill(T(0));
    n.center_mlp = MLP<T>::create(store, prefix + ".center",
                                  {3, cfg.hidden, cfg.state_dim}, rng);
    const int64_t r_dim = 2 * cfg.state_dim + cfg.emb_dim;
    n.wq = Linear<T>::create(store, prefix + ".wq", r_dim, cfg.attn_dim, rng);
    n.wk = Linear<T>::create(store, prefix + ".wk", r_dim, cfg.attn_dim, rng);
    n.wv = Linear<T>::create(store, prefix + ".wv", r_dim, cfg.attn_dim, rng);
    n.out_proj =
        Linear<T>::create(store, prefix + ".out", cfg.attn_dim, cfg.out_dim, rng);
    return n;
  }
};

template <typename T>
struct NieOutput {
  int64_t batch = 0;
  NieConfig cfg;
  Var<T> rot;    // (B*C*A, 9) row-major 3x3 blocks
  Var<T> trans;  // (B*C*A, 3)
  Var<T> pa;     // (B*C*A, 24) keypoints after the predicted transform
  Var<T> ra;     // (B, A*out_dim) flattened per-action representation

  // (B, C, A, 4, 4) affine matrices with the bottom row forced to (0,0,0,1)
  Tensor<T> affines() const {
    const int64_t rows = rot.value().dim(0);
    Tensor<T> m({batch, cfg.num_categories, cfg.num_actions, 4, 4}, T(0));
    for (int64_t i = 0; i < rows; ++i) {
      T* dst = m.data() + i * 16;
      const T* r = rot.value().data() + i * 9;
      const T* t = trans.value().data() + i * 3;
      for (int64_t row = 0; row < 3; ++row) {
        for (int64_t col = 0; col < 3; ++col) dst[row * 4 + col] = r[row * 3 + col];
        dst[row * 4 + 3] = t[row];
      }
      dst[15] = T(1);
    }
    return m;
  }
};

// ----- Keypoint/presence tensor bridges ------------------------------------------------

template <typename T>
Tensor<T> keypoints_tensor(const KeypointSet& k) {
  Tensor<T> t({static_cast<int64_t>(k.num_categories), kKpCoords});
  for (int c = 0; c < k.num_categories; ++c)
    for (int i = 0; i < kNumKeypoints; ++i) {
      const Vec3& p = k.points[static_cast<size_t>(c)][static_cast<size_t>(i)];
      T* dst = t.data() + c * kKpCoords + i * 3;
      dst[0] = static_cast<T>(p.x);
      dst[1] = static_cast<T>(p.y);
      dst[2] = static_cast<T>(p.z);
    }
  return t;
}

template <typename T>
Tensor<T> presence_tensor(const KeypointSet& k) {
  Tensor<T> t({static_cast<int64_t>(k.num_categories)});
  for (int c = 0; c < k.num_categories; ++c)
    t[c] = k.present[static_cast<size_t>(c)] ? T(1) : T(0);
  return t;
}

// ----- Forward ---------------------------------------------------------------------------

// keypoints: (B, C, 24) camera-frame coordinates, zero where absent.
// present:   (B, C) 0/1 observation mask.
// obs_feat:  (B, obs_feat_dim) visual features plus raw observation encoding.
template <typename T>
NieOutput<T> nie_forward(Tape<T>& tape, ParameterStore<T>& store,
                         const NieNetwork<T>& net, Var<T> keypoints,
                         const Tensor<T>& present, Var<T> obs_feat) {
  const NieConfig& cfg = net.cfg;
  const int64_t C = cfg.num_categories, A = cfg.num_actions;
  const int64_t B = keypoints.value().dim(0);
  if (keypoints.value().ndim() != 3 || keypoints.value().dim(1) != C ||
      keypoints.value().dim(2) != kKpCoords)
    throw TensorError("nie_forward expects keypoints of shape (B, C, 24)");
  if (present.ndim() != 2 || present.dim(0) != B || present.dim(1) != C)
    throw TensorError("nie_forward expects presence of shape (B, C)");
  if (obs_feat.value().ndim() != 2 || obs_feat.value().dim(0) != B ||
      obs_feat.value().dim(1) != cfg.obs_feat_dim)
    throw TensorError("nie_forward expects obs features of shape (B, F)");

  // index maps between the (b,c), (b,c,a) and (b,a,c) row orders
  std::vector<int64_t> cat_ids(static_cast<size_t>(B * C));
  for (int64_t i = 0; i < B * C; ++i) cat_ids[static_cast<size_t>(i)] = i % C;
  std::vector<int64_t> act_ids(static_cast<size_t>(B * C * A));
  std::vector<int64_t> bc_of_bca(static_cast<size_t>(B * C * A));
  std::vector<int64_t> b_of_bca(static_cast<size_t>(B * C * A));
  for (int64_t i = 0; i < B * C * A; ++i) {
    act_ids[static_cast<size_t>(i)] = i % A;
    bc_of_bca[static_cast<size_t>(i)] = i / A;
    b_of_bca[static_cast<size_t>(i)] = i / (C * A);
  }
  std::vector<int64_t> point_rep(static_cast<size_t>(B * C * A * kNumKeypoints));
  for (int64_t i = 0; i < B * C * A * kNumKeypoints; ++i)
    point_rep[static_cast<size_t>(i)] = i / kNumKeypoints;
  std::vector<int64_t> bac_perm(static_cast<size_t>(B * A * C));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t a = 0; a < A; ++a)
      for (int64_t c = 0; c < C; ++c)
        bac_perm[static_cast<size_t>((b * A + a) * C + c)] = (b * C + c) * A + a;

  Var<T> kp_flat = tape.reshape(keypoints, {B * C, kKpCoords});
  Var<T> kp_emb = net.kp_mlp.apply(tape, store, kp_flat);
  Var<T> cat_emb = tape.embedding(store, net.cat_table, cat_ids);
  Var<T> act_emb = tape.embedding(store, net.act_table, act_ids);

  Var<T> aff_in = tape.concat({tape.gather(kp_emb, bc_of_bca),
                               tape.gather(cat_emb, bc_of_bca), act_emb,
                               tape.gather(obs_feat, b_of_bca)});
  Var<T> h = net.affine_hidden.apply(tape, store, aff_in);

  NieOutput<T> out;
  out.batch = B;
  out.cfg = cfg;
  out.rot = net.rot_head.apply(tape, store, h);
  out.trans = net.trans_head.apply(tape, store, h);

  // p^a = R p + t, applied to every category's points for every action
  Var<T> p_tiled = tape.reshape(tape.gather(kp_flat, bc_of_bca),
                                {B * C * A, kNumKeypoints, 3});
  Var<T> rot3 = tape.reshape(out.rot, {B * C * A, 3, 3});
  Var<T> pa = tape.bmm(p_tiled, rot3, /*trans_b=*/true);
  pa = tape.reshape(pa, {B * C * A * kNumKeypoints, 3});
  pa = tape.add(pa, tape.gather(out.trans, point_rep));
  out.pa = tape.reshape(pa, {B * C * A, kKpCoords});

  // center encodings of the current and predicted keypoints
  Var<T> c_now = tape.mean_axis(tape.reshape(kp_flat, {B * C, kNumKeypoints, 3}), 1);
  Var<T> c_pred = tape.mean_axis(
      tape.reshape(out.pa, {B * C * A, kNumKeypoints, 3}), 1);
  Var<T> s_now = net.center_mlp.apply(tape, store, c_now);
  Var<T> s_pred = net.center_mlp.apply(tape, store, c_pred);

  Var<T> r = tape.concat({tape.gather(s_now, bc_of_bca), s_pred,
                          tape.gather(cat_emb, bc_of_bca)});
  Var<T> r_bac = tape.reshape(tape.gather(r, bac_perm),
                              {B * A, C, 2 * cfg.state_dim + cfg.emb_dim});

  Var<T> q = tape.reshape(net.wq.apply(tape, store, r_bac), {B * A, C, cfg.attn_dim});
  Var<T> k = tape.reshape(net.wk.apply(tape, store, r_bac), {B * A, C, cfg.attn_dim});
  Var<T> v = tape.reshape(net.wv.apply(tape, store, r_bac), {B * A, C, cfg.attn_dim});

  Tensor<T> key_mask({B * A, C});
  Tensor<T> pool_mask({B * A * C, 1});
  Tensor<T> inv_count({B * A, 1});
  for (int64_t b = 0; b < B; ++b) {
    T count = T(0);
    for (int64_t c = 0; c < C; ++c) count += present[b * C + c] != T(0) ? T(1) : T(0);
    const T inv = T(1) / std::max(T(1), count);
    for (int64_t a = 0; a < A; ++a) {
      inv_count[b * A + a] = inv;
      for (int64_t c = 0; c < C; ++c) {
        const T m = present[b * C + c] != T(0) ? T(1) : T(0);
        key_mask[(b * A + a) * C + c] = m;
        pool_mask[(b * A + a) * C + c] = m;
      }
    }
  }

  Var<T> attended = scaled_dot_attention(tape, q, k, v, key_mask);
  Var<T> o = net.out_proj.apply(tape, store, attended);  // (B*A, C, out_dim)
  o = tape.mul(o, tape.input(pool_mask));
  Var<T> pooled = tape.sum_axis(tape.reshape(o, {B * A, C, cfg.out_dim}), 1);
  pooled = tape.mul(pooled, tape.input(inv_count));
  out.ra = tape.reshape(pooled, {B, cfg.ra_flat_dim()});
  return out;
}

// ----- Loss --------------------------------------------------------------------------------

template <typename T>
struct NieTarget {
  Tensor<T> keypoints;          // (B, C, 24) ground truth for the executed action
  std::vector<int64_t> a_star;  // (B) executed action indices
  Tensor<T> observed;           // (B, C) categories that carry supervision
};

// Mean absolute error over the coordinates of observed categories at the
// executed action; everything else contributes nothing, gradients included.
template <typename T>
Var<T> nie_loss(Tape<T>& tape, const NieOutput<T>& out, const NieTarget<T>& tgt) {
  const int64_t C = out.cfg.num_categories, A = out.cfg.num_actions;
  const int64_t B = out.batch;
  if (tgt.keypoints.ndim() != 3 || tgt.keypoints.dim(0) != B ||
      tgt.keypoints.dim(1) != C || tgt.keypoints.dim(2) != kKpCoords)
    throw TensorError("nie_loss expects targets of shape (B, C, 24)");
  if (static_cast<int64_t>(tgt.a_star.size()) != B)
    throw TensorError("nie_loss expects one executed action per sample");
  for (int64_t a : tgt.a_star)
    if (a < 0 || a >= A) throw TensorError("executed action index out of range");

  std::vector<int64_t> sel(static_cast<size_t>(B * C));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      sel[static_cast<size_t>(b * C + c)] = (b * C + c) * A + tgt.a_star[static_cast<size_t>(b)];

  Tensor<T> mask({B * C, 1});
  T observed_count = T(0);
  for (int64_t i = 0; i < B * C; ++i) {
    mask[i] = tgt.observed[i] != T(0) ? T(1) : T(0);
    observed_count += mask[i];
  }

  Var<T> picked = tape.gather(out.pa, sel);
  Var<T> target = tape.input(tgt.keypoints.reshaped({B * C, kKpCoords}));
  Var<T> err = tape.abs_(tape.sub(picked, target));
  err = tape.mul(err, tape.input(mask));
  const T denom = std::max(T(1), observed_count * static_cast<T>(kKpCoords));
  return tape.affine(tape.sum_all(err), T(1) / denom, T(0));
}

}  // namespace nie
