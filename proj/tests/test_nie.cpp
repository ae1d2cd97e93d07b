#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "nie/nie_model.hpp"
#include "support/fd.hpp"

using namespace nie;
using Catch::Matchers::WithinAbs;

namespace {

Tensor<double> rand_tensor(const Shape& shape, std::mt19937_64& rng,
                           double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(shape);
  fill_uniform(t, rng, lo, hi);
  return t;
}

// Weighted sum makes the scalar loss sensitive to every output element. The
// weights depend only on the output shape so repeated evaluations of the same
// graph see identical values (finite differencing requires that).
Var<double> weighted_sum(Tape<double>& tape, Var<double> y) {
  std::mt19937_64 wrng(0x9e3779b9 + static_cast<uint64_t>(y.numel()));
  Tensor<double> w(y.shape());
  fill_uniform(w, wrng, 0.5, 1.5);
  return tape.sum_all(tape.mul(y, tape.input(w)));
}

NieConfig tiny_config() {
  NieConfig cfg;
  cfg.num_categories = 3;
  cfg.num_actions = 4;
  cfg.obs_feat_dim = 12;
  cfg.kp_emb_dim = 8;
  cfg.emb_dim = 8;
  cfg.hidden = 16;
  cfg.state_dim = 16;
  cfg.attn_dim = 16;
  cfg.out_dim = 8;
  return cfg;
}

// Replaces the identity initialization of the affine heads with random
// weights so the predicted transforms become non-trivial.
template <typename T>
void randomize_heads(ParameterStore<T>& store, const NieNetwork<T>& net,
                     uint64_t seed) {
  std::mt19937_64 rng(seed);
  fill_uniform(store.get(net.rot_head.w), rng, T(-0.05), T(0.05));
  fill_uniform(store.get(net.rot_head.b), rng, T(-0.2), T(0.2));
  fill_uniform(store.get(net.trans_head.w), rng, T(-0.05), T(0.05));
  fill_uniform(store.get(net.trans_head.b), rng, T(-0.2), T(0.2));
}

// Target whose keypoints equal the prediction for the executed action.
NieTarget<double> target_from_output(const NieOutput<double>& out,
                                     const std::vector<int64_t>& a_star) {
  const int64_t C = out.cfg.num_categories, A = out.cfg.num_actions;
  const int64_t B = out.batch;
  NieTarget<double> tgt;
  tgt.keypoints = Tensor<double>({B, C, kKpCoords});
  tgt.a_star = a_star;
  tgt.observed = Tensor<double>({B, C}, 1.0);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const int64_t row = (b * C + c) * A + a_star[static_cast<size_t>(b)];
      for (int64_t j = 0; j < kKpCoords; ++j)
        tgt.keypoints[(b * C + c) * kKpCoords + j] =
            out.pa.value()[row * kKpCoords + j];
    }
  return tgt;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.same_shape(b));
  double worst = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace

TEST_CASE("identity transforms at initialization") {
  NieConfig cfg;  // full size: 8 categories, 10 actions
  ParameterStore<double> store;
  std::mt19937_64 rng(3);
  auto net = NieNetwork<double>::create(store, "nie", cfg, rng);

  const int64_t B = 1, C = cfg.num_categories, A = cfg.num_actions;
  Tensor<double> kp = rand_tensor({B, C, kKpCoords}, rng);
  Tensor<double> present({B, C}, 1.0);
  Tensor<double> obs = rand_tensor({B, cfg.obs_feat_dim}, rng);

  Tape<double> tape;
  auto out = nie_forward(tape, store, net, tape.input(kp.clone()), present,
                         tape.input(obs.clone()));

  REQUIRE(out.rot.shape() == Shape{B * C * A, 9});
  REQUIRE(out.trans.shape() == Shape{B * C * A, 3});
  REQUIRE(out.pa.shape() == Shape{B * C * A, kKpCoords});
  REQUIRE(out.ra.shape() == Shape{B, cfg.ra_flat_dim()});

  SECTION("predicted keypoints equal the inputs bitwise") {
    double worst = 0.0;
    for (int64_t row = 0; row < B * C * A; ++row)
      for (int64_t j = 0; j < kKpCoords; ++j) {
        const double p = kp[(row / A) * kKpCoords + j];
        const double q = out.pa.value()[row * kKpCoords + j];
        worst = std::max(worst, std::abs(p - q));
      }
    REQUIRE(worst == 0.0);
  }

  SECTION("affine matrices are exact identities") {
    Tensor<double> m = out.affines();
    REQUIRE(m.shape() == Shape{B, C, A, 4, 4});
    for (int64_t block = 0; block < B * C * A; ++block)
      for (int64_t r = 0; r < 4; ++r)
        for (int64_t col = 0; col < 4; ++col) {
          const double want = r == col ? 1.0 : 0.0;
          REQUIRE(m[(block * 4 + r) * 4 + col] == want);
        }
  }

  SECTION("representation is finite") {
    for (int64_t i = 0; i < out.ra.numel(); ++i)
      REQUIRE(std::isfinite(out.ra.value()[i]));
  }
}

TEST_CASE("returned affines reproduce the predicted keypoints") {
  NieConfig cfg;
  ParameterStore<double> store;
  std::mt19937_64 rng(7);
  auto net = NieNetwork<double>::create(store, "nie", cfg, rng);
  randomize_heads(store, net, 77);

  const int64_t B = 2, C = cfg.num_categories, A = cfg.num_actions;
  Tensor<double> kp = rand_tensor({B, C, kKpCoords}, rng);
  Tensor<double> present({B, C}, 1.0);
  Tensor<double> obs = rand_tensor({B, cfg.obs_feat_dim}, rng);

  Tape<double> tape;
  auto out = nie_forward(tape, store, net, tape.input(kp.clone()), present,
                         tape.input(obs.clone()));
  Tensor<double> m = out.affines();

  double worst = 0.0;
  for (int64_t row = 0; row < B * C * A; ++row) {
    const double* mat = m.data() + row * 16;
    const double* p = kp.data() + (row / A) * kKpCoords;
    for (int64_t i = 0; i < kNumKeypoints; ++i)
      for (int64_t r = 0; r < 3; ++r) {
        const double want = mat[r * 4 + 0] * p[i * 3 + 0] +
                            mat[r * 4 + 1] * p[i * 3 + 1] +
                            mat[r * 4 + 2] * p[i * 3 + 2] + mat[r * 4 + 3];
        worst = std::max(
            worst, std::abs(want - out.pa.value()[row * kKpCoords + i * 3 + r]));
      }
    REQUIRE(mat[12] == 0.0);
    REQUIRE(mat[13] == 0.0);
    REQUIRE(mat[14] == 0.0);
    REQUIRE(mat[15] == 1.0);
  }
  REQUIRE(worst < 1e-12);
}

TEST_CASE("masked categories cannot influence the representation") {
  NieConfig cfg;
  ParameterStore<double> store;
  std::mt19937_64 rng(11);
  auto net = NieNetwork<double>::create(store, "nie", cfg, rng);
  randomize_heads(store, net, 11);

  const int64_t B = 2, C = cfg.num_categories;
  Tensor<double> kp = rand_tensor({B, C, kKpCoords}, rng);
  Tensor<double> obs = rand_tensor({B, cfg.obs_feat_dim}, rng);
  Tensor<double> present({B, C}, 0.0);
  for (int64_t c : {0, 2, 5}) present[0 * C + c] = 1.0;
  present[1 * C + 1] = 1.0;

  auto run = [&](const Tensor<double>& points) {
    Tape<double> tape(false);
    auto out = nie_forward(tape, store, net, tape.input(points.clone()), present,
                           tape.input(obs.clone()));
    return out.ra.value().clone();
  };
  Tensor<double> base = run(kp);

  SECTION("perturbing absent categories leaves it bitwise unchanged") {
    Tensor<double> poked = kp.clone();
    std::mt19937_64 noise(13);
    for (int64_t c : {3, 6, 7})
      for (int64_t j = 0; j < kKpCoords; ++j)
        poked[(0 * C + c) * kKpCoords + j] += 100.0;
    for (int64_t c : {0, 7})
      for (int64_t j = 0; j < kKpCoords; ++j)
        poked[(1 * C + c) * kKpCoords + j] -= 50.0;
    REQUIRE(max_abs_diff(run(poked), base) == 0.0);
  }

  SECTION("perturbing a present category changes it") {
    Tensor<double> poked = kp.clone();
    for (int64_t j = 0; j < kKpCoords; ++j)
      poked[(0 * C + 2) * kKpCoords + j] += 0.5;
    REQUIRE(max_abs_diff(run(poked), base) > 0.0);
  }

  SECTION("no observed categories yields an exactly zero representation") {
    Tensor<double> none({B, C}, 0.0);
    Tape<double> tape(false);
    auto out = nie_forward(tape, store, net, tape.input(kp.clone()), none,
                           tape.input(obs.clone()));
    for (int64_t i = 0; i < out.ra.numel(); ++i)
      REQUIRE(out.ra.value()[i] == 0.0);
  }
}

TEST_CASE("loss values against hand arithmetic") {
  NieConfig cfg;
  ParameterStore<double> store;
  std::mt19937_64 rng(17);
  auto net = NieNetwork<double>::create(store, "nie", cfg, rng);
  randomize_heads(store, net, 17);

  const int64_t B = 2, C = cfg.num_categories;
  Tensor<double> kp = rand_tensor({B, C, kKpCoords}, rng);
  Tensor<double> present({B, C}, 1.0);
  Tensor<double> obs = rand_tensor({B, cfg.obs_feat_dim}, rng);

  Tape<double> tape;
  auto out = nie_forward(tape, store, net, tape.input(kp.clone()), present,
                         tape.input(obs.clone()));
  const std::vector<int64_t> a_star = {3, 7};

  SECTION("perfect prediction scores zero") {
    auto tgt = target_from_output(out, a_star);
    REQUIRE(nie_loss(tape, out, tgt).value()[0] == 0.0);
  }

  SECTION("one observed category, one coordinate off by 0.24") {
    auto tgt = target_from_output(out, a_star);
    tgt.observed.fill(0.0);
    tgt.observed[0 * C + 2] = 1.0;
    tgt.keypoints[(0 * C + 2) * kKpCoords + 5] += 0.24;
    // junk outside the observed slice must not leak in
    for (int64_t j = 0; j < kKpCoords; ++j) {
      tgt.keypoints[(0 * C + 4) * kKpCoords + j] = 1e6;
      tgt.keypoints[(1 * C + 0) * kKpCoords + j] = -1e6;
    }
    REQUIRE_THAT(nie_loss(tape, out, tgt).value()[0], WithinAbs(0.01, 1e-12));
  }

  SECTION("two observed categories split the normalizer") {
    auto tgt = target_from_output(out, a_star);
    tgt.observed.fill(0.0);
    tgt.observed[0 * C + 2] = 1.0;
    tgt.observed[1 * C + 6] = 1.0;
    tgt.keypoints[(0 * C + 2) * kKpCoords + 5] += 0.24;
    REQUIRE_THAT(nie_loss(tape, out, tgt).value()[0], WithinAbs(0.005, 1e-12));
  }

  SECTION("nothing observed scores zero with zero gradients") {
    Tape<double> gtape;
    auto gout = nie_forward(gtape, store, net, gtape.input(kp.clone()), present,
                            gtape.input(obs.clone()));
    auto tgt = target_from_output(gout, a_star);
    tgt.observed.fill(0.0);
    tgt.keypoints.fill(123.0);
    Var<double> loss = nie_loss(gtape, gout, tgt);
    REQUIRE(loss.value()[0] == 0.0);
    gtape.backward(loss);
    for (const auto& [name, grad] : gtape.grads())
      for (int64_t i = 0; i < grad.numel(); ++i) {
        INFO(name);
        REQUIRE(grad[i] == 0.0);
      }
  }

  SECTION("malformed targets are rejected") {
    auto tgt = target_from_output(out, a_star);
    tgt.a_star = {3};
    REQUIRE_THROWS_AS(nie_loss(tape, out, tgt), TensorError);
    tgt.a_star = {3, cfg.num_actions};
    REQUIRE_THROWS_AS(nie_loss(tape, out, tgt), TensorError);
    tgt = target_from_output(out, a_star);
    tgt.keypoints = Tensor<double>({B, C, 3}, 0.0);
    REQUIRE_THROWS_AS(nie_loss(tape, out, tgt), TensorError);
  }
}

TEST_CASE("gradients vanish exactly off the supervised slice") {
  NieConfig cfg = tiny_config();
  ParameterStore<double> store;
  std::mt19937_64 rng(23);
  auto net = NieNetwork<double>::create(store, "nie", cfg, rng);
  randomize_heads(store, net, 23);

  const int64_t B = 2, C = cfg.num_categories;
  Tensor<double> kp = rand_tensor({B, C, kKpCoords}, rng);
  Tensor<double> present({B, C}, 1.0);
  Tensor<double> obs = rand_tensor({B, cfg.obs_feat_dim}, rng);

  Tape<double> tape;
  Var<double> kpv = tape.leaf(kp.clone());
  auto out = nie_forward(tape, store, net, kpv, present, tape.input(obs.clone()));

  NieTarget<double> tgt;
  tgt.keypoints = rand_tensor({B, C, kKpCoords}, rng);
  tgt.a_star = {1, 2};
  tgt.observed = Tensor<double>({B, C}, 0.0);
  tgt.observed[0 * C + 0] = 1.0;  // category 1 never observed
  tgt.observed[1 * C + 0] = 1.0;
  tgt.observed[1 * C + 2] = 1.0;
  tape.backward(nie_loss(tape, out, tgt));
  auto grads = tape.grads();

  SECTION("non-executed action embeddings get exactly zero gradient") {
    const Tensor<double>& g = grads.at(net.act_table);
    auto row_norm = [&](int64_t a) {
      double s = 0.0;
      for (int64_t j = 0; j < cfg.emb_dim; ++j) s += std::abs(g[a * cfg.emb_dim + j]);
      return s;
    };
    REQUIRE(row_norm(0) == 0.0);
    REQUIRE(row_norm(3) == 0.0);
    REQUIRE(row_norm(1) > 0.0);
    REQUIRE(row_norm(2) > 0.0);
  }

  SECTION("unobserved category embeddings get exactly zero gradient") {
    const Tensor<double>& g = grads.at(net.cat_table);
    auto row_norm = [&](int64_t c) {
      double s = 0.0;
      for (int64_t j = 0; j < cfg.emb_dim; ++j) s += std::abs(g[c * cfg.emb_dim + j]);
      return s;
    };
    REQUIRE(row_norm(1) == 0.0);
    REQUIRE(row_norm(0) > 0.0);
    REQUIRE(row_norm(2) > 0.0);
  }

  SECTION("keypoints of unobserved categories get exactly zero gradient") {
    REQUIRE(kpv.has_grad());
    const Tensor<double>& g = kpv.grad();
    auto row_norm = [&](int64_t b, int64_t c) {
      double s = 0.0;
      for (int64_t j = 0; j < kKpCoords; ++j)
        s += std::abs(g[(b * C + c) * kKpCoords + j]);
      return s;
    };
    REQUIRE(row_norm(0, 1) == 0.0);
    REQUIRE(row_norm(0, 2) == 0.0);
    REQUIRE(row_norm(1, 1) == 0.0);
    REQUIRE(row_norm(0, 0) > 0.0);
    REQUIRE(row_norm(1, 0) > 0.0);
    REQUIRE(row_norm(1, 2) > 0.0);
  }
}

TEST_CASE("finite differences through the full pipeline") {
  NieConfig cfg = tiny_config();
  ParameterStore<double> store;
  std::mt19937_64 rng(5);
  auto net = NieNetwork<double>::create(store, "nie", cfg, rng);
  randomize_heads(store, net, 5);

  const int64_t B = 2, C = cfg.num_categories;
  Tensor<double> kp = rand_tensor({B, C, kKpCoords}, rng);
  Tensor<double> obs = rand_tensor({B, cfg.obs_feat_dim}, rng);
  Tensor<double> present({B, C}, 1.0);
  present[0 * C + 2] = 0.0;
  present[1 * C + 1] = 0.0;

  NieTarget<double> tgt;
  tgt.keypoints = rand_tensor({B, C, kKpCoords}, rng);
  tgt.a_star = {1, 3};
  tgt.observed = present.clone();

  auto build = [&](Tape<double>& t, Var<double> kpv, Var<double> obsv) {
    auto out = nie_forward(t, store, net, kpv, present, obsv);
    Var<double> l = nie_loss(t, out, tgt);
    return t.add(l, t.affine(weighted_sum(t, out.ra), 0.05, 0.0));
  };

  SECTION("parameter gradients") {
    double err = fd::check_store(store, [&](Tape<double>& t, ParameterStore<double>&) {
      return build(t, t.input(kp.clone()), t.input(obs.clone()));
    });
    REQUIRE(err < 1e-6);
  }

  SECTION("input gradients") {
    double err = fd::check_inputs(
        {kp, obs}, [&](Tape<double>& t, const std::vector<Var<double>>& v) {
          return build(t, v[0], v[1]);
        });
    REQUIRE(err < 1e-6);
  }
}

TEST_CASE("representation is invariant to consistent category permutation") {
  NieConfig cfg;
  const int64_t B = 1, C = cfg.num_categories;
  const std::vector<int64_t> perm = {3, 1, 4, 0, 2, 5, 7, 6};

  ParameterStore<double> store_a, store_b;
  std::mt19937_64 rng_a(21), rng_b(21);
  auto net_a = NieNetwork<double>::create(store_a, "nie", cfg, rng_a);
  auto net_b = NieNetwork<double>::create(store_b, "nie", cfg, rng_b);
  randomize_heads(store_a, net_a, 29);
  randomize_heads(store_b, net_b, 29);

  std::mt19937_64 rng(31);
  Tensor<double> kp = rand_tensor({B, C, kKpCoords}, rng);
  Tensor<double> obs = rand_tensor({B, cfg.obs_feat_dim}, rng);
  Tensor<double> present({B, C}, 1.0);
  present[3] = 0.0;
  present[6] = 0.0;

  Tensor<double>& table = store_b.get(net_b.cat_table);
  Tensor<double> orig_table = table.clone();
  Tensor<double> kp_b({B, C, kKpCoords});
  Tensor<double> present_b({B, C});
  for (int64_t c = 0; c < C; ++c) {
    const int64_t to = perm[static_cast<size_t>(c)];
    for (int64_t j = 0; j < cfg.emb_dim; ++j)
      table[to * cfg.emb_dim + j] = orig_table[c * cfg.emb_dim + j];
    for (int64_t j = 0; j < kKpCoords; ++j)
      kp_b[to * kKpCoords + j] = kp[c * kKpCoords + j];
    present_b[to] = present[c];
  }

  Tape<double> ta(false), tb(false);
  auto out_a = nie_forward(ta, store_a, net_a, ta.input(kp.clone()), present,
                           ta.input(obs.clone()));
  auto out_b = nie_forward(tb, store_b, net_b, tb.input(kp_b.clone()), present_b,
                           tb.input(obs.clone()));
  REQUIRE(max_abs_diff(out_a.ra.value(), out_b.ra.value()) < 1e-9);
}

TEST_CASE("keypoint set bridges to tensors") {
  KeypointSet k;
  k.num_categories = 3;
  k.points.resize(3);
  k.present = {true, false, true};
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < kNumKeypoints; ++i)
      k.points[static_cast<size_t>(c)][static_cast<size_t>(i)] =
          Vec3{c + 0.1 * i, c + 0.2 * i, c + 0.3 * i};

  Tensor<double> t = keypoints_tensor<double>(k);
  REQUIRE(t.shape() == Shape{3, kKpCoords});
  REQUIRE(t[0 * kKpCoords + 0] == 0.0);
  REQUIRE_THAT(t[(2 * kNumKeypoints + 5) * 3 + 1], WithinAbs(3.0, 1e-15));
  REQUIRE_THAT(t[(1 * kNumKeypoints + 7) * 3 + 2], WithinAbs(1.0 + 2.1, 1e-15));

  Tensor<double> p = presence_tensor<double>(k);
  REQUIRE(p.shape() == Shape{3});
  REQUIRE(p[0] == 1.0);
  REQUIRE(p[1] == 0.0);
  REQUIRE(p[2] == 1.0);
}

TEST_CASE("malformed inputs are rejected and float instantiation works") {
  NieConfig cfg = tiny_config();
  const int64_t B = 1, C = cfg.num_categories;

  SECTION("shape validation") {
    ParameterStore<double> store;
    std::mt19937_64 rng(41);
    auto net = NieNetwork<double>::create(store, "nie", cfg, rng);
    Tape<double> tape(false);
    Tensor<double> present({B, C}, 1.0);
    Var<double> good_kp = tape.input(Tensor<double>({B, C, kKpCoords}, 0.0));
    Var<double> good_obs = tape.input(Tensor<double>({B, cfg.obs_feat_dim}, 0.0));
    REQUIRE_THROWS_AS(
        nie_forward(tape, store, net,
                    tape.input(Tensor<double>({B, C, 3}, 0.0)), present, good_obs),
        TensorError);
    REQUIRE_THROWS_AS(
        nie_forward(tape, store, net, good_kp,
                    Tensor<double>({B, C + 1}, 1.0), good_obs),
        TensorError);
    REQUIRE_THROWS_AS(
        nie_forward(tape, store, net, good_kp, present,
                    tape.input(Tensor<double>({B, 5}, 0.0))),
        TensorError);
  }

  SECTION("float forward and loss run end to end") {
    ParameterStore<float> store;
    std::mt19937_64 rng(43);
    auto net = NieNetwork<float>::create(store, "nie", cfg, rng);
    randomize_heads(store, net, 43);
    Tensor<float> kp({B, C, kKpCoords});
    fill_uniform(kp, rng, -1.0f, 1.0f);
    Tensor<float> obs({B, cfg.obs_feat_dim});
    fill_uniform(obs, rng, -1.0f, 1.0f);
    Tensor<float> present({B, C}, 1.0f);

    Tape<float> tape;
    auto out = nie_forward(tape, store, net, tape.input(kp.clone()), present,
                           tape.input(obs.clone()));
    NieTarget<float> tgt;
    tgt.keypoints = Tensor<float>({B, C, kKpCoords}, 0.5f);
    tgt.a_star = {2};
    tgt.observed = Tensor<float>({B, C}, 1.0f);
    Var<float> loss = nie_loss(tape, out, tgt);
    REQUIRE(std::isfinite(loss.value()[0]));
    tape.backward(loss);
    REQUIRE(tape.grads().count(net.rot_head.b) == 1);
  }
}
