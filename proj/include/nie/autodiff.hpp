#pragma once

// Reverse-mode automatic differentiation over dense tensors. A Tape records
// ops in creation order; backward() walks the record in reverse. Evaluation
// is single-threaded and deterministic: identical inputs and parameters give
// bitwise-identical outputs.
//
// Eigen provides the dense matmul kernels; everything on top (the op set,
// gradients, graph bookkeeping) lives here.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "nie/params.hpp"
#include "nie/tensor.hpp"

namespace nie {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily on first contribution
  bool requires_grad = false;
  bool grad_alloc = false;
  std::function<void()> backward;
  const char* op = "";

  Tensor<T>& ensure_grad() {
    if (!grad_alloc) {
      grad = Tensor<T>::zeros(value.shape());
      grad_alloc = true;
    }
    return grad;
  }
};

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() : node_(nullptr) {}
  Var(Node<T>* n) : node_(n) {}

  const Tensor<T>& value() const { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad_alloc; }
  const Shape& shape() const { return node_->value.shape(); }
  int64_t numel() const { return node_->value.numel(); }
  Node<T>* node() const { return node_; }
  bool valid() const { return node_ != nullptr; }

 private:
  Node<T>* node_;
};

namespace detail {

[[noreturn]] inline void shape_fail(const char* op, const std::string& msg) {
  throw TensorError(std::string(op) + ": " + msg);
}

template <typename T>
void require(bool ok, const char* op, const Tensor<T>& a, const Tensor<T>& b,
             const char* what) {
  if (!ok)
    shape_fail(op, std::string(what) + " (got " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()) + ")");
}

}  // namespace detail

// Broadcast pattern for binary elementwise ops, resolved once at op build.
enum class Bcast { kSame, kScalar, kRow, kCol };

template <typename T>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }
  size_t num_nodes() const { return nodes_.size(); }

  // ----- leaves ------------------------------------------------------------

  Var<T> input(Tensor<T> v) { return make(std::move(v), false, "input"); }

  Var<T> leaf(Tensor<T> v) { return make(std::move(v), grad_enabled_, "leaf"); }

  // Binds a store parameter (shared storage, no copy). Memoized per tape so a
  // parameter used twice accumulates one gradient buffer.
  Var<T> param(ParameterStore<T>& store, const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return Var<T>(it->second);
    Var<T> v = make(store.get(name), grad_enabled_, "param");
    bound_.emplace(name, v.node());
    bound_order_.push_back(name);
    return v;
  }

  // Gradients of every bound parameter (zero tensors for untouched ones).
  std::map<std::string, Tensor<T>> grads() {
    std::map<std::string, Tensor<T>> out;
    for (const auto& name : bound_order_) {
      Node<T>* n = bound_.at(name);
      out.emplace(name, n->grad_alloc ? n->grad : Tensor<T>::zeros(n->value.shape()));
    }
    return out;
  }

  // ----- backward ----------------------------------------------------------

  void backward(Var<T> loss) {
    if (!grad_enabled_) throw TensorError("backward on a no-grad tape");
    if (loss.numel() != 1)
      throw TensorError("backward requires a scalar loss, got " +
                        shape_str(loss.shape()));
    loss.node()->ensure_grad()[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>* n = it->get();
      if (n->grad_alloc && n->backward) n->backward();
    }
  }

  // ----- primitive ops -----------------------------------------------------

  Var<T> matmul(Var<T> a, Var<T> b, bool trans_a = false, bool trans_b = false) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    if (av.ndim() != 2 || bv.ndim() != 2)
      detail::require(false, "matmul", av, bv, "expects 2-D operands");
    const int64_t m = trans_a ? av.dim(1) : av.dim(0);
    const int64_t k = trans_a ? av.dim(0) : av.dim(1);
    const int64_t kb = trans_b ? bv.dim(1) : bv.dim(0);
    const int64_t n = trans_b ? bv.dim(0) : bv.dim(1);
    detail::require(k == kb, "matmul", av, bv, "inner dimensions differ");

    Tensor<T> out({m, n});
    {
      ECMap<T> A(av.data(), av.dim(0), av.dim(1));
      ECMap<T> B(bv.data(), bv.dim(0), bv.dim(1));
      EMap<T> C(out.data(), m, n);
      if (!trans_a && !trans_b) C.noalias() = A * B;
      else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
      else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
      else C.noalias() = A.transpose() * B.transpose();
    }
    Var<T> y = make(std::move(out), a.node()->requires_grad || b.node()->requires_grad,
                    "matmul");
    if (y.node()->requires_grad)
      y.node()->backward = [an = a.node(), bn = b.node(), yn = y.node(), trans_a,
                            trans_b, m, n, k]() {
        ECMap<T> dY(yn->grad.data(), m, n);
        ECMap<T> A(an->value.data(), an->value.dim(0), an->value.dim(1));
        ECMap<T> B(bn->value.data(), bn->value.dim(0), bn->value.dim(1));
        if (an->requires_grad) {
          EMap<T> dA(an->ensure_grad().data(), an->value.dim(0), an->value.dim(1));
          if (!trans_a && !trans_b) dA.noalias() += dY * B.transpose();
          else if (!trans_a && trans_b) dA.noalias() += dY * B;
          else if (trans_a && !trans_b) dA.noalias() += B * dY.transpose();
          else dA.noalias() += B.transpose() * dY.transpose();
        }
        if (bn->requires_grad) {
          EMap<T> dB(bn->ensure_grad().data(), bn->value.dim(0), bn->value.dim(1));
          if (!trans_a && !trans_b) dB.noalias() += A.transpose() * dY;
          else if (trans_a && !trans_b) dB.noalias() += A * dY;
          else if (!trans_a && trans_b) dB.noalias() += dY.transpose() * A;
          else dB.noalias() += dY.transpose() * A.transpose();
        }
      };
    return y;
  }

  // Batched matmul over matching leading dim: (B,M,K) x (B,K,N) -> (B,M,N).
  Var<T> bmm(Var<T> a, Var<T> b, bool trans_b = false) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    if (av.ndim() != 3 || bv.ndim() != 3)
      detail::require(false, "bmm", av, bv, "expects 3-D operands");
    detail::require(av.dim(0) == bv.dim(0), "bmm", av, bv, "batch dims differ");
    const int64_t batch = av.dim(0), m = av.dim(1), k = av.dim(2);
    const int64_t kb = trans_b ? bv.dim(2) : bv.dim(1);
    const int64_t n = trans_b ? bv.dim(1) : bv.dim(2);
    detail::require(k == kb, "bmm", av, bv, "inner dimensions differ");

    Tensor<T> out({batch, m, n});
    for (int64_t i = 0; i < batch; ++i) {
      ECMap<T> A(av.data() + i * m * k, m, k);
      ECMap<T> B(bv.data() + i * bv.dim(1) * bv.dim(2), bv.dim(1), bv.dim(2));
      EMap<T> C(out.data() + i * m * n, m, n);
      if (trans_b) C.noalias() = A * B.transpose();
      else C.noalias() = A * B;
    }
    Var<T> y = make(std::move(out), a.node()->requires_grad || b.node()->requires_grad,
                    "bmm");
    if (y.node()->requires_grad)
      y.node()->backward = [an = a.node(), bn = b.node(), yn = y.node(), trans_b,
                            batch, m, n, k]() {
        const int64_t br = bn->value.dim(1), bc = bn->value.dim(2);
        for (int64_t i = 0; i < batch; ++i) {
          ECMap<T> dY(yn->grad.data() + i * m * n, m, n);
          ECMap<T> A(an->value.data() + i * m * k, m, k);
          ECMap<T> B(bn->value.data() + i * br * bc, br, bc);
          if (an->requires_grad) {
            EMap<T> dA(an->ensure_grad().data() + i * m * k, m, k);
            if (trans_b) dA.noalias() += dY * B;
            else dA.noalias() += dY * B.transpose();
          }
          if (bn->requires_grad) {
            EMap<T> dB(bn->ensure_grad().data() + i * br * bc, br, bc);
            if (trans_b) dB.noalias() += dY.transpose() * A;
            else dB.noalias() += A.transpose() * dY;
          }
        }
      };
    return y;
  }

  // 2-D convolution, NCHW input, (O,C,kh,kw) weight, per-channel bias.
  Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, int64_t stride, int64_t pad) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& wv = w.value();
    if (xv.ndim() != 4 || wv.ndim() != 4)
      detail::require(false, "conv2d", xv, wv, "expects NCHW input and OCHW weight");
    detail::require(xv.dim(1) == wv.dim(1), "conv2d", xv, wv,
                    "channel counts differ");
    const int64_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), iw = xv.dim(3);
    const int64_t o = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    if (bias.numel() != o)
      detail::require(false, "conv2d", bias.value(), wv, "bias size != out channels");
    const int64_t ho = (h + 2 * pad - kh) / stride + 1;
    const int64_t wo = (iw + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0)
      detail::shape_fail("conv2d", "empty output for input " + shape_str(xv.shape()));

    const int64_t ckk = c * kh * kw, hw = ho * wo;
    Tensor<T> out({n, o, ho, wo});
    std::vector<T> col(static_cast<size_t>(hw * ckk));
    for (int64_t s = 0; s < n; ++s) {
      im2col(xv.data() + s * c * h * iw, c, h, iw, kh, kw, stride, pad, ho, wo,
             col.data());
      ECMap<T> W2(wv.data(), o, ckk);
      ECMap<T> Col(col.data(), hw, ckk);
      EMap<T> Out(out.data() + s * o * hw, o, hw);
      Out.noalias() = W2 * Col.transpose();
      for (int64_t ch = 0; ch < o; ++ch)
        Out.row(ch).array() += bias.value()[ch];
    }
    Var<T> y = make(std::move(out),
                    x.node()->requires_grad || w.node()->requires_grad ||
                        bias.node()->requires_grad,
                    "conv2d");
    if (y.node()->requires_grad)
      y.node()->backward = [xn = x.node(), wn = w.node(), bn = bias.node(),
                            yn = y.node(), n, c, h, iw, o, kh, kw, stride, pad, ho,
                            wo]() {
        const int64_t ckk = c * kh * kw, hw = ho * wo;
        std::vector<T> col(static_cast<size_t>(hw * ckk));
        std::vector<T> dcol(static_cast<size_t>(hw * ckk));
        for (int64_t s = 0; s < n; ++s) {
          ECMap<T> dOut(yn->grad.data() + s * o * hw, o, hw);
          if (wn->requires_grad || bn->requires_grad) {
            im2col(xn->value.data() + s * c * h * iw, c, h, iw, kh, kw, stride,
                   pad, ho, wo, col.data());
            if (wn->requires_grad) {
              EMap<T> dW(wn->ensure_grad().data(), o, ckk);
              ECMap<T> Col(col.data(), hw, ckk);
              dW.noalias() += dOut * Col;
            }
            if (bn->requires_grad) {
              Tensor<T>& db = bn->ensure_grad();
              const T* dy = yn->grad.data() + s * o * hw;
              for (int64_t ch = 0; ch < o; ++ch) {
                T acc = T(0);
                for (int64_t j = 0; j < hw; ++j) acc += dy[ch * hw + j];
                db[ch] += acc;
              }
            }
          }
          if (xn->requires_grad) {
            ECMap<T> W2(wn->value.data(), o, ckk);
            EMap<T> dCol(dcol.data(), hw, ckk);
            dCol.noalias() = dOut.transpose() * W2;
            col2im(dcol.data(), c, h, iw, kh, kw, stride, pad, ho, wo,
                   xn->ensure_grad().data() + s * c * h * iw);
          }
        }
      };
    return y;
  }

  // ----- elementwise -------------------------------------------------------

  Var<T> add(Var<T> a, Var<T> b) { return binary(a, b, "add", /*is_mul=*/false); }
  Var<T> mul(Var<T> a, Var<T> b) { return binary(a, b, "mul", /*is_mul=*/true); }

  Var<T> sub(Var<T> a, Var<T> b) { return add(a, affine(b, T(-1), T(0))); }

  // k*x + c, elementwise with scalar constants.
  Var<T> affine(Var<T> x, T k, T c) {
    Tensor<T> out(x.shape());
    const Tensor<T>& xv = x.value();
    for (int64_t i = 0; i < xv.numel(); ++i) out[i] = k * xv[i] + c;
    Var<T> y = make(std::move(out), x.node()->requires_grad, "affine");
    if (y.node()->requires_grad)
      y.node()->backward = [xn = x.node(), yn = y.node(), k]() {
        Tensor<T>& dx = xn->ensure_grad();
        for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += k * yn->grad[i];
      };
    return y;
  }

  Var<T> relu(Var<T> x) {
    return unary(x, "relu", [](T v) { return v > T(0) ? v : T(0); },
                 [](T v, T) { return v > T(0) ? T(1) : T(0); });
  }
  Var<T> tanh_(Var<T> x) {
    return unary(x, "tanh", [](T v) { return std::tanh(v); },
                 [](T, T y) { return T(1) - y * y; });
  }
  Var<T> sigmoid(Var<T> x) {
    return unary(x, "sigmoid",
                 [](T v) { return T(1) / (T(1) + std::exp(-v)); },
                 [](T, T y) { return y * (T(1) - y); });
  }
  Var<T> exp_(Var<T> x) {
    return unary(x, "exp", [](T v) { return std::exp(v); },
                 [](T, T y) { return y; });
  }
  Var<T> log_(Var<T> x) {
    return unary(x, "log", [](T v) { return std::log(v); },
                 [](T v, T) { return T(1) / v; });
  }
  Var<T> abs_(Var<T> x) {
    return unary(x, "abs", [](T v) { return std::abs(v); },
                 [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
  }

  Var<T> clip(Var<T> x, T lo, T hi) {
    return unary(x, "clip",
                 [lo, hi](T v) { return v < lo ? lo : (v > hi ? hi : v); },
                 [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
  }

  // Elementwise min; gradient routes to the smaller operand (ties to a).
  Var<T> minimum(Var<T> a, Var<T> b) { return extremum(a, b, "minimum", true); }
  Var<T> maximum(Var<T> a, Var<T> b) { return extremum(a, b, "maximum", false); }

  // ----- softmax family (last axis) ----------------------------------------

  Var<T> softmax(Var<T> x) { return softmax_impl(x, Var<T>(), "softmax"); }

  // mask holds 0/1 per key; rows with no unmasked key produce exact zeros.
  // mask shape: last dim of x (broadcast to all rows) or same shape as x.
  Var<T> masked_softmax(Var<T> x, const Tensor<T>& mask) {
    Var<T> m = input(mask);
    return softmax_impl(x, m, "masked_softmax");
  }

  Var<T> log_softmax(Var<T> x) {
    const Tensor<T>& xv = x.value();
    const int64_t k = xv.cols(), r = xv.numel() / std::max<int64_t>(k, 1);
    Tensor<T> out(xv.shape());
    for (int64_t i = 0; i < r; ++i) {
      const T* row = xv.data() + i * k;
      T mx = row[0];
      for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
      T sum = T(0);
      for (int64_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
      const T lse = mx + std::log(sum);
      for (int64_t j = 0; j < k; ++j) out[i * k + j] = row[j] - lse;
    }
    Var<T> y = make(std::move(out), x.node()->requires_grad, "log_softmax");
    if (y.node()->requires_grad)
      y.node()->backward = [xn = x.node(), yn = y.node(), r, k]() {
        Tensor<T>& dx = xn->ensure_grad();
        for (int64_t i = 0; i < r; ++i) {
          T dsum = T(0);
          for (int64_t j = 0; j < k; ++j) dsum += yn->grad[i * k + j];
          for (int64_t j = 0; j < k; ++j)
            dx[i * k + j] += yn->grad[i * k + j] - std::exp(yn->value[i * k + j]) * dsum;
        }
      };
    return y;
  }

  // ----- gather / concat / reshape / reductions ----------------------------

  // Rows of x (axis 0) selected by integer indices. Embedding lookup is
  // gather on a parameter table.
  Var<T> gather(Var<T> x, std::vector<int64_t> idx) {
    const Tensor<T>& xv = x.value();
    if (xv.ndim() < 1) detail::shape_fail("gather", "needs at least 1-D input");
    const int64_t rows = xv.dim(0);
    const int64_t stride = rows > 0 ? xv.numel() / rows : 0;
    for (int64_t i : idx)
      if (i < 0 || i >= rows)
        detail::shape_fail("gather", "index " + std::to_string(i) +
                                         " out of range for " + shape_str(xv.shape()));
    Shape oshape = xv.shape();
    oshape[0] = static_cast<int64_t>(idx.size());
    Tensor<T> out(oshape);
    for (size_t i = 0; i < idx.size(); ++i)
      std::copy(xv.data() + idx[i] * stride, xv.data() + (idx[i] + 1) * stride,
                out.data() + static_cast<int64_t>(i) * stride);
    Var<T> y = make(std::move(out), x.node()->requires_grad, "gather");
    if (y.node()->requires_grad)
      y.node()->backward = [xn = x.node(), yn = y.node(), idx = std::move(idx),
                            stride]() {
        Tensor<T>& dx = xn->ensure_grad();
        for (size_t i = 0; i < idx.size(); ++i) {
          const T* src = yn->grad.data() + static_cast<int64_t>(i) * stride;
          T* dst = dx.data() + idx[i] * stride;
          for (int64_t j = 0; j < stride; ++j) dst[j] += src[j];
        }
      };
    return y;
  }

  Var<T> embedding(ParameterStore<T>& store, const std::string& table,
                   const std::vector<int64_t>& ids) {
    return gather(param(store, table), ids);
  }

  // Concatenation along the last axis; leading dims must match.
  Var<T> concat(const std::vector<Var<T>>& xs) {
    if (xs.empty()) detail::shape_fail("concat", "no operands");
    const Shape& s0 = xs[0].shape();
    int64_t rows = xs[0].numel() / std::max<int64_t>(xs[0].value().cols(), 1);
    int64_t total_cols = 0;
    bool needs = false;
    for (const auto& v : xs) {
      const Tensor<T>& tv = v.value();
      if (tv.ndim() != static_cast<int64_t>(s0.size()))
        detail::require(false, "concat", tv, xs[0].value(), "rank mismatch");
      for (size_t d = 0; d + 1 < s0.size(); ++d)
        if (tv.shape()[d] != s0[d])
          detail::require(false, "concat", tv, xs[0].value(),
                          "leading dims differ");
      total_cols += tv.cols();
      needs = needs || v.node()->requires_grad;
    }
    Shape oshape = s0;
    oshape.back() = total_cols;
    Tensor<T> out(oshape);
    int64_t off = 0;
    for (const auto& v : xs) {
      const Tensor<T>& tv = v.value();
      const int64_t c = tv.cols();
      for (int64_t r = 0; r < rows; ++r)
        std::copy(tv.data() + r * c, tv.data() + (r + 1) * c,
                  out.data() + r * total_cols + off);
      off += c;
    }
    Var<T> y = make(std::move(out), needs, "concat");
    if (needs) {
      std::vector<Node<T>*> parents;
      for (const auto& v : xs) parents.push_back(v.node());
      y.node()->backward = [parents = std::move(parents), yn = y.node(), rows,
                            total_cols]() {
        int64_t off = 0;
        for (Node<T>* p : parents) {
          const int64_t c = p->value.cols();
          if (p->requires_grad) {
            Tensor<T>& dp = p->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
              const T* src = yn->grad.data() + r * total_cols + off;
              T* dst = dp.data() + r * c;
              for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
            }
          }
          off += c;
        }
      };
    }
    return y;
  }

  Var<T> reshape(Var<T> x, Shape s) {
    Tensor<T> out = x.value().reshaped(std::move(s));
    Var<T> y = make(std::move(out), x.node()->requires_grad, "reshape");
    if (y.node()->requires_grad)
      y.node()->backward = [xn = x.node(), yn = y.node()]() {
        Tensor<T>& dx = xn->ensure_grad();
        for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += yn->grad[i];
      };
    return y;
  }

  Var<T> sum_axis(Var<T> x, int64_t axis) { return reduce(x, axis, false); }
  Var<T> mean_axis(Var<T> x, int64_t axis) { return reduce(x, axis, true); }

  Var<T> sum_all(Var<T> x) { return reduce_all(x, false); }
  Var<T> mean_all(Var<T> x) { return reduce_all(x, true); }

 private:
  Var<T> make(Tensor<T> v, bool needs_grad, const char* op) {
    nodes_.push_back(std::make_unique<Node<T>>());
    Node<T>* n = nodes_.back().get();
    n->value = std::move(v);
    n->requires_grad = needs_grad && grad_enabled_;
    n->op = op;
    return Var<T>(n);
  }

  template <typename FwdFn, typename GradFn>
  Var<T> unary(Var<T> x, const char* op, FwdFn f, GradFn df) {
    const Tensor<T>& xv = x.value();
    Tensor<T> out(xv.shape());
    for (int64_t i = 0; i < xv.numel(); ++i) out[i] = f(xv[i]);
    Var<T> y = make(std::move(out), x.node()->requires_grad, op);
    if (y.node()->requires_grad)
      y.node()->backward = [xn = x.node(), yn = y.node(), df]() {
        Tensor<T>& dx = xn->ensure_grad();
        for (int64_t i = 0; i < dx.numel(); ++i)
          dx[i] += df(xn->value[i], yn->value[i]) * yn->grad[i];
      };
    return y;
  }

  static Bcast resolve_bcast(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.same_shape(b)) return Bcast::kSame;
    if (b.numel() == 1) return Bcast::kScalar;
    if (b.ndim() == 1 && b.dim(0) == a.cols()) return Bcast::kRow;
    if (b.ndim() >= 2 && b.cols() == 1 && b.numel() == a.numel() / a.cols())
      return Bcast::kCol;
    detail::require(false, op, a, b, "shapes are not broadcast-compatible");
    return Bcast::kSame;
  }

  Var<T> binary(Var<T> a, Var<T> b, const char* op, bool is_mul) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    const Bcast bc = resolve_bcast(av, bv, op);
    const int64_t cols = av.cols(), n = av.numel();
    Tensor<T> out(av.shape());
    switch (bc) {
      case Bcast::kSame:
        for (int64_t i = 0; i < n; ++i)
          out[i] = is_mul ? av[i] * bv[i] : av[i] + bv[i];
        break;
      case Bcast::kScalar: {
        const T s = bv[0];
        for (int64_t i = 0; i < n; ++i) out[i] = is_mul ? av[i] * s : av[i] + s;
        break;
      }
      case Bcast::kRow:
        for (int64_t i = 0; i < n; ++i) {
          const T s = bv[i % cols];
          out[i] = is_mul ? av[i] * s : av[i] + s;
        }
        break;
      case Bcast::kCol:
        for (int64_t i = 0; i < n; ++i) {
          const T s = bv[i / cols];
          out[i] = is_mul ? av[i] * s : av[i] + s;
        }
        break;
    }
    Var<T> y = make(std::move(out), a.node()->requires_grad || b.node()->requires_grad,
                    op);
    if (y.node()->requires_grad)
      y.node()->backward = [an = a.node(), bn = b.node(), yn = y.node(), bc, cols,
                            n, is_mul]() {
        if (an->requires_grad) {
          Tensor<T>& da = an->ensure_grad();
          if (!is_mul) {
            for (int64_t i = 0; i < n; ++i) da[i] += yn->grad[i];
          } else {
            switch (bc) {
              case Bcast::kSame:
                for (int64_t i = 0; i < n; ++i) da[i] += yn->grad[i] * bn->value[i];
                break;
              case Bcast::kScalar:
                for (int64_t i = 0; i < n; ++i) da[i] += yn->grad[i] * bn->value[0];
                break;
              case Bcast::kRow:
                for (int64_t i = 0; i < n; ++i)
                  da[i] += yn->grad[i] * bn->value[i % cols];
                break;
              case Bcast::kCol:
                for (int64_t i = 0; i < n; ++i)
                  da[i] += yn->grad[i] * bn->value[i / cols];
                break;
            }
          }
        }
        if (bn->requires_grad) {
          Tensor<T>& db = bn->ensure_grad();
          auto w = [&](int64_t i) { return is_mul ? an->value[i] : T(1); };
          switch (bc) {
            case Bcast::kSame:
              for (int64_t i = 0; i < n; ++i) db[i] += yn->grad[i] * w(i);
              break;
            case Bcast::kScalar:
              for (int64_t i = 0; i < n; ++i) db[0] += yn->grad[i] * w(i);
              break;
            case Bcast::kRow:
              for (int64_t i = 0; i < n; ++i) db[i % cols] += yn->grad[i] * w(i);
              break;
            case Bcast::kCol:
              for (int64_t i = 0; i < n; ++i) db[i / cols] += yn->grad[i] * w(i);
              break;
          }
        }
      };
    return y;
  }

  Var<T> extremum(Var<T> a, Var<T> b, const char* op, bool take_min) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    detail::require(av.same_shape(bv), op, av, bv, "shapes differ");
    Tensor<T> out(av.shape());
    const int64_t n = av.numel();
    for (int64_t i = 0; i < n; ++i)
      out[i] = take_min ? std::min(av[i], bv[i]) : std::max(av[i], bv[i]);
    Var<T> y = make(std::move(out), a.node()->requires_grad || b.node()->requires_grad,
                    op);
    if (y.node()->requires_grad)
      y.node()->backward = [an = a.node(), bn = b.node(), yn = y.node(), n,
                            take_min]() {
        for (int64_t i = 0; i < n; ++i) {
          const bool pick_a = take_min ? (an->value[i] <= bn->value[i])
                                       : (an->value[i] >= bn->value[i]);
          if (pick_a) {
            if (an->requires_grad) an->ensure_grad()[i] += yn->grad[i];
          } else {
            if (bn->requires_grad) bn->ensure_grad()[i] += yn->grad[i];
          }
        }
      };
    return y;
  }

  Var<T> softmax_impl(Var<T> x, Var<T> mask, const char* op) {
    const Tensor<T>& xv = x.value();
    const int64_t k = xv.cols(), r = xv.numel() / std::max<int64_t>(k, 1);
    const bool masked = mask.valid();
    if (masked) {
      const Tensor<T>& mv = mask.value();
      if (!(mv.numel() == k || mv.same_shape(xv)))
        detail::require(false, op, xv, mv,
                        "mask must match last dim or full shape");
    }
    auto mask_at = [&](int64_t row, int64_t j) -> bool {
      if (!masked) return true;
      const Tensor<T>& mv = mask.value();
      return (mv.numel() == k ? mv[j] : mv[row * k + j]) != T(0);
    };
    Tensor<T> out(xv.shape());
    for (int64_t i = 0; i < r; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (int64_t j = 0; j < k; ++j)
        if (mask_at(i, j)) mx = std::max(mx, xv[i * k + j]);
      if (mx == -std::numeric_limits<T>::infinity()) {
        for (int64_t j = 0; j < k; ++j) out[i * k + j] = T(0);
        continue;
      }
      T sum = T(0);
      for (int64_t j = 0; j < k; ++j) {
        const T e = mask_at(i, j) ? std::exp(xv[i * k + j] - mx) : T(0);
        out[i * k + j] = e;
        sum += e;
      }
      for (int64_t j = 0; j < k; ++j) out[i * k + j] /= sum;
    }
    Var<T> y = make(std::move(out), x.node()->requires_grad, op);
    if (y.node()->requires_grad)
      y.node()->backward = [xn = x.node(), yn = y.node(), r, k]() {
        Tensor<T>& dx = xn->ensure_grad();
        for (int64_t i = 0; i < r; ++i) {
          T dot = T(0);
          for (int64_t j = 0; j < k; ++j)
            dot += yn->value[i * k + j] * yn->grad[i * k + j];
          for (int64_t j = 0; j < k; ++j)
            dx[i * k + j] += yn->value[i * k + j] * (yn->grad[i * k + j] - dot);
        }
      };
    return y;
  }

  Var<T> reduce(Var<T> x, int64_t axis, bool mean) {
    const Tensor<T>& xv = x.value();
    if (axis < 0) axis += xv.ndim();
    if (axis < 0 || axis >= xv.ndim())
      detail::shape_fail("reduce", "axis out of range for " + shape_str(xv.shape()));
    int64_t outer = 1, inner = 1;
    const int64_t nred = xv.dim(axis);
    for (int64_t d = 0; d < axis; ++d) outer *= xv.dim(d);
    for (int64_t d = axis + 1; d < xv.ndim(); ++d) inner *= xv.dim(d);
    Shape oshape;
    for (int64_t d = 0; d < xv.ndim(); ++d)
      if (d != axis) oshape.push_back(xv.dim(d));
    if (oshape.empty()) oshape.push_back(1);
    Tensor<T> out(oshape, T(0));
    for (int64_t a = 0; a < outer; ++a)
      for (int64_t m = 0; m < nred; ++m) {
        const T* src = xv.data() + (a * nred + m) * inner;
        T* dst = out.data() + a * inner;
        for (int64_t j = 0; j < inner; ++j) dst[j] += src[j];
      }
    const T scale = mean ? T(1) / static_cast<T>(nred) : T(1);
    if (mean)
      for (int64_t i = 0; i < out.numel(); ++i) out[i] *= scale;
    Var<T> y = make(std::move(out), x.node()->requires_grad, mean ? "mean" : "sum");
    if (y.node()->requires_grad)
      y.node()->backward = [xn = x.node(), yn = y.node(), outer, nred, inner,
                            scale]() {
        Tensor<T>& dx = xn->ensure_grad();
        for (int64_t a = 0; a < outer; ++a)
          for (int64_t m = 0; m < nred; ++m) {
            T* dst = dx.data() + (a * nred + m) * inner;
            const T* src = yn->grad.data() + a * inner;
            for (int64_t j = 0; j < inner; ++j) dst[j] += scale * src[j];
          }
      };
    return y;
  }

  Var<T> reduce_all(Var<T> x, bool mean) {
    const Tensor<T>& xv = x.value();
    const int64_t n = xv.numel();
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) acc += xv[i];
    const T scale = mean ? T(1) / static_cast<T>(n) : T(1);
    Tensor<T> out = Tensor<T>::scalar(acc * scale);
    Var<T> y = make(std::move(out), x.node()->requires_grad,
                    mean ? "mean_all" : "sum_all");
    if (y.node()->requires_grad)
      y.node()->backward = [xn = x.node(), yn = y.node(), n, scale]() {
        Tensor<T>& dx = xn->ensure_grad();
        const T g = yn->grad[0] * scale;
        for (int64_t i = 0; i < n; ++i) dx[i] += g;
      };
    return y;
  }

  static void im2col(const T* img, int64_t c, int64_t h, int64_t w, int64_t kh,
                     int64_t kw, int64_t stride, int64_t pad, int64_t ho, int64_t wo,
                     T* col) {
    // col layout: (ho*wo) rows x (c*kh*kw) cols, row-major
    for (int64_t y = 0; y < ho; ++y)
      for (int64_t x = 0; x < wo; ++x) {
        T* dst = col + (y * wo + x) * c * kh * kw;
        for (int64_t ch = 0; ch < c; ++ch) {
          const T* src = img + ch * h * w;
          for (int64_t ky = 0; ky < kh; ++ky) {
            const int64_t iy = y * stride - pad + ky;
            for (int64_t kx = 0; kx < kw; ++kx) {
              const int64_t ix = x * stride - pad + kx;
              *dst++ = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? src[iy * w + ix]
                                                                : T(0);
            }
          }
        }
      }
  }

  static void col2im(const T* col, int64_t c, int64_t h, int64_t w, int64_t kh,
                     int64_t kw, int64_t stride, int64_t pad, int64_t ho, int64_t wo,
                     T* img) {
    for (int64_t y = 0; y < ho; ++y)
      for (int64_t x = 0; x < wo; ++x) {
        const T* src = col + (y * wo + x) * c * kh * kw;
        for (int64_t ch = 0; ch < c; ++ch) {
          T* dst = img + ch * h * w;
          for (int64_t ky = 0; ky < kh; ++ky) {
            const int64_t iy = y * stride - pad + ky;
            for (int64_t kx = 0; kx < kw; ++kx) {
              const int64_t ix = x * stride - pad + kx;
              if (iy >= 0 && iy < h && ix >= 0 && ix < w) dst[iy * w + ix] += *src;
              ++src;
            }
          }
        }
      }
  }

  bool grad_enabled_;
  std::deque<std::unique_ptr<Node<T>>> nodes_;
  std::unordered_map<std::string, Node<T>*> bound_;
  std::vector<std::string> bound_order_;
};

}  // namespace nie
