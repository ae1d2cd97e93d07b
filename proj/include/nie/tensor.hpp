#pragma once

// Dense row-major tensors. Storage is shared on copy; use clone() for a deep
// copy (parameter snapshots sent to rollout workers rely on this).

#include <algorithm>
#include <cstdint>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nie {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

struct TensorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
class Tensor {
 public:
  Tensor() : shape_{0}, data_(std::make_shared<std::vector<T>>()) {}

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(shape_numel(shape_), fill)) {
    check_shape();
  }

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(std::move(values))) {
    check_shape();
    if (static_cast<int64_t>(data_->size()) != shape_numel(shape_))
      throw TensorError("tensor data length " + std::to_string(data_->size()) +
                        " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }

  static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(data_->size()); }

  T* data() { return data_->data(); }
  const T* data() const { return data_->data(); }
  T& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

  // Rows/cols of the trailing 2-D view: all leading dims folded into batch.
  int64_t rows() const { return ndim() >= 2 ? shape_[shape_.size() - 2] : 1; }
  int64_t cols() const { return ndim() >= 1 ? shape_.back() : 0; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor clone() const {
    Tensor out;
    out.shape_ = shape_;
    out.data_ = std::make_shared<std::vector<T>>(*data_);
    return out;
  }

  // Shares storage; element count must be preserved.
  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      throw TensorError("reshape " + shape_str(shape_) + " -> " + shape_str(s) +
                        " changes element count");
    Tensor out;
    out.shape_ = std::move(s);
    out.data_ = data_;
    return out;
  }

  void fill(T v) { std::fill(data_->begin(), data_->end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>((*data_)[i]);
    return out;
  }

  T sum() const { return std::accumulate(data_->begin(), data_->end(), T(0)); }

  T max_abs() const {
    T m = T(0);
    for (T v : *data_) m = std::max(m, std::abs(v));
    return m;
  }

  bool shares_storage(const Tensor& o) const { return data_ == o.data_; }

 private:
  void check_shape() const {
    for (int64_t d : shape_)
      if (d < 0) throw TensorError("negative dimension in shape " + shape_str(shape_));
  }

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
};

// Gaussian fill, used by parameter initialisers.
template <typename T, typename Rng>
void fill_normal(Tensor<T>& t, Rng& rng, T stddev) {
  std::normal_distribution<double> d(0.0, static_cast<double>(stddev));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(d(rng));
}

template <typename T, typename Rng>
void fill_uniform(Tensor<T>& t, Rng& rng, T lo, T hi) {
  std::uniform_real_distribution<double> d(static_cast<double>(lo), static_cast<double>(hi));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(d(rng));
}

}  // namespace nie
