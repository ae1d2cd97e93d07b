#pragma once

// Named parameter tensors plus their Adam moment buffers. The single learner
// mutates a store; rollout workers only ever see deep-copied snapshots.

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "nie/tensor.hpp"

namespace nie {

template <typename T>
class ParameterStore {
 public:
  struct Entry {
    Tensor<T> value;
    Tensor<T> m;  // first Adam moment
    Tensor<T> v;  // second Adam moment
  };

  Tensor<T>& add(const std::string& name, Tensor<T> init) {
    if (entries_.count(name))
      throw TensorError("parameter '" + name + "' already exists");
    Entry e{std::move(init), Tensor<T>(), Tensor<T>()};
    e.m = Tensor<T>::zeros(e.value.shape());
    e.v = Tensor<T>::zeros(e.value.shape());
    return entries_.emplace(name, std::move(e)).first->second.value;
  }

  bool has(const std::string& name) const { return entries_.count(name) > 0; }

  Tensor<T>& get(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw TensorError("unknown parameter '" + name + "'");
    return it->second.value;
  }
  const Tensor<T>& get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw TensorError("unknown parameter '" + name + "'");
    return it->second.value;
  }

  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw TensorError("unknown parameter '" + name + "'");
    return it->second;
  }

  // Deterministic (name-sorted) iteration.
  std::map<std::string, Entry>& entries() { return entries_; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  size_t size() const { return entries_.size(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [k, e] : entries_) out.push_back(k);
    return out;
  }

  int64_t numel() const {
    int64_t n = 0;
    for (const auto& [k, e] : entries_) n += e.value.numel();
    return n;
  }

  int64_t step_count = 0;

  // Immutable value copy for concurrent rollout workers.
  ParameterStore snapshot() const {
    ParameterStore out;
    out.step_count = step_count;
    for (const auto& [k, e] : entries_)
      out.entries_.emplace(k, Entry{e.value.clone(), e.m.clone(), e.v.clone()});
    return out;
  }

 private:
  std::map<std::string, Entry> entries_;
};

// ---------------------------------------------------------------------------
// Checkpoint format: "NIEC" magic, u32 version, i64 step count, u32 count,
// then per parameter a length-prefixed name, dtype tag, dims and raw
// little-endian values followed by both Adam moment buffers. Training resumes
// bit-exactly from a checkpoint.
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
constexpr uint8_t dtype_tag();
template <>
constexpr uint8_t dtype_tag<float>() { return 0; }
template <>
constexpr uint8_t dtype_tag<double>() { return 1; }

template <typename V>
void write_pod(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <typename V>
V read_pod(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  return v;
}
}  // namespace detail

inline constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const ParameterStore<T>& store, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw TensorError("cannot open checkpoint for writing: " + path);
  os.write("NIEC", 4);
  detail::write_pod<uint32_t>(os, kCheckpointVersion);
  detail::write_pod<int64_t>(os, store.step_count);
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(store.size()));
  for (const auto& [name, e] : store.entries()) {
    detail::write_pod<uint16_t>(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<uint8_t>(os, detail::dtype_tag<T>());
    detail::write_pod<uint8_t>(os, static_cast<uint8_t>(e.value.ndim()));
    for (int64_t i = 0; i < e.value.ndim(); ++i)
      detail::write_pod<uint32_t>(os, static_cast<uint32_t>(e.value.dim(i)));
    const auto bytes = static_cast<std::streamsize>(sizeof(T) * e.value.numel());
    os.write(reinterpret_cast<const char*>(e.value.data()), bytes);
    os.write(reinterpret_cast<const char*>(e.m.data()), bytes);
    os.write(reinterpret_cast<const char*>(e.v.data()), bytes);
  }
  if (!os) throw TensorError("checkpoint write failed: " + path);
}

template <typename T>
void load_checkpoint(ParameterStore<T>& store, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw TensorError("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "NIEC")
    throw TensorError("not a checkpoint file: " + path);
  const auto version = detail::read_pod<uint32_t>(is);
  if (version != kCheckpointVersion)
    throw TensorError("unsupported checkpoint version " + std::to_string(version));
  ParameterStore<T> fresh;
  fresh.step_count = detail::read_pod<int64_t>(is);
  const auto count = detail::read_pod<uint32_t>(is);
  for (uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_pod<uint16_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto dtype = detail::read_pod<uint8_t>(is);
    if (dtype != detail::dtype_tag<T>())
      throw TensorError("checkpoint dtype mismatch for '" + name + "'");
    const auto ndim = detail::read_pod<uint8_t>(is);
    Shape shape(ndim);
    for (uint8_t d = 0; d < ndim; ++d) shape[d] = detail::read_pod<uint32_t>(is);
    Tensor<T> t(shape);
    const auto bytes = static_cast<std::streamsize>(sizeof(T) * t.numel());
    is.read(reinterpret_cast<char*>(t.data()), bytes);
    fresh.add(name, std::move(t));
    auto& e = fresh.entry(name);
    is.read(reinterpret_cast<char*>(e.m.data()), bytes);
    is.read(reinterpret_cast<char*>(e.v.data()), bytes);
    if (!is) throw TensorError("truncated checkpoint: " + path);
  }
  store = std::move(fresh);
}

}  // namespace nie
