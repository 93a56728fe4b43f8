#pragma once

#include <cstdint>
#include <new>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace yieldnet {

/// Eigen chooses vectorization peel points from pointer alignment, so
/// accumulation order (and float rounding) would vary with heap layout.
/// Fixing every buffer to one alignment keeps runs bitwise reproducible.
template <class T>
struct Aligned64Allocator {
  using value_type = T;
  Aligned64Allocator() = default;
  template <class U>
  Aligned64Allocator(const Aligned64Allocator<U>&) {}
  T* allocate(size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(64)));
  }
  void deallocate(T* p, size_t) noexcept { ::operator delete(p, std::align_val_t(64)); }
  template <class U>
  bool operator==(const Aligned64Allocator<U>&) const {
    return true;
  }
  template <class U>
  bool operator!=(const Aligned64Allocator<U>&) const {
    return false;
  }
};

template <class S>
using AlignedVec = std::vector<S, Aligned64Allocator<S>>;

/// Dense row-major tensor. Shapes are small, data lives in one flat vector.
template <class S>
struct Tensor {
  std::vector<int64_t> shape;
  AlignedVec<S> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> sh, S fill = S(0))
      : shape(std::move(sh)), data(numel_of(shape), fill) {}
  Tensor(std::vector<int64_t> sh, std::vector<S> d) : shape(std::move(sh)) {
    if (static_cast<int64_t>(d.size()) != numel_of(shape))
      throw std::invalid_argument("tensor: data size does not match shape");
    data.assign(d.begin(), d.end());
  }

  static int64_t numel_of(const std::vector<int64_t>& sh) {
    int64_t n = 1;
    for (int64_t e : sh) {
      if (e < 0) throw std::invalid_argument("tensor: negative extent");
      n *= e;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(size_t i) const { return shape.at(i); }
  size_t rank() const { return shape.size(); }

  S* ptr() { return data.data(); }
  const S* ptr() const { return data.data(); }

  S& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const S& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  void fill(S v) { std::fill(data.begin(), data.end(), v); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
    return out;
  }
};

inline std::string shape_str(const std::vector<int64_t>& sh) {
  std::string s = "[";
  for (size_t i = 0; i < sh.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(sh[i]);
  }
  return s + "]";
}

}  // namespace yieldnet
