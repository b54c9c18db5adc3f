#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "dt/common.hpp"

namespace dt {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) n *= size_t(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor. Plain value type; all layout is NCHW where four
// dimensions are involved.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), T(0)) {}
  Tensor(Shape s, T fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    require(data.size() == shape_numel(shape), "tensor data does not match shape " + shape_str(shape));
  }

  size_t numel() const { return data.size(); }
  int dim(int i) const { return shape[size_t(i)]; }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](size_t i) { return data[i]; }
  const T& operator[](size_t i) const { return data[i]; }

  // 2D indexing for [H,W] tensors.
  T& at(int r, int c) { return data[size_t(r) * size_t(shape[1]) + size_t(c)]; }
  const T& at(int r, int c) const { return data[size_t(r) * size_t(shape[1]) + size_t(c)]; }

  // NCHW indexing.
  T& at4(int n, int c, int h, int w) {
    return data[((size_t(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  const T& at4(int n, int c, int h, int w) const {
    return data[((size_t(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

template <class T>
inline T tensor_sum(const Tensor<T>& t) {
  T acc = T(0);
  for (T v : t.data) acc += v;
  return acc;
}

template <class T>
inline T tensor_mean(const Tensor<T>& t) {
  return t.numel() ? tensor_sum(t) / T(t.numel()) : T(0);
}

template <class T>
inline T tensor_max_abs(const Tensor<T>& t) {
  T m = T(0);
  for (T v : t.data) m = std::max(m, std::abs(v));
  return m;
}

template <class T>
inline bool tensor_all_finite(const Tensor<T>& t) {
  for (T v : t.data)
    if (!is_finite(v)) return false;
  return true;
}

}  // namespace dt
