#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "poisonforge/error.hpp"

namespace poisonforge {

/// Dense row-major tensor of a floating scalar. Images are N,C,H,W;
/// feature matrices are N,D. All heavy math lives in the consumers; this
/// type only owns storage and indexing.
template <typename T = float>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    v.assign(static_cast<std::size_t>(count(shape)), T(0));
  }
  Tensor(std::vector<int> s, std::vector<T> data)
      : shape(std::move(s)), v(std::move(data)) {
    if (static_cast<std::int64_t>(v.size()) != count(shape))
      throw ArgumentError("Tensor: data size does not match shape");
  }

  static std::int64_t count(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) {
      if (d < 0) throw ArgumentError("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape); }

  std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  T& at2(int n, int d) { return v[static_cast<std::size_t>(n) * dim(1) + d]; }
  T at2(int n, int d) const {
    return v[static_cast<std::size_t>(n) * dim(1) + d];
  }

  T& at4(int n, int c, int h, int w) {
    return v[((static_cast<std::size_t>(n) * dim(1) + c) * dim(2) + h) *
                 dim(3) +
             w];
  }
  T at4(int n, int c, int h, int w) const {
    return v[((static_cast<std::size_t>(n) * dim(1) + c) * dim(2) + h) *
                 dim(3) +
             w];
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    for (std::size_t i = 0; i < v.size(); ++i)
      out.v[i] = static_cast<U>(v[i]);
    return out;
  }

  /// Rows [i] of the leading dimension gathered into a new tensor.
  Tensor gather_rows(const std::vector<int>& rows) const {
    if (shape.empty()) throw ArgumentError("gather_rows: scalar tensor");
    std::vector<int> s = shape;
    s[0] = static_cast<int>(rows.size());
    Tensor out(s);
    std::int64_t stride = numel() / (shape[0] == 0 ? 1 : shape[0]);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const T* src = v.data() + rows[r] * stride;
      T* dst = out.v.data() + static_cast<std::int64_t>(r) * stride;
      for (std::int64_t i = 0; i < stride; ++i) dst[i] = src[i];
    }
    return out;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

using TensorF = Tensor<float>;

}  // namespace poisonforge
