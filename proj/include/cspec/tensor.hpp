#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "cspec/errors.hpp"

namespace cspec {

// Dense row-major tensor. Ranks used in practice: {H,W}, {C,H,W}, {Cout,Cin,Kh,Kw}.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), T(0));
  }
  Tensor(std::vector<int> s, T fill) : shape(std::move(s)) {
    data.assign(numel_of(shape), fill);
  }

  static size_t numel_of(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) n *= size_t(d);
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, T v) { return Tensor(std::move(s), v); }

  size_t numel() const { return data.size(); }
  int rank() const { return int(shape.size()); }
  int size(int i) const { return shape[size_t(i)]; }

  T& operator[](size_t i) { return data[i]; }
  const T& operator[](size_t i) const { return data[i]; }

  // (h, w)
  T& at(int y, int x) { return data[size_t(y) * shape[1] + x]; }
  const T& at(int y, int x) const { return data[size_t(y) * shape[1] + x]; }

  // (c, h, w)
  T& at(int c, int y, int x) {
    return data[(size_t(c) * shape[1] + y) * shape[2] + x];
  }
  const T& at(int c, int y, int x) const {
    return data[(size_t(c) * shape[1] + y) * shape[2] + x];
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  T max_value() const {
    T m = data.empty() ? T(0) : data[0];
    for (T v : data) m = std::max(m, v);
    return m;
  }

  T sum() const { return std::accumulate(data.begin(), data.end(), T(0)); }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
    return out;
  }

  static std::string shape_str(const std::vector<int>& s) {
    std::string r = "(";
    for (size_t i = 0; i < s.size(); ++i) {
      r += std::to_string(s[i]);
      if (i + 1 < s.size()) r += "x";
    }
    return r + ")";
  }
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace cspec
