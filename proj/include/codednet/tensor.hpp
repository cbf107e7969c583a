#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace codednet {

inline std::int64_t numel_of(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dims must be positive");
    n *= d;
  }
  return n;
}

// Dense row-major tensor. Plain value type: ops copy/move freely.
template <typename T>
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<T> data;

  Tensor() = default;

  static Tensor zeros(std::vector<std::int64_t> s) {
    Tensor t;
    std::int64_t n = numel_of(s);
    t.shape = std::move(s);
    t.data.assign(static_cast<std::size_t>(n), T(0));
    return t;
  }

  static Tensor full(std::vector<std::int64_t> s, T v) {
    Tensor t = zeros(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor from(std::vector<std::int64_t> s, std::vector<T> values) {
    if (numel_of(s) != static_cast<std::int64_t>(values.size()))
      throw std::invalid_argument("Tensor::from: shape/data size mismatch");
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(values);
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i)
      s += (i ? "," : "") + std::to_string(shape[i]);
    return s + "]";
  }
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  Tensor<To> out;
  out.shape = t.shape;
  out.data.reserve(t.data.size());
  for (From v : t.data) out.data.push_back(static_cast<To>(v));
  return out;
}

}  // namespace codednet
