#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "seqa/error.hpp"

namespace seqa {

/// Dense row-major tensor of doubles. Rank 0 = scalar, rank 1 = vector,
/// rank 2 = matrix; nothing higher is needed here.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    require(data.size() == numel_of(shape), "Tensor: data/shape mismatch");
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vector(std::vector<double> v) {
    std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor zeros(std::vector<std::size_t> s) {
    std::vector<double> d(numel_of(s), 0.0);
    return Tensor(std::move(s), std::move(d));
  }
  static Tensor full(std::vector<std::size_t> s, double v) {
    std::vector<double> d(numel_of(s), v);
    return Tensor(std::move(s), std::move(d));
  }
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v) {
    return Tensor({r, c}, std::move(v));
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool is_scalar() const { return shape.empty(); }

  std::size_t rows() const {
    require(rank() == 2, "Tensor: rows() needs rank 2");
    return shape[0];
  }
  std::size_t cols() const {
    require(rank() == 2, "Tensor: cols() needs rank 2");
    return shape[1];
  }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  double item() const {
    require(numel() == 1, "Tensor: item() needs a single element");
    return data[0];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

}  // namespace seqa
