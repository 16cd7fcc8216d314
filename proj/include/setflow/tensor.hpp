#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "setflow/common.hpp"

namespace setflow {

// Dense row-major 64-bit tensor. Matrix operations view the last extent as
// columns and the product of the leading extents as rows, so a [B, n, d]
// batch is usable as a (B*n) x d matrix without copying.
struct Tensor {
  std::vector<size_t> shape;
  std::vector<double> values;

  Tensor() = default;
  Tensor(std::vector<size_t> s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
    require(numel(shape) == values.size(), "Tensor: shape/value size mismatch");
  }

  static size_t numel(const std::vector<size_t>& s) {
    size_t n = 1;
    for (size_t e : s) n *= e;
    return n;
  }

  static Tensor zeros(std::vector<size_t> s) {
    size_t n = numel(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }

  static Tensor filled(std::vector<size_t> s, double v) {
    size_t n = numel(s);
    return Tensor(std::move(s), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor row(std::vector<double> v) {
    size_t n = v.size();
    return Tensor({1, n}, std::move(v));
  }

  static Tensor column(std::vector<double> v) {
    size_t n = v.size();
    return Tensor({n, 1}, std::move(v));
  }

  size_t size() const { return values.size(); }
  bool empty() const { return values.empty(); }

  size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  size_t rows() const { return shape.empty() ? (values.empty() ? 0 : 1) : size() / std::max<size_t>(cols(), 1); }

  double& at(size_t r, size_t c) { return values[r * cols() + c]; }
  double at(size_t r, size_t c) const { return values[r * cols() + c]; }

  double& operator[](size_t i) { return values[i]; }
  double operator[](size_t i) const { return values[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }

  Tensor reshaped(std::vector<size_t> s) const {
    require(numel(s) == size(), "reshape: element count mismatch");
    return Tensor(std::move(s), values);
  }

  void add_inplace(const Tensor& o) {
    require(size() == o.size(), "add_inplace: size mismatch");
    for (size_t i = 0; i < values.size(); ++i) values[i] += o.values[i];
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
    return s + "]";
  }
};

namespace la {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<EMat>;
using CMap = Eigen::Map<const EMat>;

inline CMap cmap(const Tensor& t) {
  return CMap(t.values.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline Map map(Tensor& t) {
  return Map(t.values.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

// c (+)= a * b
inline void gemm(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
  if (accumulate)
    map(c).noalias() += cmap(a) * cmap(b);
  else
    map(c).noalias() = cmap(a) * cmap(b);
}

// c (+)= a^T * b
inline void gemm_tn(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
  if (accumulate)
    map(c).noalias() += cmap(a).transpose() * cmap(b);
  else
    map(c).noalias() = cmap(a).transpose() * cmap(b);
}

// c (+)= a * b^T
inline void gemm_nt(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
  if (accumulate)
    map(c).noalias() += cmap(a) * cmap(b).transpose();
  else
    map(c).noalias() = cmap(a) * cmap(b).transpose();
}

}  // namespace la

}  // namespace setflow
