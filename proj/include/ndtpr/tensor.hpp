#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ndtpr/core.hpp"

namespace ndtpr {

/// Dense row-major tensor of doubles. Rank is arbitrary but the network only
/// needs vectors and matrices; tests run in 64-bit so gradient checks stay
/// meaningful.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<std::size_t>(numel_of(shape)), 0.0);
  }
  Tensor(std::vector<int> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::int64_t>(data.size()) != numel_of(shape)) {
      throw Error("tensor: data length does not match shape " + shape_str(shape));
    }
  }

  static std::int64_t numel_of(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) {
      if (d < 0) throw Error("tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor full(std::vector<int> s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  int rows() const { return rank() == 2 ? shape[0] : (rank() == 1 ? 1 : -1); }
  int cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : -1); }

  double& operator()(int i) { return data[static_cast<std::size_t>(i)]; }
  const double& operator()(int i) const { return data[static_cast<std::size_t>(i)]; }
  double& operator()(int i, int j) {
    return data[static_cast<std::size_t>(i) * shape[1] + j];
  }
  const double& operator()(int i, int j) const {
    return data[static_cast<std::size_t>(i) * shape[1] + j];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  static std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) os << ',';
      os << s[i];
    }
    os << ']';
    return os.str();
  }
  std::string shape_str() const { return shape_str(shape); }
};

namespace detail {

using EigenRowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C = alpha * op(A) * op(B) + beta * C with row-major buffers.
/// op(A) is (m,k), op(B) is (k,n), C is (m,n).
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
                 const double* a, const double* b, double beta, double* c) {
  Eigen::Map<const EigenRowMat> ma(a, trans_a ? k : m, trans_a ? m : k);
  Eigen::Map<const EigenRowMat> mb(b, trans_b ? n : k, trans_b ? k : n);
  Eigen::Map<EigenRowMat> mc(c, m, n);
  if (beta == 0.0) {
    if (trans_a && trans_b) mc.noalias() = alpha * (ma.transpose() * mb.transpose());
    else if (trans_a) mc.noalias() = alpha * (ma.transpose() * mb);
    else if (trans_b) mc.noalias() = alpha * (ma * mb.transpose());
    else mc.noalias() = alpha * (ma * mb);
  } else {
    if (trans_a && trans_b) mc.noalias() += alpha * (ma.transpose() * mb.transpose());
    else if (trans_a) mc.noalias() += alpha * (ma.transpose() * mb);
    else if (trans_b) mc.noalias() += alpha * (ma * mb.transpose());
    else mc.noalias() += alpha * (ma * mb);
  }
}

}  // namespace detail

}  // namespace ndtpr
