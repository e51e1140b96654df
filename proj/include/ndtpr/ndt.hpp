#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "ndtpr/core.hpp"

namespace ndtpr {

/// Eigenvalue floor applied to every cell covariance, in m^2. Keeps
/// divergences and network inputs finite for degenerate neighborhoods.
inline constexpr double kCovEigenFloor = 1e-3;

/// Cells estimated from fewer points than this are discarded; a covariance
/// from fewer than 3 points is rank-deficient by construction.
inline constexpr int kDefaultMinSupport = 3;

/// One local Gaussian: mean (m), covariance (m^2) and the number of points
/// used to estimate it.
struct NdtCell {
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  std::uint32_t support = 0;
};

/// Fixed set of cells summarizing one submap.
struct NdtMap {
  std::vector<NdtCell> cells;
  double resolution = 0.0;  // meters; the scale the cells were produced at
};

/// Sample mean and unbiased (1/(n-1)) covariance of a point set, before any
/// regularization. support = n. For n = 1 the covariance is the zero matrix.
struct CellMoments {
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  std::uint32_t support = 0;
};

inline CellMoments estimate_moments(std::span<const Point3> points) {
  if (points.empty()) throw Error("empty cell");
  CellMoments m;
  m.support = static_cast<std::uint32_t>(points.size());
  Eigen::Vector3d sum = Eigen::Vector3d::Zero();
  for (const Point3& p : points) sum += Eigen::Vector3d(p.x, p.y, p.z);
  m.mean = sum / static_cast<double>(points.size());
  if (points.size() >= 2) {
    Eigen::Matrix3d scatter = Eigen::Matrix3d::Zero();
    for (const Point3& p : points) {
      const Eigen::Vector3d d = Eigen::Vector3d(p.x, p.y, p.z) - m.mean;
      scatter += d * d.transpose();
    }
    m.cov = scatter / static_cast<double>(points.size() - 1);
  }
  return m;
}

/// Clamps the eigenvalues of a symmetric matrix to at least kCovEigenFloor
/// and reconstructs. Throws if the input is not symmetric (tolerance 1e-9).
inline Eigen::Matrix3d regularize_cov(const Eigen::Matrix3d& cov) {
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-9) {
    throw Error("covariance not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(cov);
  Eigen::Vector3d evals = solver.eigenvalues();
  for (int i = 0; i < 3; ++i) evals(i) = std::max(evals(i), kCovEigenFloor);
  const Eigen::Matrix3d& v = solver.eigenvectors();
  Eigen::Matrix3d out = v * evals.asDiagonal() * v.transpose();
  return 0.5 * (out + out.transpose());
}

/// Mean + regularized covariance of a nonempty point set.
inline NdtCell estimate_cell(std::span<const Point3> points) {
  const CellMoments m = estimate_moments(points);
  NdtCell cell;
  cell.mean = m.mean;
  cell.cov = regularize_cov(m.cov);
  cell.support = m.support;
  return cell;
}

inline NdtCell estimate_cell(const PointCloud& points) {
  return estimate_cell(std::span<const Point3>(points.data(), points.size()));
}

namespace detail {

struct VoxelKey {
  std::int64_t x, y, z;
  bool operator==(const VoxelKey&) const = default;
  bool operator<(const VoxelKey& o) const {
    if (x != o.x) return x < o.x;
    if (y != o.y) return y < o.y;
    return z < o.z;
  }
};

struct VoxelKeyHash {
  std::size_t operator()(const VoxelKey& k) const {
    std::uint64_t h = splitmix64(static_cast<std::uint64_t>(k.x));
    h = splitmix64(h ^ static_cast<std::uint64_t>(k.y));
    h = splitmix64(h ^ static_cast<std::uint64_t>(k.z));
    return static_cast<std::size_t>(h);
  }
};

inline VoxelKey voxel_of(const Point3& p, double resolution) {
  return {static_cast<std::int64_t>(std::floor(p.x / resolution)),
          static_cast<std::int64_t>(std::floor(p.y / resolution)),
          static_cast<std::int64_t>(std::floor(p.z / resolution))};
}

}  // namespace detail

/// Bins points into a uniform grid and fits one cell per voxel holding at
/// least min_support points. Cells are ordered by voxel key so the result is
/// independent of hash-map iteration order.
inline NdtMap voxel_partition(const PointCloud& cloud, double resolution,
                              int min_support = kDefaultMinSupport) {
  if (!(resolution > 0.0)) throw Error("resolution must be positive");
  std::unordered_map<detail::VoxelKey, std::vector<Point3>, detail::VoxelKeyHash> bins;
  for (const Point3& p : cloud) bins[detail::voxel_of(p, resolution)].push_back(p);

  std::vector<detail::VoxelKey> keys;
  keys.reserve(bins.size());
  for (const auto& [key, pts] : bins) {
    if (static_cast<int>(pts.size()) >= min_support) keys.push_back(key);
  }
  std::sort(keys.begin(), keys.end());

  NdtMap map;
  map.resolution = resolution;
  map.cells.reserve(keys.size());
  for (const auto& key : keys) map.cells.push_back(estimate_cell(bins[key]));
  return map;
}

/// Applies a linear map to a cell: mean' = T mean, cov' = T cov T^t. The
/// congruence result is symmetrized to suppress floating-point drift.
inline NdtCell transform_cell(const NdtCell& cell, const Eigen::Matrix3d& t) {
  NdtCell out;
  out.mean = t * cell.mean;
  const Eigen::Matrix3d m = t * cell.cov * t.transpose();
  out.cov = 0.5 * (m + m.transpose());
  out.support = cell.support;
  return out;
}

/// Precomputed inverse and log-determinant for repeated divergence
/// evaluation. Throws "regularize first" if the covariance is not positive
/// definite.
struct GaussianInfo {
  Eigen::Matrix3d inv = Eigen::Matrix3d::Identity();
  double logdet = 0.0;
};

inline GaussianInfo gaussian_info(const NdtCell& cell) {
  Eigen::LLT<Eigen::Matrix3d> llt(cell.cov);
  if (llt.info() != Eigen::Success) throw Error("regularize first");
  GaussianInfo info;
  info.inv = llt.solve(Eigen::Matrix3d::Identity());
  const Eigen::Matrix3d l = llt.matrixL();
  info.logdet = 2.0 * (std::log(l(0, 0)) + std::log(l(1, 1)) + std::log(l(2, 2)));
  return info;
}

/// Symmetric Kullback-Leibler divergence between two cell Gaussians,
/// 0.5 (D_KL(a||b) + D_KL(b||a)), with cached inverses supplied by the
/// caller. Zero iff the parameters are identical.
inline double sym_kl(const NdtCell& a, const GaussianInfo& ia, const NdtCell& b,
                     const GaussianInfo& ib) {
  const Eigen::Vector3d d = b.mean - a.mean;
  const double d_ab = 0.5 * ((ib.inv * a.cov).trace() + d.dot(ib.inv * d) - 3.0 +
                             ib.logdet - ia.logdet);
  const double d_ba = 0.5 * ((ia.inv * b.cov).trace() + d.dot(ia.inv * d) - 3.0 +
                             ia.logdet - ib.logdet);
  return 0.5 * (d_ab + d_ba);
}

inline double sym_kl(const NdtCell& a, const NdtCell& b) {
  return sym_kl(a, gaussian_info(a), b, gaussian_info(b));
}

}  // namespace ndtpr
