#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <unordered_map>
#include <vector>

#include "ndtpr/core.hpp"
#include "ndtpr/kdtree.hpp"
#include "ndtpr/ndt.hpp"

namespace ndtpr {

/// Point drawn from a voxel-downsampled version of the input cloud; seed for
/// one radius neighborhood.
using Centroid = Point3;

struct CondenserConfig {
  int k = 2000;        // output cell count
  double c = 1.3;      // oversampling factor, > 1 + t
  double t = 0.05;     // tolerance fraction on the oversampled count
  double r = 1.0;      // neighborhood estimation radius, meters
  int max_iters = 40;  // binary-search iteration cap
  int min_support = kDefaultMinSupport;
  int m_nn = 8;        // neighbor candidates per cell for redundancy scoring

  void validate() const {
    if (k < 1) throw Error("condenser: k must be >= 1");
    if (!(t > 0.0 && t < 1.0)) throw Error("condenser: t must be in (0, 1)");
    if (!(c > 1.0 + t)) throw Error("condenser: c must exceed 1 + t");
    if (!(r > 0.0)) throw Error("condenser: r must be positive");
  }
};

struct VoxelSearchResult {
  double voxel_size = 0.0;
  std::vector<Centroid> centroids;
  bool converged = false;  // false when max_iters was hit
  bool monotonic = true;   // false if the observed counts violated monotonicity
  int iterations = 0;
};

namespace detail {

/// Voxel-downsamples the cloud: one centroid (mean of members) per nonempty
/// voxel, ordered by voxel key.
inline std::vector<Centroid> voxel_centroids(const PointCloud& cloud, double voxel_size) {
  struct Acc {
    double x = 0, y = 0, z = 0;
    int n = 0;
  };
  std::unordered_map<VoxelKey, Acc, VoxelKeyHash> bins;
  for (const Point3& p : cloud) {
    Acc& a = bins[voxel_of(p, voxel_size)];
    a.x += p.x;
    a.y += p.y;
    a.z += p.z;
    ++a.n;
  }
  std::vector<std::pair<VoxelKey, Acc>> entries(bins.begin(), bins.end());
  std::sort(entries.begin(), entries.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<Centroid> out;
  out.reserve(entries.size());
  for (const auto& [key, a] : entries) {
    out.push_back({a.x / a.n, a.y / a.n, a.z / a.n});
  }
  return out;
}

inline std::size_t voxel_count(const PointCloud& cloud, double voxel_size) {
  std::unordered_map<VoxelKey, char, VoxelKeyHash> seen;
  for (const Point3& p : cloud) seen.emplace(voxel_of(p, voxel_size), 1);
  return seen.size();
}

}  // namespace detail

/// Binary search for the voxel size whose centroid downsample lands within
/// target * (1 +- t) points. The interval is initialized from the bounding
/// box ([diagonal / 1e4, diagonal]) and bisected geometrically, relying on
/// the count being non-increasing in voxel size. On hitting max_iters the
/// closest-count iterate is returned with converged = false.
inline VoxelSearchResult voxel_size_search(const PointCloud& cloud, int target, double t,
                                           int max_iters = 40) {
  if (target < 1) throw Error("condenser: target must be >= 1");
  const double band_lo = target * (1.0 - t);
  const double band_hi = target * (1.0 + t);
  if (static_cast<double>(cloud.size()) < band_lo) throw Error("insufficient points");

  const double diag = Aabb::of(cloud).diagonal();
  if (!(diag > 0.0)) {
    // All points coincide; a single voxel is the only reachable count.
    if (1.0 >= band_lo && 1.0 <= band_hi) {
      VoxelSearchResult res;
      res.voxel_size = 1.0;
      res.centroids = detail::voxel_centroids(cloud, res.voxel_size);
      res.converged = true;
      return res;
    }
    throw Error("insufficient points");
  }

  double lo = diag * 1e-4;
  double hi = diag;
  VoxelSearchResult res;
  std::vector<std::pair<double, std::size_t>> observed;  // (size, count), sorted by size
  double best_err = std::numeric_limits<double>::max();
  double best_size = lo;

  const auto observe = [&](double size, std::size_t count) {
    const auto it = std::lower_bound(
        observed.begin(), observed.end(), size,
        [](const auto& a, double s) { return a.first < s; });
    // Count must be non-increasing in voxel size.
    if (it != observed.begin() && std::prev(it)->second < count) res.monotonic = false;
    if (it != observed.end() && it->second > count) res.monotonic = false;
    observed.insert(it, {size, count});
  };

  // Smallest reachable voxel size bounds the achievable count from above.
  {
    const std::size_t cnt_lo = detail::voxel_count(cloud, lo);
    observe(lo, cnt_lo);
    if (static_cast<double>(cnt_lo) < band_lo) throw Error("insufficient points");
    const double err = std::abs(static_cast<double>(cnt_lo) - target);
    if (err < best_err) {
      best_err = err;
      best_size = lo;
    }
    if (static_cast<double>(cnt_lo) <= band_hi) {
      res.voxel_size = lo;
      res.centroids = detail::voxel_centroids(cloud, lo);
      res.converged = true;
      return res;
    }
  }

  for (int it = 0; it < max_iters; ++it) {
    ++res.iterations;
    const double mid = std::sqrt(lo * hi);
    const std::size_t cnt = detail::voxel_count(cloud, mid);
    observe(mid, cnt);
    const double err = std::abs(static_cast<double>(cnt) - target);
    if (err < best_err) {
      best_err = err;
      best_size = mid;
    }
    if (static_cast<double>(cnt) >= band_lo && static_cast<double>(cnt) <= band_hi) {
      res.voxel_size = mid;
      res.centroids = detail::voxel_centroids(cloud, mid);
      res.converged = true;
      return res;
    }
    if (static_cast<double>(cnt) > band_hi) {
      lo = mid;  // too many centroids: grow the voxel
    } else {
      hi = mid;
    }
  }

  res.voxel_size = best_size;
  res.centroids = detail::voxel_centroids(cloud, best_size);
  res.converged = false;
  return res;
}

/// Estimates one cell per centroid from all cloud points within radius r,
/// dropping centroids with fewer than min_support neighbors. Output order
/// follows the centroid order regardless of thread count.
inline std::vector<NdtCell> neighborhood_cells(const PointCloud& cloud,
                                               const std::vector<Centroid>& centroids,
                                               double r,
                                               int min_support = kDefaultMinSupport,
                                               int threads = 1) {
  if (!(r > 0.0)) throw Error("condenser: r must be positive");
  const KdTree tree = KdTree::from_points(cloud);
  std::vector<NdtCell> slots(centroids.size());
  std::vector<char> keep(centroids.size(), 0);
  parallel_for(centroids.size(), threads, [&](std::size_t i) {
    const double q[3] = {centroids[i].x, centroids[i].y, centroids[i].z};
    const std::vector<int> idx = tree.radius(q, r);
    if (static_cast<int>(idx.size()) < min_support) return;
    PointCloud pts;
    pts.reserve(idx.size());
    for (int j : idx) pts.push_back(cloud[static_cast<std::size_t>(j)]);
    slots[i] = estimate_cell(pts);
    keep[i] = 1;
  });
  std::vector<NdtCell> out;
  out.reserve(centroids.size());
  for (std::size_t i = 0; i < centroids.size(); ++i) {
    if (keep[i]) out.push_back(slots[i]);
  }
  return out;
}

namespace detail {

/// The m nearest other alive cells by mean position, ties broken by index.
inline std::vector<int> nearest_alive(const std::vector<NdtCell>& cells,
                                      const std::vector<char>& alive, int self, int m) {
  std::vector<std::pair<double, int>> cand;
  cand.reserve(cells.size());
  for (int j = 0; j < static_cast<int>(cells.size()); ++j) {
    if (j == self || !alive[j]) continue;
    cand.push_back({(cells[j].mean - cells[self].mean).squaredNorm(), j});
  }
  const std::size_t take = std::min<std::size_t>(m, cand.size());
  std::partial_sort(cand.begin(), cand.begin() + take, cand.end());
  std::vector<int> out(take);
  for (std::size_t i = 0; i < take; ++i) out[i] = cand[i].second;
  return out;
}

}  // namespace detail

/// Removes the most redundant cells until exactly k remain. A cell's
/// redundancy score is the minimum symmetric KL divergence to its m_nn
/// nearest alive cells; the cell with the smallest score is removed each
/// round (ties broken by lowest index) and only the neighbors of the removed
/// cell are rescored. Input order is preserved in the output.
inline std::vector<NdtCell> prune_mutual_information(const std::vector<NdtCell>& cells,
                                                     int k, int m_nn = 8) {
  const int n = static_cast<int>(cells.size());
  if (n < k) throw Error("under-populated");
  if (n == k) return cells;

  std::vector<GaussianInfo> infos(n);
  for (int i = 0; i < n; ++i) infos[i] = gaussian_info(cells[i]);

  std::vector<char> alive(n, 1);
  std::vector<std::vector<int>> neighbors(n);
  std::vector<double> score(n, 0.0);

  const auto rescore = [&](int i) {
    neighbors[i] = detail::nearest_alive(cells, alive, i, m_nn);
    double s = std::numeric_limits<double>::max();
    for (int j : neighbors[i]) {
      s = std::min(s, sym_kl(cells[i], infos[i], cells[j], infos[j]));
    }
    score[i] = s;
  };

  for (int i = 0; i < n; ++i) rescore(i);

  int remaining = n;
  while (remaining > k) {
    int victim = -1;
    for (int i = 0; i < n; ++i) {
      if (alive[i] && (victim < 0 || score[i] < score[victim])) victim = i;
    }
    alive[victim] = 0;
    --remaining;
    for (int i = 0; i < n; ++i) {
      if (!alive[i]) continue;
      if (std::find(neighbors[i].begin(), neighbors[i].end(), victim) !=
          neighbors[i].end()) {
        rescore(i);
      }
    }
  }

  std::vector<NdtCell> out;
  out.reserve(k);
  for (int i = 0; i < n; ++i) {
    if (alive[i]) out.push_back(cells[i]);
  }
  return out;
}

/// Full condensation pipeline: voxel-size search, radius neighborhoods,
/// redundancy pruning. Returns exactly cfg.k cells; if the neighborhood
/// stage falls short the radius is doubled once before giving up.
inline NdtMap condense(const PointCloud& cloud, const CondenserConfig& cfg,
                       int threads = 1) {
  cfg.validate();
  const int target = static_cast<int>(std::llround(cfg.k * cfg.c));
  const VoxelSearchResult search = voxel_size_search(cloud, target, cfg.t, cfg.max_iters);

  std::vector<NdtCell> cells =
      neighborhood_cells(cloud, search.centroids, cfg.r, cfg.min_support, threads);
  if (static_cast<int>(cells.size()) < cfg.k) {
    cells = neighborhood_cells(cloud, search.centroids, 2.0 * cfg.r, cfg.min_support,
                               threads);
    if (static_cast<int>(cells.size()) < cfg.k) throw Error("sparse submap");
  }

  NdtMap map;
  map.resolution = search.voxel_size;
  map.cells = prune_mutual_information(cells, cfg.k, cfg.m_nn);
  return map;
}

}  // namespace ndtpr
