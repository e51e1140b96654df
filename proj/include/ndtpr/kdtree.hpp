#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "ndtpr/core.hpp"

namespace ndtpr {

/// Exact nearest-neighbor / radius search over n points of arbitrary
/// dimension. Splits on the widest-spread axis at the median, so the tree
/// adapts to the intrinsic dimension of the data. All queries return results
/// identical to an exhaustive scan, with distance ties broken by point index.
class KdTree {
 public:
  struct Hit {
    double dist2 = 0.0;
    int index = -1;
  };

  struct SearchStats {
    std::size_t nodes_visited = 0;  // leaf points examined + internal nodes
  };

  KdTree() = default;

  /// Builds from row-major point data (n rows of `dim` coordinates). Copies.
  KdTree(std::vector<double> points, int dim) : data_(std::move(points)), dim_(dim) {
    if (dim_ <= 0 || data_.size() % static_cast<std::size_t>(dim_) != 0) {
      throw Error("kdtree: bad point buffer");
    }
    const int n = static_cast<int>(data_.size() / static_cast<std::size_t>(dim_));
    order_.resize(n);
    for (int i = 0; i < n; ++i) order_[i] = i;
    if (n > 0) {
      nodes_.reserve(2 * static_cast<std::size_t>(n) / kLeafSize + 2);
      root_ = build(0, n);
    }
  }

  static KdTree from_points(const PointCloud& cloud) {
    std::vector<double> flat;
    flat.reserve(cloud.size() * 3);
    for (const Point3& p : cloud) {
      flat.push_back(p.x);
      flat.push_back(p.y);
      flat.push_back(p.z);
    }
    return KdTree(std::move(flat), 3);
  }

  int size() const { return static_cast<int>(order_.size()); }
  int dim() const { return dim_; }

  /// Indices of all points within Euclidean distance r of q, ascending.
  std::vector<int> radius(const double* q, double r) const {
    std::vector<int> out;
    if (root_ >= 0) radius_rec(root_, q, r * r, out);
    std::sort(out.begin(), out.end());
    return out;
  }

  /// The k nearest points to q, sorted by (distance, index).
  std::vector<Hit> knn(const double* q, int k, SearchStats* stats = nullptr) const {
    std::vector<Hit> heap;  // max-heap on (dist2, index)
    if (root_ >= 0 && k > 0) {
      heap.reserve(static_cast<std::size_t>(k) + 1);
      knn_rec(root_, q, static_cast<std::size_t>(k), heap, stats);
    }
    std::sort(heap.begin(), heap.end(), hit_less);
    return heap;
  }

 private:
  static constexpr int kLeafSize = 16;

  struct Node {
    int axis = -1;        // -1 for leaves
    double split = 0.0;   // split coordinate along axis
    int begin = 0, end = 0;  // leaf range into order_
    int left = -1, right = -1;
  };

  static bool hit_less(const Hit& a, const Hit& b) {
    if (a.dist2 != b.dist2) return a.dist2 < b.dist2;
    return a.index < b.index;
  }

  const double* point(int index) const {
    return data_.data() + static_cast<std::size_t>(index) * dim_;
  }

  double dist2(const double* q, int index) const {
    const double* p = point(index);
    double s = 0.0;
    for (int d = 0; d < dim_; ++d) {
      const double diff = q[d] - p[d];
      s += diff * diff;
    }
    return s;
  }

  int build(int begin, int end) {
    Node node;
    if (end - begin <= kLeafSize) {
      node.begin = begin;
      node.end = end;
      nodes_.push_back(node);
      return static_cast<int>(nodes_.size()) - 1;
    }
    // Widest-spread axis over the subrange.
    int axis = 0;
    double best_spread = -1.0;
    for (int d = 0; d < dim_; ++d) {
      double lo = std::numeric_limits<double>::max();
      double hi = std::numeric_limits<double>::lowest();
      for (int i = begin; i < end; ++i) {
        const double v = point(order_[i])[d];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      if (hi - lo > best_spread) {
        best_spread = hi - lo;
        axis = d;
      }
    }
    const int mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](int a, int b) {
                       const double va = point(a)[axis], vb = point(b)[axis];
                       if (va != vb) return va < vb;
                       return a < b;
                     });
    node.axis = axis;
    node.split = point(order_[mid])[axis];
    nodes_.push_back(node);
    const int id = static_cast<int>(nodes_.size()) - 1;
    const int left = build(begin, mid);
    const int right = build(mid, end);
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  void radius_rec(int id, const double* q, double r2, std::vector<int>& out) const {
    const Node& node = nodes_[id];
    if (node.axis < 0) {
      for (int i = node.begin; i < node.end; ++i) {
        const int idx = order_[i];
        if (dist2(q, idx) <= r2) out.push_back(idx);
      }
      return;
    }
    const double gap = q[node.axis] - node.split;
    if (gap < 0.0) {
      radius_rec(node.left, q, r2, out);
      if (gap * gap <= r2) radius_rec(node.right, q, r2, out);
    } else {
      radius_rec(node.right, q, r2, out);
      if (gap * gap <= r2) radius_rec(node.left, q, r2, out);
    }
  }

  void heap_push(std::vector<Hit>& heap, std::size_t k, Hit h) const {
    if (heap.size() < k) {
      heap.push_back(h);
      std::push_heap(heap.begin(), heap.end(), hit_less);
    } else if (hit_less(h, heap.front())) {
      std::pop_heap(heap.begin(), heap.end(), hit_less);
      heap.back() = h;
      std::push_heap(heap.begin(), heap.end(), hit_less);
    }
  }

  void knn_rec(int id, const double* q, std::size_t k, std::vector<Hit>& heap,
               SearchStats* stats) const {
    const Node& node = nodes_[id];
    if (stats) ++stats->nodes_visited;
    if (node.axis < 0) {
      for (int i = node.begin; i < node.end; ++i) {
        const int idx = order_[i];
        heap_push(heap, k, Hit{dist2(q, idx), idx});
        if (stats) ++stats->nodes_visited;
      }
      return;
    }
    const double gap = q[node.axis] - node.split;
    const int near = gap < 0.0 ? node.left : node.right;
    const int far = gap < 0.0 ? node.right : node.left;
    knn_rec(near, q, k, heap, stats);
    // The far side may still hold equal-distance hits with a lower index, so
    // prune only on strict inequality.
    if (heap.size() < k || gap * gap <= heap.front().dist2) {
      knn_rec(far, q, k, heap, stats);
    }
  }

  std::vector<double> data_;
  int dim_ = 0;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace ndtpr
