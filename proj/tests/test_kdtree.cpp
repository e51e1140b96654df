#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <vector>

#include "ndtpr/kdtree.hpp"

using namespace ndtpr;

namespace {

std::vector<double> random_points(Rng& rng, int n, int dim, double lo, double hi) {
  std::vector<double> flat(static_cast<std::size_t>(n) * dim);
  for (double& v : flat) v = rng.uniform(lo, hi);
  return flat;
}

std::vector<int> brute_radius(const std::vector<double>& pts, int dim, const double* q,
                              double r) {
  std::vector<int> out;
  const int n = static_cast<int>(pts.size()) / dim;
  for (int i = 0; i < n; ++i) {
    double d2 = 0.0;
    for (int d = 0; d < dim; ++d) {
      const double diff = q[d] - pts[static_cast<std::size_t>(i) * dim + d];
      d2 += diff * diff;
    }
    if (d2 <= r * r) out.push_back(i);
  }
  return out;
}

std::vector<KdTree::Hit> brute_knn(const std::vector<double>& pts, int dim,
                                   const double* q, int k) {
  std::vector<KdTree::Hit> all;
  const int n = static_cast<int>(pts.size()) / dim;
  for (int i = 0; i < n; ++i) {
    double d2 = 0.0;
    for (int d = 0; d < dim; ++d) {
      const double diff = q[d] - pts[static_cast<std::size_t>(i) * dim + d];
      d2 += diff * diff;
    }
    all.push_back({d2, i});
  }
  std::sort(all.begin(), all.end(), [](const KdTree::Hit& a, const KdTree::Hit& b) {
    if (a.dist2 != b.dist2) return a.dist2 < b.dist2;
    return a.index < b.index;
  });
  if (static_cast<int>(all.size()) > k) all.resize(k);
  return all;
}

}  // namespace

TEST_CASE("kdtree radius matches exhaustive scan", "[kdtree]") {
  Rng rng(42);
  for (int dim : {2, 3, 8}) {
    const int n = 500;
    const std::vector<double> pts = random_points(rng, n, dim, -10.0, 10.0);
    const KdTree tree(pts, dim);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> q(dim);
      for (double& v : q) v = rng.uniform(-12.0, 12.0);
      const double r = rng.uniform(0.5, 8.0);
      CHECK(tree.radius(q.data(), r) == brute_radius(pts, dim, q.data(), r));
    }
  }
}

TEST_CASE("kdtree knn matches exhaustive scan with ties", "[kdtree]") {
  Rng rng(7);
  for (int dim : {2, 3}) {
    const int n = 400;
    std::vector<double> pts = random_points(rng, n, dim, -5.0, 5.0);
    // Inject exact duplicates to exercise index tie-breaking.
    for (int i = 0; i < 40; ++i) {
      const int src = static_cast<int>(rng.below(n));
      for (int d = 0; d < dim; ++d) {
        pts[static_cast<std::size_t>(i) * dim + d] = pts[static_cast<std::size_t>(src) * dim + d];
      }
    }
    const KdTree tree(pts, dim);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> q(dim);
      for (double& v : q) v = rng.uniform(-6.0, 6.0);
      const int k = 1 + static_cast<int>(rng.below(20));
      const auto got = tree.knn(q.data(), k);
      const auto want = brute_knn(pts, dim, q.data(), k);
      REQUIRE(got.size() == want.size());
      for (std::size_t i = 0; i < got.size(); ++i) {
        CHECK(got[i].index == want[i].index);
        CHECK(got[i].dist2 == want[i].dist2);
      }
    }
  }
}

TEST_CASE("kdtree handles edge cases", "[kdtree]") {
  const KdTree empty;
  const double q[3] = {0, 0, 0};
  CHECK(empty.radius(q, 1.0).empty());
  CHECK(empty.knn(q, 3).empty());

  const KdTree one(std::vector<double>{1.0, 2.0, 3.0}, 3);
  const auto hits = one.knn(q, 5);
  REQUIRE(hits.size() == 1);
  CHECK(hits[0].index == 0);
  CHECK(hits[0].dist2 == Catch::Approx(14.0));
}
