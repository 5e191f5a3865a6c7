#pragma once

// k-nearest-neighbour graphs over point or feature coordinates, and the edge
// tensors built from them.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <queue>
#include <span>
#include <vector>

#include "cpt/ops.hpp"

namespace cpt {

/// Neighbour lists (B, N, K), flattened row-major. Row (b, i) holds the K
/// nearest points to i by Euclidean distance, ascending, ties by lower index,
/// never i itself.
struct KnnGraph {
  std::size_t batch = 0;
  std::size_t points = 0;
  std::size_t k = 0;
  std::vector<std::size_t> neighbor_idx;

  std::span<const std::size_t> row(std::size_t b, std::size_t i) const {
    return {neighbor_idx.data() + (b * points + i) * k, k};
  }
  bool operator==(const KnnGraph&) const = default;
};

enum class EdgeMode { kDelta, kConcat };

/// B clouds of N points with f features each (first three are XYZ), plus
/// optional labels: one per cloud, or one per point when `per_point_labels`.
template <typename T>
struct PointBatch {
  Tensor<T> features;
  std::vector<std::size_t> labels;
  bool per_point_labels = false;

  std::size_t batch() const { return features.dim(0); }
  std::size_t points() const { return features.dim(1); }
  std::size_t channels() const { return features.dim(2); }
};

enum class KnnPolicy { kFail, kClamp };

namespace detail {

struct Neighbor {
  double dist;
  std::size_t idx;
  bool operator<(const Neighbor& o) const { return dist < o.dist || (dist == o.dist && idx < o.idx); }
};

// Squared distance over the selected channels, in a fixed summation order. Both
// search paths call this so equal inputs give bit-equal distances.
inline double sq_dist(const double* a, const double* b, std::span<const std::size_t> channels) {
  double s = 0;
  if (channels.front() == 0 && channels.back() == channels.size() - 1) {
    // Every channel: four interleaved partial sums so the loop vectorizes.
    const std::size_t n = channels.size();
    double p[4] = {0, 0, 0, 0};
    std::size_t c = 0;
    for (; c + 4 <= n; c += 4)
      for (std::size_t l = 0; l < 4; ++l) {
        const double d = a[c + l] - b[c + l];
        p[l] += d * d;
      }
    for (; c < n; ++c) {
      const double d = a[c] - b[c];
      p[0] += d * d;
    }
    return (p[0] + p[1]) + (p[2] + p[3]);
  }
  for (auto c : channels) {
    const double d = a[c] - b[c];
    s += d * d;
  }
  return s;
}

// Distances are always evaluated on a double copy of the coordinates.
template <typename T>
std::vector<double> as_double(const Tensor<T>& points) {
  return std::vector<double>(points.data().begin(), points.data().end());
}

template <typename T>
std::vector<std::size_t> resolve_channels(const Tensor<T>& points, std::span<const std::size_t> metric_channels) {
  const std::size_t f = points.dim(2);
  std::vector<std::size_t> ch;
  if (metric_channels.empty()) {
    ch.resize(f);
    std::iota(ch.begin(), ch.end(), std::size_t{0});
  } else {
    for (auto c : metric_channels) {
      if (c >= f) throw DimensionError("knn: metric channel " + std::to_string(c) + " out of range for " +
                                       std::to_string(f) + " features");
      ch.push_back(c);
    }
    // Sorted and unique, so "first is 0 and last is size − 1" means every channel.
    std::sort(ch.begin(), ch.end());
    if (std::adjacent_find(ch.begin(), ch.end()) != ch.end()) throw ConfigError("knn: repeated metric channel");
  }
  return ch;
}

inline std::size_t check_k(std::size_t k, std::size_t n, KnnPolicy policy) {
  if (n < 2) throw ConfigError("knn: a cloud needs at least 2 points, got " + std::to_string(n));
  if (k == 0) throw ConfigError("knn: k must be at least 1");
  if (k >= n) {
    if (policy == KnnPolicy::kClamp) return n - 1;
    throw ConfigError("knn: k = " + std::to_string(k) + " requires more than " + std::to_string(n) +
                      " points; lower k or enable clamping");
  }
  return k;
}

}  // namespace detail

/// Brute-force kNN over (B, N, f). `metric_channels` empty means all channels.
template <typename T>
KnnGraph knn_graph(const Tensor<T>& points, std::size_t k, std::span<const std::size_t> metric_channels = {},
                   KnnPolicy policy = KnnPolicy::kFail) {
  if (points.rank() != 3) throw DimensionError("knn: expected (B, N, f), got " + shape_str(points.shape()));
  const std::size_t B = points.dim(0), N = points.dim(1), F = points.dim(2);
  k = detail::check_k(k, N, policy);
  const auto ch = detail::resolve_channels(points, metric_channels);
  KnnGraph g{B, N, k, std::vector<std::size_t>(B * N * k)};
  std::vector<detail::Neighbor> cand(N - 1);
  const auto coords = detail::as_double(points);
  for (std::size_t b = 0; b < B; ++b) {
    const double* base = coords.data() + b * N * F;
    for (std::size_t i = 0; i < N; ++i) {
      std::size_t c = 0;
      for (std::size_t j = 0; j < N; ++j)
        if (j != i) cand[c++] = {detail::sq_dist(base + i * F, base + j * F, ch), j};
      std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
      for (std::size_t q = 0; q < k; ++q) g.neighbor_idx[(b * N + i) * k + q] = cand[q].idx;
    }
  }
  return g;
}

namespace detail {

// Exact kd-tree. A subtree is skipped only when its lower bound is strictly
// greater than the current k-th distance, so equal-distance candidates with
// smaller indices are never lost.
template <typename T>
class KdTree {
 public:
  KdTree(const T* pts, std::size_t n, std::size_t stride, std::span<const std::size_t> channels)
      : pts_(pts), stride_(stride), ch_(channels.begin(), channels.end()), order_(n) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    nodes_.reserve(2 * n / kLeaf + 2);
    build(0, n);
  }

  void query(std::size_t self, std::size_t k, std::vector<Neighbor>& heap) const {
    heap.clear();
    search(0, pts_ + self * stride_, self, k, heap);
    std::sort_heap(heap.begin(), heap.end());
  }

 private:
  static constexpr std::size_t kLeaf = 8;

  struct Node {
    std::size_t lo, hi;
    std::size_t axis = 0;  // index into ch_
    double split = 0;
    std::int64_t left = -1, right = -1;
  };

  double coord(std::size_t p, std::size_t axis) const { return static_cast<double>(pts_[p * stride_ + ch_[axis]]); }

  std::size_t build(std::size_t lo, std::size_t hi) {
    const std::size_t id = nodes_.size();
    nodes_.push_back({lo, hi});
    if (hi - lo <= kLeaf) return id;
    std::size_t best_axis = 0;
    double best_spread = -1;
    for (std::size_t a = 0; a < ch_.size(); ++a) {
      double mn = coord(order_[lo], a), mx = mn;
      for (std::size_t q = lo + 1; q < hi; ++q) {
        const double v = coord(order_[q], a);
        mn = std::min(mn, v);
        mx = std::max(mx, v);
      }
      if (mx - mn > best_spread) {
        best_spread = mx - mn;
        best_axis = a;
      }
    }
    if (best_spread <= 0) return id;  // all coincident: keep as a leaf
    const std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(lo), order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(hi),
                     [&](std::size_t x, std::size_t y) { return coord(x, best_axis) < coord(y, best_axis); });
    nodes_[id].axis = best_axis;
    nodes_[id].split = coord(order_[mid], best_axis);
    const auto l = static_cast<std::int64_t>(build(lo, mid));
    const auto r = static_cast<std::int64_t>(build(mid, hi));
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  void search(std::size_t id, const T* q, std::size_t self, std::size_t k, std::vector<Neighbor>& heap) const {
    const Node& nd = nodes_[id];
    if (nd.left < 0) {
      for (std::size_t p = nd.lo; p < nd.hi; ++p) {
        const std::size_t j = order_[p];
        if (j == self) continue;
        const Neighbor cand{sq_dist(q, pts_ + j * stride_, ch_), j};
        if (heap.size() < k) {
          heap.push_back(cand);
          std::push_heap(heap.begin(), heap.end());
        } else if (cand < heap.front()) {
          std::pop_heap(heap.begin(), heap.end());
          heap.back() = cand;
          std::push_heap(heap.begin(), heap.end());
        }
      }
      return;
    }
    const double diff = static_cast<double>(q[ch_[nd.axis]]) - nd.split;
    const auto near = static_cast<std::size_t>(diff < 0 ? nd.left : nd.right);
    const auto far = static_cast<std::size_t>(diff < 0 ? nd.right : nd.left);
    search(near, q, self, k, heap);
    if (heap.size() < k || diff * diff <= heap.front().dist) search(far, q, self, k, heap);
  }

  const T* pts_;
  std::size_t stride_;
  std::vector<std::size_t> ch_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

}  // namespace detail

/// kd-tree accelerated kNN; result-identical to knn_graph.
template <typename T>
KnnGraph accelerate_knn(const Tensor<T>& points, std::size_t k, std::span<const std::size_t> metric_channels = {},
                        KnnPolicy policy = KnnPolicy::kFail) {
  if (points.rank() != 3) throw DimensionError("knn: expected (B, N, f), got " + shape_str(points.shape()));
  const std::size_t B = points.dim(0), N = points.dim(1), F = points.dim(2);
  k = detail::check_k(k, N, policy);
  const auto ch = detail::resolve_channels(points, metric_channels);
  KnnGraph g{B, N, k, std::vector<std::size_t>(B * N * k)};
  std::vector<detail::Neighbor> heap;
  heap.reserve(k + 1);
  const auto coords = detail::as_double(points);
  for (std::size_t b = 0; b < B; ++b) {
    detail::KdTree<double> tree(coords.data() + b * N * F, N, F, ch);
    for (std::size_t i = 0; i < N; ++i) {
      tree.query(i, k, heap);
      for (std::size_t q = 0; q < k; ++q) g.neighbor_idx[(b * N + i) * k + q] = heap[q].idx;
    }
  }
  return g;
}

/// Edge tensor in (B, N, K, C_e) layout; the layers consume this directly.
template <typename T>
Tensor<T> edge_features_nkc(const Tensor<T>& points, const KnnGraph& graph, EdgeMode mode) {
  if (points.rank() != 3) throw DimensionError("edge_features: expected (B, N, f), got " + shape_str(points.shape()));
  const std::size_t B = points.dim(0), N = points.dim(1), F = points.dim(2);
  if (graph.batch != B || graph.points != N)
    throw DimensionError("edge_features: graph built for (" + std::to_string(graph.batch) + ", " +
                         std::to_string(graph.points) + ") but points are " + shape_str(points.shape()));
  const std::size_t K = graph.k;
  auto nbr = reshape(batched_gather(points, std::span<const std::size_t>(graph.neighbor_idx), N * K), {B, N, K, F});
  auto center = expand(reshape(points, {B, N, 1, F}), 2, K);
  auto delta = sub(nbr, center);
  if (mode == EdgeMode::kDelta) return delta;
  return concat(std::vector<Tensor<T>>{center, delta}, 3);
}

/// Edge tensor (B, C_e, N, K): delta mode holds x_j − x_i; concat mode holds
/// x_i in channels [0, f) and x_j − x_i in [f, 2f).
template <typename T>
Tensor<T> edge_features(const Tensor<T>& points, const KnnGraph& graph, EdgeMode mode) {
  return permute(edge_features_nkc(points, graph, mode), {0, 3, 1, 2});
}

}  // namespace cpt
