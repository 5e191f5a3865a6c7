#include "test_util.hpp"

using namespace cpt;
using testutil::randn;

namespace {

// Independent O(N²) oracle: all pairwise distances, full stable sort by (distance, index).
std::vector<std::size_t> full_sort_knn(const Tensor<double>& pts, std::size_t k) {
  const std::size_t B = pts.dim(0), N = pts.dim(1), F = pts.dim(2);
  std::vector<std::size_t> out;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < N; ++i) {
      std::vector<std::pair<double, std::size_t>> all;
      for (std::size_t j = 0; j < N; ++j) {
        if (j == i) continue;
        double d = 0;
        for (std::size_t c = 0; c < F; ++c) {
          const double t = pts.at({b, i, c}) - pts.at({b, j, c});
          d += t * t;
        }
        all.emplace_back(d, j);
      }
      std::sort(all.begin(), all.end());
      for (std::size_t q = 0; q < k; ++q) out.push_back(all[q].second);
    }
  return out;
}

}  // namespace

TEST(Knn, CollinearHandCase) {
  Tensor<double> p({1, 3, 3}, {0, 0, 0, 1, 0, 0, 3, 0, 0});
  auto g = knn_graph(p, 1);
  EXPECT_EQ(g.neighbor_idx, (std::vector<std::size_t>{1, 0, 1}));
}

TEST(Knn, SquareCornersTieByIndex) {
  // 0:(0,0) 1:(1,0) 2:(0,1) 3:(1,1)
  Tensor<double> p({1, 4, 3}, {0, 0, 0, 1, 0, 0, 0, 1, 0, 1, 1, 0});
  auto g = knn_graph(p, 2);
  EXPECT_EQ(g.neighbor_idx, (std::vector<std::size_t>{1, 2, 0, 3, 0, 3, 1, 2}));
  EXPECT_EQ(accelerate_knn(p, 2), g);
}

TEST(Knn, TwoPoints) {
  Tensor<double> p({1, 2, 3}, {0, 0, 0, 5, 5, 5});
  EXPECT_EQ(knn_graph(p, 1).neighbor_idx, (std::vector<std::size_t>{1, 0}));
  EXPECT_EQ(accelerate_knn(p, 1).neighbor_idx, (std::vector<std::size_t>{1, 0}));
}

TEST(Knn, RowsAscendingAndSelfFree) {
  auto p = randn({2, 50, 3}, 3);
  auto g = knn_graph(p, 7);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 50; ++i) {
      auto row = g.row(b, i);
      double prev = -1;
      for (auto j : row) {
        EXPECT_NE(j, i);
        double d = 0;
        for (std::size_t c = 0; c < 3; ++c) d += std::pow(p.at({b, i, c}) - p.at({b, j, c}), 2);
        EXPECT_GE(d, prev);
        prev = d;
      }
    }
}

TEST(Knn, BothPathsMatchFullSortOracle) {
  for (std::uint64_t s = 0; s < 10; ++s)
    for (std::size_t k : {1u, 4u, 20u}) {
      auto p = randn({1, 64, 3}, 100 + s);
      const auto expect = full_sort_knn(p, k);
      EXPECT_EQ(knn_graph(p, k).neighbor_idx, expect);
      EXPECT_EQ(accelerate_knn(p, k).neighbor_idx, expect);
    }
}

TEST(Knn, DuplicatePointsTieByIndex) {
  // Integer grid with every location used three times: lots of exact ties.
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> u(0, 3);
  Tensor<double> p({1, 60, 3});
  for (std::size_t i = 0; i < 20; ++i) {
    const double x = u(rng), y = u(rng), z = u(rng);
    for (std::size_t r = 0; r < 3; ++r) {
      p.at({0, 20 * r + i, 0}) = x;
      p.at({0, 20 * r + i, 1}) = y;
      p.at({0, 20 * r + i, 2}) = z;
    }
  }
  for (std::size_t k : {2u, 5u, 17u}) {
    const auto expect = full_sort_knn(p, k);
    EXPECT_EQ(knn_graph(p, k).neighbor_idx, expect);
    EXPECT_EQ(accelerate_knn(p, k).neighbor_idx, expect);
  }
}

TEST(Knn, AcceleratedMatchesBruteOnLargeCloud) {
  auto p = randn({1, 1024, 3}, 7);
  EXPECT_EQ(accelerate_knn(p, 20), knn_graph(p, 20));
}

TEST(Knn, HighDimensionalFeatures) {
  auto p = randn({2, 40, 16}, 8);
  EXPECT_EQ(knn_graph(p, 6).neighbor_idx, full_sort_knn(p, 6));
  EXPECT_EQ(accelerate_knn(p, 6), knn_graph(p, 6));
}

TEST(Knn, FloatInputMatchesDoubleOracle) {
  auto pd = randn({1, 64, 3}, 9);
  Tensor<float> pf({1, 64, 3});
  for (std::size_t i = 0; i < pd.numel(); ++i) {
    pf.mutable_data()[i] = static_cast<float>(pd.data()[i]);
    pd.mutable_data()[i] = static_cast<double>(pf.data()[i]);
  }
  EXPECT_EQ(knn_graph(pf, 10).neighbor_idx, full_sort_knn(pd, 10));
  EXPECT_EQ(accelerate_knn(pf, 10).neighbor_idx, full_sort_knn(pd, 10));
}

TEST(Knn, MetricChannelsSubset) {
  auto p = randn({1, 30, 5}, 10);
  std::vector<std::size_t> ch{0, 1, 2};
  auto xyz = reshape(slice(p, 2, 0, 3), {1, 30, 3});
  EXPECT_EQ(knn_graph(p, 4, ch).neighbor_idx, full_sort_knn(xyz, 4));
  EXPECT_EQ(accelerate_knn(p, 4, ch).neighbor_idx, full_sort_knn(xyz, 4));
}

TEST(Knn, KTooLargeFailsOrClamps) {
  auto p = randn({1, 5, 3}, 11);
  EXPECT_THROW(knn_graph(p, 5), ConfigError);
  EXPECT_THROW(accelerate_knn(p, 9), ConfigError);
  auto g = knn_graph(p, 5, {}, KnnPolicy::kClamp);
  EXPECT_EQ(g.k, 4u);
  EXPECT_EQ(accelerate_knn(p, 5, {}, KnnPolicy::kClamp), g);
}

TEST(Knn, BadInputsThrow) {
  EXPECT_THROW(knn_graph(randn({5, 3}, 1), 2), DimensionError);
  EXPECT_THROW(knn_graph(randn({1, 5, 3}, 1), 0), ConfigError);
  std::vector<std::size_t> ch{7};
  EXPECT_THROW(knn_graph(randn({1, 5, 3}, 1), 2, ch), DimensionError);
}

TEST(EdgeFeatures, DeltaIsTranslationInvariant) {
  auto p = randn({1, 20, 3}, 12);
  auto g = knn_graph(p, 5);
  auto shifted = add(p, Tensor<double>({3}, 5.0));
  auto a = edge_features(p, g, EdgeMode::kDelta);
  auto b = edge_features(shifted, g, EdgeMode::kDelta);
  EXPECT_LT(testutil::max_abs_diff(a.data(), b.data()), 1e-12);
}

TEST(EdgeFeatures, PairDelta) {
  Tensor<double> p({1, 2, 3}, {0, 0, 0, 1, 2, 3});
  auto e = edge_features(p, knn_graph(p, 1), EdgeMode::kDelta);  // (1, 3, 2, 1)
  ASSERT_EQ(e.shape(), (Shape{1, 3, 2, 1}));
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(e.at({0, c, 0, 0}), static_cast<double>(c + 1));
    EXPECT_EQ(e.at({0, c, 1, 0}), -static_cast<double>(c + 1));
  }
}

TEST(EdgeFeatures, ConcatMatchesGatherOracle) {
  auto p = randn({2, 12, 3}, 13);
  auto g = knn_graph(p, 4);
  auto e = edge_features(p, g, EdgeMode::kConcat);
  ASSERT_EQ(e.shape(), (Shape{2, 6, 12, 4}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 12; ++i)
      for (std::size_t q = 0; q < 4; ++q) {
        const std::size_t j = g.row(b, i)[q];
        for (std::size_t c = 0; c < 3; ++c) {
          EXPECT_EQ(e.at({b, c, i, q}), p.at({b, i, c}));
          EXPECT_EQ(e.at({b, 3 + c, i, q}), p.at({b, j, c}) - p.at({b, i, c}));
        }
      }
}

TEST(EdgeFeatures, GraphShapeMismatchThrows) {
  auto g = knn_graph(randn({1, 10, 3}, 1), 3);
  EXPECT_THROW(edge_features(randn({1, 11, 3}, 2), g, EdgeMode::kDelta), DimensionError);
}
