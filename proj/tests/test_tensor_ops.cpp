#include "oracle_values.hpp"
#include "test_util.hpp"

using namespace cpt;
using testutil::fd_max_rel;
using testutil::from;
using testutil::max_abs_diff;
using testutil::probe;
using testutil::randn;
using TV = std::vector<Tensor<double>>;

TEST(Matmul, IdentityTimesColumn) {
  Tensor<double> I({2, 2}, {1, 0, 0, 1});
  Tensor<double> b({2, 1}, {3, 4});
  auto c = matmul(I, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c.at({0, 0}), 3);
  EXPECT_EQ(c.at({1, 0}), 4);
}

TEST(Matmul, InnerProduct) {
  auto c = matmul(Tensor<double>({1, 2}, {1, 2}), Tensor<double>({2, 1}, {3, 4}));
  EXPECT_EQ(c.item(), 11);
}

TEST(Matmul, MatchesReference) {
  auto c = matmul(from(oracle::kMatmulA, {4, 5}), from(oracle::kMatmulB, {5, 3}));
  EXPECT_LT(max_abs_diff(c.data(), oracle::kMatmulC), 1e-12);
}

TEST(Matmul, RandomMatchesTripleLoop) {
  auto a = randn({4, 5}, 1), b = randn({5, 3}, 2);
  auto c = matmul(a, b);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) s += a.at({i, k}) * b.at({k, j});
      EXPECT_NEAR(c.at({i, j}), s, 1e-12);
    }
}

TEST(Matmul, BatchedBroadcastsRightOperand) {
  auto a = randn({3, 2, 4}, 3), b = randn({4, 5}, 4);
  auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 2, 5}));
  auto c1 = matmul(slice(a, 0, 1, 2), b);
  EXPECT_LT(max_abs_diff(slice(c, 0, 1, 2).data(), c1.data()), 1e-12);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(randn({2, 3}, 1), randn({2, 3}, 2)), DimensionError);
}

TEST(Softmax, SymmetricPair) {
  auto s = softmax(Tensor<double>({2}, {0, 0}), 0);
  EXPECT_DOUBLE_EQ(s.data()[0], 0.5);
  EXPECT_DOUBLE_EQ(s.data()[1], 0.5);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
  auto s = softmax(Tensor<double>({2}, {1000, 0}), 0);
  EXPECT_NEAR(s.data()[0], 1.0, 1e-12);
  EXPECT_NEAR(s.data()[1], 0.0, 1e-12);
  EXPECT_TRUE(std::isfinite(s.data()[0]));
}

TEST(Softmax, MatchesReference) {
  auto s = softmax(from(oracle::kSoftmaxIn, {7}), 0);
  double total = 0;
  for (double v : s.data()) total += v;
  EXPECT_NEAR(total, 1.0, 1e-9);
  EXPECT_LT(max_abs_diff(s.data(), oracle::kSoftmaxOut), 1e-12);
}

TEST(Softmax, RandomMatchesDirectFormula) {
  auto x = randn({7}, 5);
  auto s = softmax(x, 0);
  double z = 0;
  for (double v : x.data()) z += std::exp(v);
  for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(s.data()[i], std::exp(x.data()[i]) / z, 1e-12);
}

TEST(LayerNorm, ConstantCollapsesToZero) {
  Tensor<double> g({3}, 1.0), b({3}, 0.0);
  auto y = layer_norm(Tensor<double>({1, 3}, {5, 5, 5}), g, b, 1e-5);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoValues) {
  Tensor<double> g({2}, 1.0), b({2}, 0.0);
  auto y = layer_norm(Tensor<double>({1, 2}, {1, 3}), g, b, 1e-12);
  EXPECT_NEAR(y.data()[0], -1.0, 1e-9);
  EXPECT_NEAR(y.data()[1], 1.0, 1e-9);
}

TEST(LayerNorm, RandomMoments) {
  Tensor<double> g({64}, 1.0), b({64}, 0.0);
  auto y = layer_norm(randn({1, 64}, 6, false, 3.0), g, b, 1e-5);
  double mean = 0, var = 0;
  for (double v : y.data()) mean += v / 64;
  for (double v : y.data()) var += (v - mean) * (v - mean) / 64;
  EXPECT_NEAR(mean, 0.0, 1e-6);
  EXPECT_NEAR(var, 1.0, 1e-5);
}

TEST(LayerNorm, AffineMatchesReference) {
  auto y = layer_norm(from(oracle::kLayerNormIn, {2, 6}), from(oracle::kLayerNormGamma, {6}),
                      from(oracle::kLayerNormBeta, {6}), 1e-5);
  EXPECT_LT(max_abs_diff(y.data(), oracle::kLayerNormOut), 1e-12);
}

TEST(Conv, IdentityKernel) {
  auto x = randn({1, 3, 6}, 7);
  Tensor<double> w({3, 1, 1}, 1.0);
  auto y = conv_grouped(x, w, static_cast<const Tensor<double>*>(nullptr), 1, 0, 3);
  EXPECT_TRUE(testutil::bit_equal(x, y));
}

TEST(Conv, HandSum) {
  Tensor<double> x({1, 1, 3}, {1, 2, 3}), w({1, 1, 2}, {1, 1});
  auto y = conv_grouped(x, w, static_cast<const Tensor<double>*>(nullptr), 1, 0, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2}));
  EXPECT_EQ(y.data()[0], 3);
  EXPECT_EQ(y.data()[1], 5);
}

TEST(Conv, DepthwiseThenPointwiseMatchReference) {
  auto x = from(oracle::kConvX, {2, 4, 9});
  auto d = conv_grouped(x, from(oracle::kConvDepthwise, {4, 1, 3}), static_cast<const Tensor<double>*>(nullptr), 1, 1, 4);
  EXPECT_LT(max_abs_diff(d.data(), oracle::kConvDepthwiseOut), 1e-12);
  auto p = conv_grouped(d, from(oracle::kConvPointwise, {3, 4, 1}), static_cast<const Tensor<double>*>(nullptr), 1, 0, 1);
  EXPECT_LT(max_abs_diff(p.data(), oracle::kConvPointwiseOut), 1e-12);
}

TEST(Conv, StridedWithBiasMatchesReference) {
  auto b = from(oracle::kConvStridedB, {2});
  auto y = conv_grouped(from(oracle::kConvX, {2, 4, 9}), from(oracle::kConvStridedW, {2, 4, 3}), &b, 2, 0, 1);
  ASSERT_EQ(y.shape(), (Shape{2, 2, 4}));
  EXPECT_LT(max_abs_diff(y.data(), oracle::kConvStridedOut), 1e-12);
}

TEST(Conv, RandomMatchesSlidingWindow) {
  auto x = randn({2, 4, 10}, 8), w = randn({6, 2, 3}, 9), b = randn({6}, 10);
  const std::size_t stride = 2, pad = 1, groups = 2;
  auto y = conv_grouped(x, w, &b, stride, pad, groups);
  const std::size_t L = (10 + 2 * pad - 3) / stride + 1;
  ASSERT_EQ(y.shape(), (Shape{2, 6, L}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 6; ++o)
      for (std::size_t l = 0; l < L; ++l) {
        double s = b.data()[o];
        const std::size_t g = o / 3;
        for (std::size_t c = 0; c < 2; ++c)
          for (std::size_t t = 0; t < 3; ++t) {
            const long pos = static_cast<long>(l * stride + t) - static_cast<long>(pad);
            if (pos < 0 || pos >= 10) continue;
            s += w.at({o, c, t}) * x.at({n, g * 2 + c, static_cast<std::size_t>(pos)});
          }
        EXPECT_NEAR(y.at({n, o, l}), s, 1e-12);
      }
}

TEST(Conv, BadGroupsThrow) {
  EXPECT_THROW(conv_grouped(randn({1, 3, 5}, 1), randn({4, 2, 1}, 2), static_cast<const Tensor<double>*>(nullptr), 1, 0, 2),
               DimensionError);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  Tensor<double> z({2, 5}, 0.0);
  std::vector<std::size_t> t{1, 4};
  EXPECT_NEAR(cross_entropy(z, std::span<const std::size_t>(t)).item(), std::log(5.0), 1e-12);
}

TEST(CrossEntropy, ConfidentCorrectIsZero) {
  Tensor<double> z({1, 3}, {0, 800, 0});
  std::vector<std::size_t> t{1};
  EXPECT_NEAR(cross_entropy(z, std::span<const std::size_t>(t)).item(), 0.0, 1e-12);
}

TEST(CrossEntropy, MatchesReference) {
  std::vector<std::size_t> t{2, 0, 3};
  auto l = cross_entropy(from(oracle::kCrossEntropyLogits, {3, 4}), std::span<const std::size_t>(t));
  EXPECT_NEAR(l.item(), oracle::kCrossEntropyLoss[0], 1e-12);
}

TEST(CrossEntropy, RandomMatchesLogSumExp) {
  auto z = randn({4, 6}, 11, false, 4.0);
  std::vector<std::size_t> t{0, 5, 2, 2};
  double expect = 0;
  for (std::size_t r = 0; r < 4; ++r) {
    double m = -1e300;
    for (std::size_t c = 0; c < 6; ++c) m = std::max(m, z.at({r, c}));
    double s = 0;
    for (std::size_t c = 0; c < 6; ++c) s += std::exp(z.at({r, c}) - m);
    expect += (m + std::log(s) - z.at({r, t[r]})) / 4;
  }
  EXPECT_NEAR(cross_entropy(z, std::span<const std::size_t>(t)).item(), expect, 1e-10);
}

TEST(CrossEntropy, TargetOutOfRangeThrows) {
  std::vector<std::size_t> t{3};
  EXPECT_THROW(cross_entropy(Tensor<double>({1, 3}), std::span<const std::size_t>(t)), ConfigError);
}

TEST(Backward, SumGivesOnes) {
  Tensor<double> x({3}, {1, 2, 3}, true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto l = sum(x);
  tape.backward(l);
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
  Tensor<double> x({2}, {1, 2}, true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto l = sum(mul(x, x));
  tape.backward(l);
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Backward, NonScalarWithoutSeedThrows) {
  Tensor<double> x({2}, {1, 2}, true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto y = scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), UsageError);
}

TEST(Backward, ReusedInputAccumulates) {
  Tensor<double> x({2}, {3, -1}, true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto l = sum(add(x, scale(x, 3.0)));
  tape.backward(l);
  EXPECT_EQ(x.grad()[0], 4.0);
  EXPECT_EQ(x.grad()[1], 4.0);
}

// Finite-difference checks of every differentiable op.

TEST(OpGradients, Elementwise) {
  TV in{randn({3, 4}, 1), randn({3, 4}, 2), randn({4}, 3)};
  EXPECT_LT(fd_max_rel(in, [](const TV& v) { return probe(add(mul(v[0], v[1]), v[2])); }), 1e-6);
  EXPECT_LT(fd_max_rel(in, [](const TV& v) { return probe(sub(v[0], v[2])); }), 1e-6);
  EXPECT_LT(fd_max_rel(in, [](const TV& v) { return probe(scale(v[1], -2.5)); }), 1e-6);
}

TEST(OpGradients, Relu) {
  TV in{randn({5, 4}, 4)};
  EXPECT_LT(fd_max_rel(in, [](const TV& v) { return probe(relu(v[0])); }), 1e-6);
}

TEST(OpGradients, ShapeOps) {
  TV in{randn({2, 3, 4}, 5), randn({2, 2, 4}, 6)};
  EXPECT_LT(fd_max_rel(in, [](const TV& v) { return probe(permute(v[0], {2, 0, 1})); }), 1e-6);
  EXPECT_LT(fd_max_rel(in, [](const TV& v) { return probe(transpose(v[0], 1, 2)); }), 1e-6);
  EXPECT_LT(fd_max_rel(in, [](const TV& v) { return probe(reshape(v[0], {6, 4})); }), 1e-6);
  EXPECT_LT(fd_max_rel(in, [](const TV& v) { return probe(concat(TV{v[0], v[1]}, 1)); }), 1e-6);
  EXPECT_LT(fd_max_rel(in, [](const TV& v) { return probe(slice(v[0], 2, 1, 3)); }), 1e-6);
  EXPECT_LT(fd_max_rel(in, [](const TV& v) { return probe(expand(reshape(v[1], {2, 2, 1, 4}), 2, 3)); }), 1e-6);
}

TEST(OpGradients, Reductions) {
  TV in{randn({2, 5, 3}, 7)};
  EXPECT_LT(fd_max_rel(in, [](const TV& v) { return probe(max_reduce(v[0], 1).values); }), 1e-6);
  EXPECT_LT(fd_max_rel(in, [](const TV& v) { return probe(mean_reduce(v[0], 2)); }), 1e-6);
  EXPECT_LT(fd_max_rel(in, [](const TV& v) { return sum(v[0]); }), 1e-6);
}

TEST(OpGradients, Gather) {
  TV in{randn({2, 4, 3}, 8)};
  std::vector<std::size_t> idx{0, 3, 3, 1, 2, 2, 0, 1};
  EXPECT_LT(fd_max_rel(in, [&](const TV& v) {
              return probe(batched_gather(v[0], std::span<const std::size_t>(idx), 4));
            }),
            1e-6);
}

TEST(OpGradients, SoftmaxAndLogSoftmax) {
  TV in{randn({3, 5}, 9)};
  EXPECT_LT(fd_max_rel(in, [](const TV& v) { return probe(softmax(v[0], -1)); }), 1e-6);
  EXPECT_LT(fd_max_rel(in, [](const TV& v) { return probe(softmax(v[0], 0)); }), 1e-6);
  EXPECT_LT(fd_max_rel(in, [](const TV& v) { return probe(log_softmax(v[0], -1)); }), 1e-6);
}

TEST(OpGradients, CrossEntropy) {
  TV in{randn({4, 3}, 10)};
  std::vector<std::size_t> t{0, 2, 1, 1};
  EXPECT_LT(fd_max_rel(in, [&](const TV& v) { return cross_entropy(v[0], std::span<const std::size_t>(t)); }), 1e-6);
}

TEST(OpGradients, LayerNorm) {
  TV in{randn({3, 6}, 11), randn({6}, 12), randn({6}, 13)};
  EXPECT_LT(fd_max_rel(in, [](const TV& v) { return probe(layer_norm(v[0], v[1], v[2], 1e-5)); }), 1e-5);
}

TEST(OpGradients, MatmulAndLinear) {
  TV in{randn({2, 3, 4}, 14), randn({4, 5}, 15), randn({5}, 16), randn({2, 4, 2}, 17)};
  EXPECT_LT(fd_max_rel(in, [](const TV& v) { return probe(linear(v[0], v[1], v[2])); }), 1e-6);
  EXPECT_LT(fd_max_rel(in, [](const TV& v) { return probe(matmul(v[0], v[3])); }), 1e-6);
}

TEST(OpGradients, Conv) {
  TV in{randn({2, 4, 7}, 18), randn({4, 2, 3}, 19), randn({4}, 20)};
  EXPECT_LT(fd_max_rel(in, [](const TV& v) { return probe(conv_grouped(v[0], v[1], &v[2], 2, 1, 2)); }), 1e-6);
}

TEST(Dropout, EvalIsIdentityAndTrainScalesKept) {
  auto x = randn({1000}, 21);
  std::mt19937_64 rng(1);
  EXPECT_TRUE(testutil::bit_equal(dropout(x, 0.5, false, rng), x));
  auto y = dropout(x, 0.5, true, rng);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    if (y.data()[i] == 0) continue;
    ++kept;
    EXPECT_NEAR(y.data()[i], 2 * x.data()[i], 1e-15);
  }
  EXPECT_GT(kept, 400u);
  EXPECT_LT(kept, 600u);
}

TEST(MaxReduce, TiesGoToLowestIndex) {
  Tensor<double> x({1, 4}, {2, 5, 5, 1});
  auto r = max_reduce(x, 1);
  EXPECT_EQ(r.values.item(), 5);
  EXPECT_EQ(r.argmax[0], 1u);
}

TEST(Tensor, ZeroLengthAxisRejected) {
  EXPECT_THROW(Tensor<double>(Shape{2, 0}), DimensionError);
}
