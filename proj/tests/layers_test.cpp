#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "nfres/layers.hpp"

using namespace nfres;

namespace {

// Direct six-loop cross-correlation with zero padding.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t d = w.dim(0), k = w.dim(2);
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  Tensor<double> y({n, d, ho, wo});
  auto out = y.mutable_data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < d; ++o)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          double s = 0.0;
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t ki = 0; ki < k; ++ki)
              for (std::size_t kj = 0; kj < k; ++kj) {
                const long r = static_cast<long>(i * stride + ki) - static_cast<long>(pad);
                const long q = static_cast<long>(j * stride + kj) - static_cast<long>(pad);
                if (r < 0 || q < 0 || r >= static_cast<long>(h) || q >= static_cast<long>(wd)) continue;
                s += x[((b * c + ch) * h + static_cast<std::size_t>(r)) * wd + static_cast<std::size_t>(q)] *
                     w[((o * c + ch) * k + ki) * k + kj];
              }
          out[((b * d + o) * ho + i) * wo + j] = s;
        }
  return y;
}

}  // namespace

struct ConvCase {
  std::size_t n, c, d, h, k, stride;
};

class ConvMatchesReference : public ::testing::TestWithParam<ConvCase> {};

TEST_P(ConvMatchesReference, Forward) {
  const auto p = GetParam();
  RngStream s(11, "conv");
  auto x = gaussian_sample<double>({p.n, p.c, p.h, p.h}, 0, 1, s);
  auto w = gaussian_sample<double>({p.d, p.c, p.k, p.k}, 0, 1, s);
  const std::size_t pad = (p.k - 1) / 2;
  auto got = conv2d(x, w, p.stride, pad).y;
  auto want = naive_conv(x, w, p.stride, pad);
  ASSERT_EQ(got.shape(), want.shape());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12) << i;
}

INSTANTIATE_TEST_SUITE_P(Geometries, ConvMatchesReference,
                         ::testing::Values(ConvCase{2, 3, 4, 5, 3, 1}, ConvCase{1, 2, 3, 6, 3, 2},
                                           ConvCase{3, 4, 2, 4, 1, 1}, ConvCase{2, 3, 5, 7, 1, 2},
                                           ConvCase{1, 64, 8, 32, 3, 1}, ConvCase{2, 1, 1, 1, 3, 1}));

class FloatConvMatchesDouble : public ::testing::TestWithParam<ConvCase> {};

TEST_P(FloatConvMatchesDouble, ForwardAndBackward) {
  const auto p = GetParam();
  RngStream s(12, "conv-float");
  auto x = gaussian_sample<double>({p.n, p.c, p.h, p.h}, 0, 1, s);
  auto w = gaussian_sample<double>({p.d, p.c, p.k, p.k}, 0, 1, s);
  const std::size_t pad = (p.k - 1) / 2;
  auto ref = conv2d(x, w, p.stride, pad);
  auto got = conv2d(x.cast<float>(), w.cast<float>(), p.stride, pad);
  const double tol = 1e-5 * static_cast<double>(p.c * p.k * p.k);
  ASSERT_EQ(got.y.shape(), ref.y.shape());
  for (std::size_t i = 0; i < got.y.size(); ++i) ASSERT_NEAR(got.y[i], ref.y[i], tol) << i;

  auto dy = gaussian_sample<double>(ref.y.shape(), 0, 1, s);
  auto gref = conv2d_backward(ref.cache, dy);
  auto ggot = conv2d_backward(got.cache, dy.cast<float>());
  const double dx_tol = 1e-5 * static_cast<double>(p.d * p.k * p.k);
  const double dw_tol = 1e-5 * static_cast<double>(p.n * ref.y.dim(2) * ref.y.dim(3));
  for (std::size_t i = 0; i < ggot.dx.size(); ++i) ASSERT_NEAR(ggot.dx[i], gref.dx[i], dx_tol) << i;
  for (std::size_t i = 0; i < ggot.dw.size(); ++i) ASSERT_NEAR(ggot.dw[i], gref.dw[i], dw_tol) << i;
}

INSTANTIATE_TEST_SUITE_P(NetworkShapes, FloatConvMatchesDouble,
                         ::testing::Values(ConvCase{4, 64, 64, 16, 3, 1}, ConvCase{4, 128, 256, 8, 1, 2},
                                           ConvCase{2, 256, 64, 8, 1, 1}, ConvCase{8, 3, 64, 32, 3, 1}));

TEST(Conv, RejectsChannelMismatch) {
  Tensor<float> x({1, 3, 4, 4}), w({2, 2, 3, 3});
  EXPECT_THROW(conv2d(x, w, 1, 1), InvalidArgument);
}

TEST(Conv, CacheCannotBeReused) {
  Tensor<double> x({1, 1, 3, 3}, 1.0), w({1, 1, 3, 3}, 1.0);
  auto out = conv2d(x, w, 1, 1);
  conv2d_backward(out.cache, out.y, true);
  EXPECT_THROW(conv2d_backward(out.cache, out.y, true), CacheReuse);
}

TEST(Relu, ForwardAndMask) {
  Tensor<double> x(Shape{4}, std::vector<double>{-1, 0, 2, -3});
  auto r = relu(x);
  EXPECT_EQ(r.y, (Tensor<double>(Shape{4}, std::vector<double>{0, 0, 2, 0})));
  auto g = relu_backward(r.cache, Tensor<double>({4}, 1.0));
  EXPECT_EQ(g, (Tensor<double>(Shape{4}, std::vector<double>{0, 0, 1, 0})));
}

TEST(Batchnorm, TrainModeStandardizesEachChannel) {
  RngStream s(5, "bn");
  auto x = gaussian_sample<double>({8, 3, 4, 4}, 2.0, 3.0, s);
  auto stats = BnRunningStats<double>::fresh(3);
  auto out = batchnorm(x, Tensor<double>({3}, 1.0), Tensor<double>({3}, 0.0), BnMode::train, stats);
  auto m = moments(out.y, {0, 2, 3});
  for (std::size_t ch = 0; ch < 3; ++ch) {
    EXPECT_NEAR(m.mean[ch], 0.0, 1e-12);
    EXPECT_NEAR(m.variance[ch], 1.0, 1e-4);  // epsilon 1e-5 against variance ~9
  }
}

TEST(Batchnorm, RunningStatisticsUseMomentumPointOne) {
  // Channel values {1, 3}: batch mean 2, population variance 1.
  Tensor<double> x(Shape{2, 1, 1, 1}, std::vector<double>{1, 3});
  auto stats = BnRunningStats<double>::fresh(1);
  batchnorm(x, Tensor<double>({1}, 1.0), Tensor<double>({1}, 0.0), BnMode::train, stats);
  EXPECT_DOUBLE_EQ(stats.mean[0], 0.2);
  EXPECT_DOUBLE_EQ(stats.var[0], 1.0);
}

TEST(Batchnorm, EvalModeUsesRunningStatistics) {
  Tensor<double> x(Shape{1, 1, 1, 2}, std::vector<double>{4, 6});
  BnRunningStats<double> stats{Tensor<double>({1}, 4.0), Tensor<double>({1}, 4.0)};
  auto out = batchnorm(x, Tensor<double>({1}, 2.0), Tensor<double>({1}, 1.0), BnMode::eval, stats);
  const double inv = 1.0 / std::sqrt(4.0 + 1e-5);
  EXPECT_NEAR(out.y[0], 1.0, 1e-12);
  EXPECT_NEAR(out.y[1], 2.0 * 2.0 * inv + 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(stats.mean[0], 4.0);
}

TEST(Batchnorm, TrainModeNeedsTwoSamples) {
  auto stats = BnRunningStats<double>::fresh(1);
  EXPECT_THROW(batchnorm(Tensor<double>({1, 1, 2, 2}, 1.0), Tensor<double>({1}, 1.0), Tensor<double>({1}, 0.0),
                         BnMode::train, stats),
               InvalidArgument);
}

TEST(Linear, AffineMap) {
  Tensor<double> x(Shape{1, 2}, std::vector<double>{1, 2});
  Tensor<double> w(Shape{3, 2}, std::vector<double>{1, 0, 0, 1, 1, 1});
  Tensor<double> b(Shape{3}, std::vector<double>{0.5, 0, -1});
  auto y = linear(x, w, b).y;
  EXPECT_EQ(y, (Tensor<double>(Shape{1, 3}, std::vector<double>{1.5, 2, 2})));
}

TEST(Pool, AveragesSpatialPositions) {
  Tensor<double> x(Shape{1, 2, 1, 2}, std::vector<double>{1, 3, 10, 20});
  auto y = global_avg_pool(x).y;
  EXPECT_EQ(y, (Tensor<double>(Shape{1, 2}, std::vector<double>{2, 15})));
}

TEST(SoftmaxXent, EqualLogitsGiveLogK) {
  for (std::size_t k : {2u, 10u, 1000u}) {
    Tensor<double> logits({3, k}, 0.25);
    std::vector<int> labels{0, 1, 1};
    EXPECT_NEAR(softmax_xent(logits, std::span<const int>(labels)).loss, std::log(static_cast<double>(k)), 1e-12);
  }
}

TEST(SoftmaxXent, RowsOfSoftmaxSumToOne) {
  RngStream s(2, "sm");
  auto p = softmax(gaussian_sample<double>({4, 7}, 0, 5, s));
  for (std::size_t i = 0; i < 4; ++i) {
    double t = 0;
    for (std::size_t j = 0; j < 7; ++j) t += p[i * 7 + j];
    EXPECT_NEAR(t, 1.0, 1e-14);
  }
}

TEST(SoftmaxXent, SmoothedTargets) {
  // Two classes, logits (0, 0): loss is ln 2 whatever the smoothing.
  Tensor<double> logits({1, 2}, 0.0);
  std::vector<int> labels{1};
  auto r = softmax_xent(logits, std::span<const int>(labels), 0.1);
  EXPECT_NEAR(r.loss, std::log(2.0), 1e-12);
  // target = (0.05, 0.95), p = (0.5, 0.5)
  EXPECT_NEAR(r.dlogits[0], 0.45, 1e-12);
  EXPECT_NEAR(r.dlogits[1], -0.45, 1e-12);
}

TEST(SoftmaxXent, LabelOutOfRange) {
  Tensor<double> logits({1, 3}, 0.0);
  std::vector<int> labels{3};
  EXPECT_THROW(softmax_xent(logits, std::span<const int>(labels)), InvalidArgument);
}

TEST(SoftmaxXent, HugeLogitsStayFinite) {
  Tensor<double> logits(Shape{1, 2}, std::vector<double>{1e4, -1e4});
  std::vector<int> labels{0};
  auto r = softmax_xent(logits, std::span<const int>(labels));
  EXPECT_NEAR(r.loss, 0.0, 1e-12);
  EXPECT_EQ(r.correct, 1u);
}
