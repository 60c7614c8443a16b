#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "sona/grad_check.hpp"
#include "sona/nn.hpp"

using namespace sona;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = true, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::vector<double> v(shape_numel(shape));
  for (auto& e : v) e = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Conv2d, PointwiseIdentityKernel) {
  auto x = random_tensor({2, 3, 4, 5}, 1, false);
  std::vector<double> w(9, 0.0);
  for (int c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
  Conv2dParams p{Tensor({3, 3, 1, 1}, w), Tensor::zeros({3})};
  EXPECT_EQ(values(conv2d(x, p)), values(x));
}

TEST(Conv2d, OnesKernelCountsNeighbours) {
  Conv2dParams p{Tensor::full({1, 1, 3, 3}, 1.0), std::nullopt, {1, 1}, {1, 1}, {1, 1}};
  auto y = conv2d(Tensor::full({1, 1, 4, 4}, 1.0), p);
  std::size_t oh, ow;
  auto expected = oracle::conv2d(std::vector<double>(16, 1.0), 1, 1, 4, 4, std::vector<double>(9, 1.0), 1, 3, 3, {}, 1,
                                 1, 1, 1, 1, 1, oh, ow);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  EXPECT_EQ(values(y), expected);
  EXPECT_EQ(y[5], 9.0);   // interior
  EXPECT_EQ(y[1], 6.0);   // edge
  EXPECT_EQ(y[0], 4.0);   // corner
  EXPECT_EQ(y[15], 4.0);
}

TEST(Conv2d, DilatedPaddingKeepsSize) {
  Rng rng(3);
  auto p = make_conv(2, 3, 3, rng, true, 1, 2);
  EXPECT_EQ(p.padding.h, 2);
  auto y = conv2d(random_tensor({1, 2, 8, 8}, 4, false), p);
  EXPECT_EQ(y.shape(), (Shape{1, 3, 8, 8}));
}

TEST(Conv2d, MatchesDirectOracleWithStrideDilationPadding) {
  for (auto [sh, sw, ph, pw, dh, dw] : std::vector<std::array<int, 6>>{
           {1, 1, 0, 0, 1, 1}, {2, 1, 1, 2, 1, 2}, {1, 2, 2, 1, 2, 1}, {2, 2, 3, 3, 3, 2}}) {
    auto x = random_tensor({2, 3, 7, 6}, 10, false);
    auto w = random_tensor({4, 3, 3, 2}, 11, false);
    auto b = random_tensor({4}, 12, false);
    Conv2dParams p{w, b, {sh, sw}, {ph, pw}, {dh, dw}};
    auto y = conv2d(x, p);
    std::size_t oh, ow;
    auto expected = oracle::conv2d(values(x), 2, 3, 7, 6, values(w), 4, 3, 2, values(b), sh, sw, ph, pw, dh, dw, oh, ow);
    ASSERT_EQ(y.shape(), (Shape{2, 4, oh, ow}));
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(y[i], expected[i], 1e-12);
  }
}

TEST(Conv2d, PointwiseEqualsPerPositionMatmul) {
  auto x = random_tensor({2, 4, 3, 3}, 13, false);
  auto w = random_tensor({5, 4, 1, 1}, 14, false);
  auto y = conv2d(x, Conv2dParams{w});
  // Each position's channel vector times weight^T.
  auto rows = to_position_major(x);  // [2 x 9 x 4]
  auto wt = transpose(reshape(w, {5, 4}));
  for (std::size_t s = 0; s < 2; ++s) {
    Tensor xs({9, 4}, std::vector<double>(rows.data().begin() + s * 36, rows.data().begin() + (s + 1) * 36));
    auto ys = matmul(xs, wt);  // [9 x 5]
    for (std::size_t q = 0; q < 9; ++q)
      for (std::size_t o = 0; o < 5; ++o) EXPECT_NEAR(y[(s * 5 + o) * 9 + q], ys[q * 5 + o], 1e-12);
  }
}

TEST(Conv2d, Errors) {
  Conv2dParams p{Tensor::zeros({2, 3, 3, 3})};
  EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 5, 5}), p), dimension_error);
  EXPECT_THROW(conv2d(Tensor::zeros({1, 3, 2, 2}), p), dimension_error);
}

TEST(Conv2d, GradientsWithStrideAndDilation) {
  auto x = random_tensor({2, 2, 5, 6}, 15);
  auto w = random_tensor({3, 2, 3, 3}, 16);
  auto b = random_tensor({3}, 17);
  Conv2dParams p{w, b, {2, 1}, {2, 1}, {2, 1}};
  auto err = grad_check_all([&] { return sum(mul(conv2d(x, p), conv2d(x, p))); }, {x, w, b});
  EXPECT_LT(err.max_rel_error, 1e-6);
}

TEST(BatchNorm, TrainModeStandardizes) {
  auto x = random_tensor({4, 3, 2, 2}, 20, false, -3.0, 5.0);
  auto s = BatchNormState::create(3);
  auto y = batch_norm(x, s);
  for (std::size_t c = 0; c < 3; ++c) {
    double mu = 0.0, var = 0.0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t q = 0; q < 4; ++q) mu += y[(n * 3 + c) * 4 + q];
    mu /= 16.0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t q = 0; q < 4; ++q) var += std::pow(y[(n * 3 + c) * 4 + q] - mu, 2);
    var /= 16.0;
    EXPECT_LT(std::abs(mu), 1e-10);
    EXPECT_NEAR(var, 1.0, 1e-3);  // epsilon shrinks it slightly
  }
}

TEST(BatchNorm, UpdatesRunningStatistics) {
  auto x = random_tensor({4, 2}, 21, false);
  auto s = BatchNormState::create(2, 0.5);
  batch_norm(x, s);
  double mu = 0.0;
  for (std::size_t n = 0; n < 4; ++n) mu += x[n * 2];
  EXPECT_NEAR(s.running_mean[0], 0.5 * mu / 4.0, 1e-15);
  EXPECT_GE(s.running_var[0], 0.0);
}

TEST(BatchNorm, EvalModeClosedForm) {
  auto x = random_tensor({2, 2, 2, 2}, 22, false);
  auto s = BatchNormState::create(2);
  s.mode = Mode::eval;
  std::fill(s.scale.mutable_data().begin(), s.scale.mutable_data().end(), 2.0);
  std::fill(s.shift.mutable_data().begin(), s.shift.mutable_data().end(), 3.0);
  auto y = batch_norm(x, s);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], 2.0 * x[i] / std::sqrt(1.0 + 1e-5) + 3.0, 1e-14);
}

TEST(BatchNorm, TrainModeNeedsTwoValues) {
  auto s = BatchNormState::create(2);
  EXPECT_THROW(batch_norm(Tensor::zeros({1, 2, 1, 1}), s), contract_error);
  s.mode = Mode::eval;
  EXPECT_NO_THROW(batch_norm(Tensor::zeros({1, 2, 1, 1}), s));
}

TEST(BatchNorm, TrainModeGradient) {
  auto x = random_tensor({4, 3, 2, 2}, 23);
  auto s = BatchNormState::create(3);
  auto w = random_tensor({4, 3, 2, 2}, 24, false);
  Rng rng(5);
  for (auto& v : s.scale.mutable_data()) v = rng.uniform(0.5, 1.5);
  for (auto& v : s.shift.mutable_data()) v = rng.uniform(-0.5, 0.5);
  auto err = grad_check_all([&] { return sum(mul(batch_norm(x, s), w)); }, {x, s.scale, s.shift});
  EXPECT_LT(err.max_rel_error, 1e-4);
}

TEST(BatchNorm, EvalModeGradient) {
  auto x = random_tensor({2, 3}, 25);
  auto s = BatchNormState::create(3);
  s.mode = Mode::eval;
  auto w = random_tensor({2, 3}, 26, false);
  EXPECT_LT(grad_check_all([&] { return sum(mul(batch_norm(x, s), w)); }, {x, s.scale, s.shift}).max_rel_error, 1e-8);
}

TEST(Activation, ReluAndLeaky) {
  EXPECT_EQ(values(relu(Tensor({3}, {-1, 0, 2}))), (std::vector<double>{0, 0, 2}));
  auto y = leaky_relu(Tensor({2}, {-2, 3}), 0.1);
  EXPECT_DOUBLE_EQ(y[0], -0.2);
  EXPECT_EQ(y[1], 3.0);
  EXPECT_THROW(leaky_relu(Tensor({1}, {1}), 1.0), contract_error);
}

TEST(Activation, LeakyGradientBelowZeroIsSlope) {
  Tensor x({2}, {-0.7, -2.0}, true);
  backward(sum(leaky_relu(x, 0.01)));
  EXPECT_EQ(x.grad()[0], 0.01);
  EXPECT_EQ(x.grad()[1], 0.01);
}

TEST(GlobalPool, ConstantAndAverage) {
  auto c = Tensor::full({1, 2, 3, 3}, 4.5);
  EXPECT_EQ(values(global_pool(c, PoolKind::avg)), (std::vector<double>{4.5, 4.5}));
  EXPECT_EQ(values(global_pool(c, PoolKind::max)), (std::vector<double>{4.5, 4.5}));
  EXPECT_EQ(global_pool(Tensor({1, 1, 2, 2}, {1, 3, 5, 7}), PoolKind::avg).item(), 4.0);
}

TEST(GlobalPool, MaxGradientIsOneHot) {
  auto x = random_tensor({2, 3, 3, 2}, 30);
  backward(sum(global_pool(x, PoolKind::max)));
  for (std::size_t r = 0; r < 6; ++r) {
    double total = 0.0;
    for (std::size_t q = 0; q < 6; ++q) total += x.grad()[r * 6 + q];
    EXPECT_EQ(total, 1.0);
  }
  x.zero_grad();
  EXPECT_LT(grad_check([](const Tensor& t) { return sum(global_pool(t, PoolKind::max)); }, x, 1e-6), 1e-8);
  EXPECT_LT(grad_check([](const Tensor& t) { return sum(global_pool(t, PoolKind::avg)); }, x, 1e-5), 1e-8);
}

TEST(GlobalPool, MaxTiesGoToFirstIndex) {
  Tensor x({1, 1, 2, 2}, {1, 5, 5, 0}, true);
  backward(sum(global_pool(x, PoolKind::max)));
  EXPECT_EQ(values(Tensor({4}, std::vector<double>(x.grad().begin(), x.grad().end()))),
            (std::vector<double>{0, 1, 0, 0}));
}

TEST(Softmax, UniformRow) {
  auto y = softmax_rows(Tensor({1, 3}, {0, 0, 0}));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  auto y = softmax_rows(Tensor({1, 2}, {1000, 0}));
  EXPECT_NEAR(y[0], 1.0, 1e-12);
  EXPECT_NEAR(y[1], 0.0, 1e-12);
  EXPECT_TRUE(y.finite());
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  auto x = random_tensor({5, 5}, 31, false, -4.0, 4.0);
  auto y = softmax_rows(x);
  std::vector<double> shifted(x.data().begin(), x.data().end());
  for (std::size_t j = 0; j < 5; ++j) shifted[2 * 5 + j] += 17.25;
  auto ys = softmax_rows(Tensor({5, 5}, shifted));
  for (std::size_t r = 0; r < 5; ++r) {
    double total = 0.0;
    for (std::size_t j = 0; j < 5; ++j) total += y[r * 5 + j];
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  for (std::size_t i = 0; i < 25; ++i) EXPECT_NEAR(ys[i], y[i], 1e-12);
}

TEST(Softmax, NaNIsNumericError) {
  EXPECT_THROW(softmax_rows(Tensor({1, 2}, {std::nan(""), 0.0})), numeric_error);
}

TEST(Softmax, Gradient) {
  auto x = random_tensor({3, 4}, 32);
  auto w = random_tensor({3, 4}, 33, false);
  EXPECT_LT(grad_check([&](const Tensor& t) { return sum(mul(softmax_rows(t), w)); }, x, 1e-5), 1e-8);
}

namespace {

BottleneckParams make_block(std::size_t channels, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t mid = channels / 4;
  BottleneckParams b;
  b.reduce = make_conv(channels, mid, 1, rng);
  b.spatial = make_conv(mid, mid, 3, rng);
  b.expand = make_conv(mid, channels, 1, rng);
  b.reduce_bn = BatchNormState::create(mid);
  b.spatial_bn = BatchNormState::create(mid);
  b.expand_bn = BatchNormState::create(channels);
  return b;
}

}  // namespace

TEST(Bottleneck, ZeroWeightsEvalModeGivesRelu) {
  auto b = make_block(8, 40);
  for (auto* c : {&b.reduce, &b.spatial, &b.expand})
    std::fill(c->weight.mutable_data().begin(), c->weight.mutable_data().end(), 0.0);
  for (auto* bn : {&b.reduce_bn, &b.spatial_bn, &b.expand_bn}) {
    bn->mode = Mode::eval;
    std::fill(bn->running_var.mutable_data().begin(), bn->running_var.mutable_data().end(), 0.0);
  }
  auto x = random_tensor({1, 8, 3, 2}, 41, false);
  EXPECT_EQ(values(bottleneck(x, b)), values(relu(x)));
}

TEST(Bottleneck, PreservesSpatialSize) {
  auto b = make_block(8, 42);
  for (auto [h, w] : std::vector<std::pair<std::size_t, std::size_t>>{{1, 1}, {2, 5}, {7, 3}}) {
    auto y = bottleneck(random_tensor({2, 8, h, w}, 43, false), b);
    EXPECT_EQ(y.shape(), (Shape{2, 8, h, w}));
  }
}

TEST(Bottleneck, ChannelMismatch) {
  auto b = make_block(8, 44);
  EXPECT_THROW(bottleneck(Tensor::zeros({1, 4, 2, 2}), b), dimension_error);
}

TEST(Bottleneck, EndToEndGradient) {
  auto b = make_block(8, 45);
  auto x = random_tensor({2, 8, 4, 4}, 46);
  auto w = random_tensor({2, 8, 4, 4}, 47, false);
  auto err = grad_check_all([&] { return sum(mul(bottleneck(x, b), w)); },
                            {x, b.reduce.weight, b.spatial.weight, b.expand.weight, b.spatial_bn.scale});
  EXPECT_LT(err.max_rel_error, 1e-4);
}
