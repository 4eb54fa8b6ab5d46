#include <gtest/gtest.h>

#include <cmath>

#include "ctflow/autograd.hpp"
#include "ctflow/grad_check.hpp"
#include "test_util.hpp"

namespace ctflow {
namespace {

using testing::random_tensor;
using VarD = Var<double>;

// Weighted sum against a fixed random tensor, so that every output element
// contributes a distinct amount to the scalar.
VarD probe_sum(const VarD& y, std::uint64_t seed = 99) {
  return sum(mul(y, VarD(random_tensor<double>(y.shape(), seed))));
}

TEST(Conv2d, AllOnesCountsOverlaps) {
  Var<float> x(Tensor<float>({1, 1, 3, 3}, 1.0f));
  Var<float> w(Tensor<float>({1, 1, 3, 3}, 1.0f));
  Var<float> b(Tensor<float>({1}, 0.0f));
  const auto y = conv2d(x, w, b, 1).value();
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_FLOAT_EQ(y.at(0, 0, 1, 1), 9.0f);
  EXPECT_FLOAT_EQ(y.at(0, 0, 0, 0), 4.0f);
  EXPECT_FLOAT_EQ(y.at(0, 0, 2, 2), 4.0f);
  EXPECT_FLOAT_EQ(y.at(0, 0, 0, 1), 6.0f);
}

TEST(Conv2d, ZeroWeightGivesBias) {
  Var<float> x(random_tensor<float>({2, 3, 5, 4}, 1));
  Var<float> w(Tensor<float>({2, 3, 3, 3}, 0.0f));
  Var<float> b(Tensor<float>({2}, std::vector<float>{0.25f, -1.5f}));
  const auto y = conv2d(x, w, b, 1).value();
  ASSERT_EQ(y.shape(), (Shape{2, 2, 5, 4}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t h = 0; h < 5; ++h)
      for (std::size_t ww = 0; ww < 4; ++ww) {
        EXPECT_EQ(y.at(n, 0, h, ww), 0.25f);
        EXPECT_EQ(y.at(n, 1, h, ww), -1.5f);
      }
}

// Reference 3x3, padding-1 convolution by definition.
Tensor<double> direct_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), O = w.dim(0);
  Tensor<double> y({N, O, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t ww = 0; ww < W; ++ww) {
          double acc = b[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const std::size_t iy = h + ky, ix = ww + kx;  // shifted by the padding
                if (iy < 1 || iy > H || ix < 1 || ix > W) continue;
                acc += w.at(o, c, ky, kx) * x.at(n, c, iy - 1, ix - 1);
              }
          y.at(n, o, h, ww) = acc;
        }
  return y;
}

TEST(Conv2d, MatchesDirectLoop) {
  const auto x = random_tensor<double>({2, 3, 6, 5}, 2);
  const auto w = random_tensor<double>({4, 3, 3, 3}, 3);
  const auto b = random_tensor<double>({4}, 4);
  EXPECT_LE(max_abs_diff(kernels::conv2d(x, w, b, 1), direct_conv(x, w, b)), 1e-12);
}

TEST(Conv2d, LargeInputsSplitIntoBandsConsistently) {
  // 64 input channels on 40x40 exceeds one im2col chunk, so rows are banded.
  const auto x = random_tensor<double>({2, 64, 40, 40}, 5);
  const auto w = random_tensor<double>({3, 64, 3, 3}, 6);
  const auto b = random_tensor<double>({3}, 7);
  EXPECT_LE(max_abs_diff(kernels::conv2d(x, w, b, 1), direct_conv(x, w, b)), 1e-10);

  // Gradients of sum(y * g) by the adjoint definitions.
  const auto g = random_tensor<double>({2, 3, 40, 40}, 8);
  VarD xv(x, true), wv(w, true), bv(b, true);
  backward(sum(mul(conv2d(xv, wv, bv, 1), VarD(g))));
  Tensor<double> dx(x.shape()), dw(w.shape());
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 3; ++o)
      for (std::size_t h = 0; h < 40; ++h)
        for (std::size_t ww = 0; ww < 40; ++ww)
          for (std::size_t c = 0; c < 64; ++c)
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const std::size_t iy = h + ky, ix = ww + kx;
                if (iy < 1 || iy > 40 || ix < 1 || ix > 40) continue;
                dx.at(n, c, iy - 1, ix - 1) += w.at(o, c, ky, kx) * g.at(n, o, h, ww);
                dw.at(o, c, ky, kx) += x.at(n, c, iy - 1, ix - 1) * g.at(n, o, h, ww);
              }
  EXPECT_LE(max_abs_diff(xv.grad(), dx), 1e-10);
  EXPECT_LE(max_abs_diff(wv.grad(), dw), 1e-9);
  for (std::size_t o = 0; o < 3; ++o) {
    double db = 0.0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 1600; ++i) db += g[(n * 3 + o) * 1600 + i];
    EXPECT_NEAR(bv.grad()[o], db, 1e-10);
  }
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  const auto x = random_tensor<double>({2, 3, 5, 5}, 10);
  const auto w = random_tensor<double>({4, 3, 3, 3}, 11);
  const auto b = random_tensor<double>({4}, 12);
  EXPECT_LE(grad_check([&](const VarD& v) { return probe_sum(conv2d(v, VarD(w), VarD(b), 1)); }, x), 1e-6);
  EXPECT_LE(grad_check([&](const VarD& v) { return probe_sum(conv2d(VarD(x), v, VarD(b), 1)); }, w), 1e-6);
  EXPECT_LE(grad_check([&](const VarD& v) { return probe_sum(conv2d(VarD(x), VarD(w), v, 1)); }, b), 1e-6);
}

TEST(Conv2d, ShapeMismatchNamesDimension) {
  Var<float> x(Tensor<float>({1, 3, 4, 4}));
  Var<float> w(Tensor<float>({2, 2, 3, 3}));
  Var<float> b(Tensor<float>({2}));
  try {
    conv2d(x, w, b, 1);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("input channels"), std::string::npos) << e.what();
  }
  EXPECT_THROW(conv2d(x, Var<float>(Tensor<float>({2, 3, 2, 2})), b, 1), ShapeError);
  EXPECT_THROW(conv2d(x, Var<float>(Tensor<float>({2, 3, 3, 3})), Var<float>(Tensor<float>({3})), 1), ShapeError);
}

TEST(Elementwise, MulByExpOfZeroIsIdentity) {
  const auto x = random_tensor<float>({2, 3, 4, 4}, 5);
  Var<float> zeros(Tensor<float>(x.shape(), 0.0f));
  EXPECT_EQ(mul(Var<float>(x), exp(zeros)).value(), x);
}

TEST(Elementwise, LeakyReluSlope) {
  Var<double> x(Tensor<double>({3}, std::vector<double>{-1.0, 0.0, 2.0}));
  const auto y = leaky_relu(x, 0.2).value();
  EXPECT_DOUBLE_EQ(y[0], -0.2);
  EXPECT_DOUBLE_EQ(y[1], 0.0);
  EXPECT_DOUBLE_EQ(y[2], 2.0);
  EXPECT_DOUBLE_EQ(elementwise(Elementwise::kLeakyRelu, x, nullptr, 0.2).value()[0], -0.2);
}

TEST(Elementwise, ExpGradientMatchesFiniteDifferences) {
  const auto x = random_tensor<double>({10}, 21);
  EXPECT_LE(grad_check([](const VarD& v) { return sum(exp(v)); }, x, 1e-5), 1e-8);
}

TEST(Elementwise, ExpOverflowIsAnError) {
  Var<float> x(Tensor<float>({2}, std::vector<float>{1.0f, 90.0f}));
  EXPECT_THROW(exp(x), NumericError);
}

TEST(Elementwise, NonFiniteResultsAreSurfaced) {
  Var<float> big(Tensor<float>({1}, 3e38f));
  EXPECT_THROW(add(big, big), NumericError);
  Var<double> nan(Tensor<double>({1}, std::nan("")));
  EXPECT_THROW(scale(nan, 2.0), NumericError);
}

TEST(Elementwise, BinaryOpsRequireEqualShapes) {
  Var<float> a(Tensor<float>({2, 3}));
  Var<float> b(Tensor<float>({2, 4}));
  try {
    add(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("dimension 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(mul(a, b), ShapeError);
  EXPECT_THROW(sub(a, b), ShapeError);
  EXPECT_THROW(elementwise(Elementwise::kAdd, a), std::invalid_argument);
}

// Every differentiable op at ten random points.
TEST(Elementwise, EveryOpPassesGradCheck) {
  const double slope = 0.2;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto x = random_tensor<double>({1, 2, 3, 3}, 100 + seed);
    const VarD other(random_tensor<double>(x.shape(), 200 + seed));
    EXPECT_LE(grad_check([&](const VarD& v) { return probe_sum(add(v, other)); }, x), 1e-5);
    EXPECT_LE(grad_check([&](const VarD& v) { return probe_sum(sub(other, v)); }, x), 1e-5);
    EXPECT_LE(grad_check([&](const VarD& v) { return probe_sum(mul(v, other)); }, x), 1e-5);
    EXPECT_LE(grad_check([&](const VarD& v) { return probe_sum(mul(v, v)); }, x), 1e-5);
    EXPECT_LE(grad_check([&](const VarD& v) { return probe_sum(scale(v, -1.7)); }, x), 1e-5);
    EXPECT_LE(grad_check([&](const VarD& v) { return probe_sum(exp(v)); }, x), 1e-5);
    EXPECT_LE(grad_check([&](const VarD& v) { return probe_sum(tanh(v)); }, x), 1e-5);
    EXPECT_LE(grad_check([&](const VarD& v) { return probe_sum(leaky_relu(v, slope)); }, x), 1e-5);
    EXPECT_LE(grad_check([&](const VarD& v) { return probe_sum(channel_split(v).second); }, x), 1e-5);
    EXPECT_LE(grad_check([&](const VarD& v) { return probe_sum(pixel_unshuffle(v, 3)); }, x), 1e-5);
    EXPECT_LE(grad_check([&](const VarD& v) { return probe_sum(pixel_shuffle(v, 1)); }, x), 1e-5);
  }
}

TEST(Layout, SplitTwoChannels) {
  Var<float> x(Tensor<float>({1, 2, 1, 1}, std::vector<float>{3.0f, 7.0f}));
  auto [a, b] = channel_split(x);
  EXPECT_EQ(a.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(a.value()[0], 3.0f);
  EXPECT_EQ(b.value()[0], 7.0f);
}

TEST(Layout, ConcatInvertsSplitExactly) {
  const auto x = random_tensor<float>({3, 6, 4, 5}, 7);
  auto [a, b] = channel_split(Var<float>(x));
  EXPECT_EQ(channel_concat(a, b).value(), x);
}

TEST(Layout, OddChannelSplitFails) {
  EXPECT_THROW(channel_split(Var<float>(Tensor<float>({1, 3, 2, 2}))), ShapeError);
}

TEST(Layout, ConcatGradientRoutesToHalves) {
  const auto x = random_tensor<double>({2, 2, 3, 3}, 8);
  const VarD fixed(random_tensor<double>({2, 3, 3, 3}, 9));
  EXPECT_LE(grad_check([&](const VarD& v) { return probe_sum(channel_concat(v, fixed)); }, x), 1e-6);
  EXPECT_LE(grad_check([&](const VarD& v) { return probe_sum(channel_concat(fixed, v)); }, x), 1e-6);
  EXPECT_LE(grad_check([&](const VarD& v) { return probe_sum(channel_concat<double>({v, fixed, v})); }, x), 1e-6);
}

TEST(Layout, PixelUnshuffleGoldenLayout) {
  Var<float> x(Tensor<float>({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4}));
  const auto y = pixel_unshuffle(x, 2).value();
  ASSERT_EQ(y.shape(), (Shape{1, 4, 1, 1}));
  EXPECT_EQ(y[0], 1.0f);
  EXPECT_EQ(y[1], 2.0f);
  EXPECT_EQ(y[2], 3.0f);
  EXPECT_EQ(y[3], 4.0f);
}

TEST(Layout, PixelUnshuffleChannelMajor) {
  // Two input channels: channel c occupies output channels [4c, 4c+4).
  Tensor<float> t({1, 2, 2, 2}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8});
  const auto y = kernels::pixel_unshuffle(t, 2);
  EXPECT_EQ(y.data()[4], 5.0f);
  EXPECT_EQ(y.data()[7], 8.0f);
}

TEST(Layout, PixelShuffleRoundTripAndSum) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto x = random_tensor<float>({2, 3, 8, 12}, seed);
    for (std::size_t r : {1u, 2u, 4u}) {
      const auto down = kernels::pixel_unshuffle(x, r);
      EXPECT_EQ(down.shape(), (Shape{2, 3 * r * r, 8 / r, 12 / r}));
      EXPECT_EQ(kernels::pixel_shuffle(down, r), x);
      auto sorted_in = std::vector<float>(x.data().begin(), x.data().end());
      auto sorted_out = std::vector<float>(down.data().begin(), down.data().end());
      std::sort(sorted_in.begin(), sorted_in.end());
      std::sort(sorted_out.begin(), sorted_out.end());
      EXPECT_EQ(sorted_in, sorted_out);  // a permutation preserves the multiset, hence the sum
    }
  }
}

TEST(Layout, PixelUnshuffleIndivisibleFails) {
  try {
    pixel_unshuffle(Var<float>(Tensor<float>({1, 1, 5, 4})), 2);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("pad"), std::string::npos);
  }
}

TEST(Backward, SumGivesOnes) {
  auto x = VarD::parameter(random_tensor<double>({2, 3}, 1));
  backward(sum(x));
  const auto g = x.grad();
  for (double v : g.data()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, SumOfSquaresGivesTwiceInput) {
  const auto xv = random_tensor<double>({4, 5}, 2);
  auto x = VarD::parameter(xv);
  backward(sum(mul(x, x)));
  const auto g = x.grad();
  for (std::size_t i = 0; i < xv.numel(); ++i) EXPECT_DOUBLE_EQ(g[i], 2.0 * xv[i]);
}

TEST(Backward, NonScalarLossFails) {
  auto x = VarD::parameter(Tensor<double>({3}));
  EXPECT_THROW(backward(scale(x, 2.0)), ShapeError);
}

TEST(Backward, SharedSubgraphVisitedOnce) {
  // y = exp(x) used twice; each op's backward runs exactly once so the
  // gradient is exactly 2 exp(x).
  auto x = VarD::parameter(Tensor<double>({1}, 0.3));
  auto y = exp(x);
  backward(add(y, y));
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0 * std::exp(0.3));
}

TEST(Backward, GraphIsClearedAfterwards) {
  auto x = VarD::parameter(Tensor<double>({1}, 1.5));
  auto y = mul(x, x);
  auto loss = sum(y);
  backward(loss);
  EXPECT_TRUE(loss.node()->inputs.empty());
  EXPECT_FALSE(y.requires_grad());
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
}

TEST(Backward, ConstantsRecordNothing) {
  Var<float> a(Tensor<float>({2}, 1.0f));
  auto y = exp(a);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->inputs.empty());
}

TEST(GradCheck, SumIsExact) {
  // Linear, so a large step has no truncation error and little cancellation.
  EXPECT_LE(grad_check([](const VarD& v) { return sum(v); }, random_tensor<double>({3, 4}, 3), 0.5), 1e-12);
}

TEST(GradCheck, ConvTanhChain) {
  const VarD w(random_tensor<double>({2, 2, 3, 3}, 31, 0.5));
  const VarD b(random_tensor<double>({2}, 32));
  const auto x = random_tensor<double>({1, 2, 4, 4}, 33);
  EXPECT_LE(grad_check([&](const VarD& v) { return probe_sum(tanh(conv2d(v, w, b, 1))); }, x, 1e-5), 1e-6);
}

// tanh with the derivative rule 1 - y instead of 1 - y^2.
VarD broken_tanh(const VarD& a) {
  Tensor<double> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(a.value()[i]);
  return make_result<double>(std::move(out), "broken_tanh", {a}, [](detail::Node<double>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * (1.0 - self.value[i]);
  });
}

TEST(GradCheck, DetectsCorruptedRule) {
  const auto x = random_tensor<double>({1, 1, 3, 3}, 41);
  EXPECT_GE(grad_check([](const VarD& v) { return probe_sum(broken_tanh(v)); }, x), 1e-2);
}

TEST(Determinism, IdenticalInputsIdenticalOutputs) {
  const auto x = random_tensor<float>({2, 8, 6, 6}, 51);
  const auto w = random_tensor<float>({16, 8, 3, 3}, 52);
  const auto b = random_tensor<float>({16}, 53);
  auto run = [&] {
    auto xv = Var<float>::parameter(x);
    auto wv = Var<float>::parameter(w);
    auto y = tanh(conv2d(xv, wv, Var<float>(b), 1));
    backward(sum(mul(y, y)));
    return std::make_pair(y.value(), wv.grad());
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace ctflow
