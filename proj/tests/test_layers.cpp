#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "mpdrop/layers.hpp"
#include "oracles.hpp"

namespace mpd {
namespace {

double weighted_sum(const Tensor4<double>& t, const Tensor4<double>& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * w[i];
  return s;
}

// ---------------------------------------------------------------------------
// Convolution

TEST(ConvTest, IdentityKernel) {
  ConvLayer<double> layer(1, 1, 1, 1);
  layer.weights[0] = 1.0;
  RngStream rng(1);
  const auto input = rng_gaussian<double>(rng, {2, 1, 5, 5}, 0.0, 1.0);
  EXPECT_EQ(conv_forward(layer, input), input);
}

TEST(ConvTest, OutputShape) {
  ConvLayer<double> layer(20, 1, 5, 5);
  EXPECT_EQ(conv_forward(layer, Tensor4<double>({3, 1, 28, 28})).shape(), (Shape4{3, 20, 24, 24}));
  EXPECT_THROW((void)conv_forward(layer, Tensor4<double>({1, 2, 28, 28})), GeometryError);
  EXPECT_THROW((void)conv_forward(layer, Tensor4<double>({1, 1, 4, 28})), GeometryError);
  EXPECT_THROW(ConvLayer<double>(0, 1, 3, 3), ParameterError);
}

TEST(ConvTest, ZeroInputGivesBias) {
  ConvLayer<double> layer(3, 2, 3, 3);
  RngStream rng(2);
  init_params(layer, rng);
  layer.bias = Tensor4<double>({1, 3, 1, 1}, {0.5, -1.0, 2.0});
  const auto out = conv_forward(layer, Tensor4<double>({2, 2, 6, 6}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t w = 0; w < 4; ++w) EXPECT_EQ(out(b, c, h, w), layer.bias[c]);
}

TEST(ConvTest, MatchesDirectLoop) {
  ConvLayer<double> layer(4, 3, 3, 2);
  RngStream rng(3);
  init_params(layer, rng, 1.0);
  layer.bias = rng_gaussian<double>(rng, layer.bias.shape(), 0.0, 1.0);
  const auto input = rng_gaussian<double>(rng, {3, 3, 7, 6}, 0.0, 1.0);
  const auto out = conv_forward(layer, input);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t o = 0; o < 4; ++o)
      for (std::size_t y = 0; y < 5; ++y)
        for (std::size_t x = 0; x < 5; ++x) {
          double s = layer.bias[o];
          for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < 3; ++i)
              for (std::size_t j = 0; j < 2; ++j) s += layer.weights(o, c, i, j) * input(b, c, y + i, x + j);
          EXPECT_NEAR(out(b, o, y, x), s, 1e-12);
        }
}

TEST(ConvTest, FiniteDifferenceGradients) {
  ConvLayer<double> layer(3, 2, 3, 3);
  RngStream rng(4);
  init_params(layer, rng, 0.5);
  layer.bias = rng_gaussian<double>(rng, layer.bias.shape(), 0.0, 0.5);
  auto input = rng_gaussian<double>(rng, {1, 2, 8, 8}, 0.0, 1.0);
  const auto w_out = rng_gaussian<double>(rng, {1, 3, 6, 6}, 0.0, 1.0);
  auto loss = [&] { return weighted_sum(conv_forward(layer, input), w_out); };
  const auto g = conv_backward(layer, input, w_out);
  EXPECT_LT(oracle::max_relative_error(g.input.data(), oracle::numeric_gradient(input.data(), loss)), 1e-6);
  EXPECT_LT(oracle::max_relative_error(g.weights.data(), oracle::numeric_gradient(layer.weights.data(), loss)), 1e-6);
  EXPECT_LT(oracle::max_relative_error(g.bias.data(), oracle::numeric_gradient(layer.bias.data(), loss)), 1e-6);
}

TEST(ConvTest, BiasGradientIsChannelSum) {
  ConvLayer<double> layer(3, 2, 3, 3);
  RngStream rng(5);
  const auto input = rng_gaussian<double>(rng, {4, 2, 7, 7}, 0.0, 1.0);
  const auto grad_out = rng_gaussian<double>(rng, {4, 3, 5, 5}, 0.0, 1.0);
  const auto g = conv_backward(layer, input, grad_out);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t h = 0; h < 5; ++h)
        for (std::size_t w = 0; w < 5; ++w) s += grad_out(b, c, h, w);
    EXPECT_NEAR(g.bias[c], s, 1e-12);
  }
}

TEST(ConvTest, ZeroGradOutGivesZeroGradients) {
  ConvLayer<double> layer(3, 2, 3, 3);
  RngStream rng(6);
  init_params(layer, rng);
  const auto input = rng_gaussian<double>(rng, {2, 2, 6, 6}, 0.0, 1.0);
  const auto g = conv_backward(layer, input, Tensor4<double>({2, 3, 4, 4}));
  for (const auto* t : {&g.input, &g.weights, &g.bias}) {
    EXPECT_TRUE(std::all_of(t->data().begin(), t->data().end(), [](double v) { return v == 0.0; }));
  }
  EXPECT_TRUE(conv_backward(layer, input, Tensor4<double>({2, 3, 4, 4}), false).input.empty());
}

// ---------------------------------------------------------------------------
// Dense and ReLU

TEST(DenseTest, FiniteDifferenceGradients) {
  DenseLayer<double> layer(5, 12);
  RngStream rng(7);
  init_params(layer, rng, 0.5);
  layer.bias = rng_gaussian<double>(rng, layer.bias.shape(), 0.0, 0.5);
  auto input = rng_gaussian<double>(rng, {3, 3, 2, 2}, 0.0, 1.0);
  const auto w_out = rng_gaussian<double>(rng, {3, 5, 1, 1}, 0.0, 1.0);
  auto loss = [&] { return weighted_sum(dense_forward(layer, input), w_out); };
  const auto g = dense_backward(layer, input, w_out);
  EXPECT_EQ(g.input.shape(), input.shape());
  EXPECT_LT(oracle::max_relative_error(g.input.data(), oracle::numeric_gradient(input.data(), loss)), 1e-6);
  EXPECT_LT(oracle::max_relative_error(g.weights.data(), oracle::numeric_gradient(layer.weights.data(), loss)), 1e-6);
  EXPECT_LT(oracle::max_relative_error(g.bias.data(), oracle::numeric_gradient(layer.bias.data(), loss)), 1e-6);
}

TEST(DenseTest, ShapeMismatch) {
  DenseLayer<double> layer(5, 12);
  EXPECT_THROW((void)dense_forward(layer, Tensor4<double>({1, 11, 1, 1})), GeometryError);
  EXPECT_EQ(dense_forward(layer, Tensor4<double>({2, 12, 1, 1})).shape(), (Shape4{2, 5, 1, 1}));
}

TEST(ReluTest, ForwardAndBackward) {
  const Tensor4<double> x({1, 3, 1, 1}, {-1, 0, 2});
  const auto y = relu_forward(x);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{0, 0, 2}));
  const auto g = relu_backward(x, Tensor4<double>({1, 3, 1, 1}, {5, 5, 5}));
  EXPECT_EQ(std::vector<double>(g.data().begin(), g.data().end()), (std::vector<double>{0, 0, 5}));
}

TEST(ReluTest, FiniteDifferenceAwayFromKink) {
  RngStream rng(8);
  auto x = rng_gaussian<double>(rng, {2, 3, 4, 4}, 0.0, 1.0);
  for (auto& v : x.data()) v += v > 0 ? 0.01 : -0.01;
  const auto w = rng_gaussian<double>(rng, x.shape(), 0.0, 1.0);
  auto loss = [&] { return weighted_sum(relu_forward(x), w); };
  EXPECT_LT(oracle::max_relative_error(relu_backward(x, w).data(), oracle::numeric_gradient(x.data(), loss)), 1e-6);
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy

TEST(SoftmaxXentTest, UniformLogits) {
  const std::vector<std::size_t> labels{3};
  const auto lg = softmax_xent(Tensor4<double>({1, 10, 1, 1}, std::vector<double>(10, 0.7)), labels);
  EXPECT_NEAR(lg.loss, std::log(10.0), 1e-12);
  EXPECT_NEAR(lg.loss, 2.302585, 1e-6);
}

TEST(SoftmaxXentTest, LargeLogitNoOverflow) {
  std::vector<double> z(10, 0.0);
  z[2] = 1000.0;
  const std::vector<std::size_t> right{2}, wrong{0};
  const auto good = softmax_xent(Tensor4<double>({1, 10, 1, 1}, z), right);
  EXPECT_NEAR(good.loss, 0.0, 1e-12);
  EXPECT_TRUE(good.grad.all_finite());
  const auto bad = softmax_xent(Tensor4<double>({1, 10, 1, 1}, z), wrong);
  EXPECT_NEAR(bad.loss, 1000.0, 1e-9);
}

TEST(SoftmaxXentTest, FiniteDifference) {
  RngStream rng(9);
  auto logits = rng_gaussian<double>(rng, {4, 10, 1, 1}, 0.0, 2.0);
  const std::vector<std::size_t> labels{0, 9, 4, 4};
  auto loss = [&] { return softmax_xent(logits, labels).loss; };
  const auto g = softmax_xent(logits, labels).grad;
  EXPECT_LT(oracle::max_relative_error(g.data(), oracle::numeric_gradient(logits.data(), loss)), 1e-6);
}

TEST(SoftmaxXentTest, LabelOutOfRange) {
  const std::vector<std::size_t> labels{10};
  EXPECT_THROW((void)softmax_xent(Tensor4<double>({1, 10, 1, 1}), labels), ParameterError);
}

// ---------------------------------------------------------------------------
// Fully-connected dropout

TEST(FcDropoutTest, RetainAllIsIdentity) {
  RngStream rng(10);
  const auto x = rng_gaussian<double>(rng, {3, 7, 1, 1}, 0.0, 1.0);
  EXPECT_EQ(fc_dropout_train(x, RetainProb(1.0), rng).output, x);
  EXPECT_EQ(fc_dropout_test(x, RetainProb(1.0)), x);
}

TEST(FcDropoutTest, TestModeHalves) {
  EXPECT_EQ(fc_dropout_test(Tensor4<double>({1, 1, 1, 1}, {2.0}), RetainProb(0.5))[0], 1.0);
}

TEST(FcDropoutTest, TrainExpectationMatchesTestOutput) {
  RngStream rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const double p = 0.2 + 0.15 * trial;
    const auto x = rng_gaussian<double>(rng, {1, 4, 1, 1}, 2.0, 1.0);
    const auto expected = fc_dropout_test(x, RetainProb(p));
    // 250k draws of each of 4 units: 10^6 in total.
    Tensor4<double> batch({250000, 4, 1, 1});
    for (std::size_t b = 0; b < 250000; ++b)
      for (std::size_t k = 0; k < 4; ++k) batch(b, k, 0, 0) = x[k];
    const auto dropped = fc_dropout_train(batch, RetainProb(p), rng);
    for (std::size_t k = 0; k < 4; ++k) {
      double s = 0.0;
      for (std::size_t b = 0; b < 250000; ++b) s += dropped.output(b, k, 0, 0);
      EXPECT_NEAR(s / 250000.0, expected[k], 0.01 * std::abs(expected[k]));
    }
  }
}

TEST(FcDropoutTest, BackwardUsesMask) {
  const Tensor4<double> mask({1, 3, 1, 1}, {1, 0, 1});
  const auto g = fc_dropout_backward(mask, Tensor4<double>({1, 3, 1, 1}, {2, 3, 4}));
  EXPECT_EQ(std::vector<double>(g.data().begin(), g.data().end()), (std::vector<double>{2, 0, 4}));
}

// ---------------------------------------------------------------------------
// Optimiser and init

TEST(MomentumSgdTest, PlainStep) {
  Tensor4<double> w({1, 1, 1, 1}, {1.0});
  const Tensor4<double> g({1, 1, 1, 1}, {1.0});
  MomentumSGD<double> opt(0.1, 0.0);
  const std::vector<ParamGrad<double>> pg{{&w, &g}};
  opt.step(pg);
  EXPECT_NEAR(w[0], 0.9, 1e-15);
}

TEST(MomentumSgdTest, SecondStepAccumulates) {
  Tensor4<double> w({1, 1, 1, 1}, {0.0});
  const Tensor4<double> g({1, 1, 1, 1}, {1.0});
  MomentumSGD<double> opt(0.1, 0.95);
  const std::vector<ParamGrad<double>> pg{{&w, &g}};
  opt.step(pg);
  const double after_one = w[0];
  opt.step(pg);
  EXPECT_NEAR(after_one, -0.1, 1e-15);
  EXPECT_NEAR(w[0] - after_one, -0.195, 1e-15);
}

TEST(MomentumSgdTest, VelocityDecaysGeometrically) {
  Tensor4<double> w({1, 1, 1, 1}, {0.0});
  const Tensor4<double> g({1, 1, 1, 1}, {1.0});
  const Tensor4<double> zero({1, 1, 1, 1}, {0.0});
  MomentumSGD<double> opt(0.1, 0.95);
  opt.step(std::vector<ParamGrad<double>>{{&w, &g}});
  double v = opt.velocity()[0][0];
  for (int i = 0; i < 500; ++i) {
    opt.step(std::vector<ParamGrad<double>>{{&w, &zero}});
    EXPECT_NEAR(opt.velocity()[0][0], v * 0.95, 1e-18);
    v = opt.velocity()[0][0];
  }
  // Fixed point: -0.1 / (1 - 0.95) = -2.
  EXPECT_NEAR(w[0], -2.0, 1e-9);
}

TEST(MomentumSgdTest, RejectsBadHyperparameters) {
  EXPECT_THROW(MomentumSGD<double>(0.0, 0.5), ParameterError);
  EXPECT_THROW(MomentumSGD<double>(0.1, 1.0), ParameterError);
  EXPECT_THROW(MomentumSGD<double>(0.1, -0.1), ParameterError);
}

TEST(InitTest, GaussianWeightsZeroBias) {
  DenseLayer<double> layer(400, 500);
  RngStream rng(12);
  layer.bias.fill(3.0);
  init_params(layer, rng);
  EXPECT_TRUE(std::all_of(layer.bias.data().begin(), layer.bias.data().end(), [](double v) { return v == 0.0; }));
  const auto w = layer.weights.data();
  const double mean = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
  double var = 0.0;
  for (double v : w) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(w.size() - 1));
  EXPECT_GE(sd, 0.095);
  EXPECT_LE(sd, 0.105);

  DenseLayer<double> again(400, 500);
  RngStream rng2(12);
  init_params(again, rng2);
  EXPECT_EQ(again.weights, layer.weights);
}

}  // namespace
}  // namespace mpd
