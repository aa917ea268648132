#pragma once

// Trainable layers, activations, loss and optimizer for the CNN stack.
// Convolution and dense layers lower onto Eigen GEMMs; everything else is
// plain loops over Tensor4 storage.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mpdrop/random.hpp"
#include "mpdrop/tensor.hpp"

namespace mpd {

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

}  // namespace detail

// Valid, stride-1 convolution (cross-correlation). Weights are
// (out_channels, in_channels, filter_h, filter_w); bias is (1, out_channels, 1, 1).
template <std::floating_point T = double>
struct ConvLayer {
  Tensor4<T> weights;
  Tensor4<T> bias;

  ConvLayer() = default;
  ConvLayer(std::size_t out_channels, std::size_t in_channels, std::size_t filter_h,
            std::size_t filter_w)
      : weights({out_channels, in_channels, filter_h, filter_w}), bias({1, out_channels, 1, 1}) {
    if (out_channels < 1 || in_channels < 1 || filter_h < 1 || filter_w < 1) {
      throw ParameterError("conv layer dimensions must be >= 1");
    }
  }

  [[nodiscard]] std::size_t out_channels() const { return weights.shape().n; }
  [[nodiscard]] std::size_t in_channels() const { return weights.shape().c; }
  [[nodiscard]] std::size_t filter_h() const { return weights.shape().h; }
  [[nodiscard]] std::size_t filter_w() const { return weights.shape().w; }

  [[nodiscard]] Shape4 output_shape(const Shape4& in) const {
    if (in.c != in_channels()) {
      throw GeometryError("conv expects " + std::to_string(in_channels()) +
                          " input channels, got " + in.str());
    }
    if (in.h < filter_h() || in.w < filter_w()) {
      throw GeometryError("conv filter " + std::to_string(filter_h()) + "x" +
                          std::to_string(filter_w()) + " exceeds input " + in.str());
    }
    return {in.n, out_channels(), in.h - filter_h() + 1, in.w - filter_w() + 1};
  }
};

// Affine map over the flattened item. Weights are (out_units, in_units, 1, 1);
// bias is (1, out_units, 1, 1).
template <std::floating_point T = double>
struct DenseLayer {
  Tensor4<T> weights;
  Tensor4<T> bias;

  DenseLayer() = default;
  DenseLayer(std::size_t out_units, std::size_t in_units)
      : weights({out_units, in_units, 1, 1}), bias({1, out_units, 1, 1}) {
    if (out_units < 1 || in_units < 1) throw ParameterError("dense layer dimensions must be >= 1");
  }

  [[nodiscard]] std::size_t out_units() const { return weights.shape().n; }
  [[nodiscard]] std::size_t in_units() const { return weights.shape().c; }
};

template <std::floating_point T = double>
struct ConvGrads {
  Tensor4<T> input;  // empty when not requested
  Tensor4<T> weights;
  Tensor4<T> bias;
};

template <std::floating_point T = double>
struct DenseGrads {
  Tensor4<T> input;
  Tensor4<T> weights;
  Tensor4<T> bias;
};

namespace detail {

// Unfolds one item into a (C*fh*fw) x (out_h*out_w) row-major matrix.
template <std::floating_point T>
void im2col(std::span<const T> item, const Shape4& in, std::size_t fh, std::size_t fw,
            std::size_t oh, std::size_t ow, std::span<T> col) {
  std::size_t row = 0;
  for (std::size_t c = 0; c < in.c; ++c) {
    for (std::size_t kh = 0; kh < fh; ++kh) {
      for (std::size_t kw = 0; kw < fw; ++kw, ++row) {
        T* dst = col.data() + row * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          const T* src = item.data() + (c * in.h + y + kh) * in.w + kw;
          std::copy(src, src + ow, dst + y * ow);
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into an item.
template <std::floating_point T>
void col2im(std::span<const T> col, const Shape4& in, std::size_t fh, std::size_t fw,
            std::size_t oh, std::size_t ow, std::span<T> item) {
  std::size_t row = 0;
  for (std::size_t c = 0; c < in.c; ++c) {
    for (std::size_t kh = 0; kh < fh; ++kh) {
      for (std::size_t kw = 0; kw < fw; ++kw, ++row) {
        const T* src = col.data() + row * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          T* dst = item.data() + (c * in.h + y + kh) * in.w + kw;
          for (std::size_t x = 0; x < ow; ++x) dst[x] += src[y * ow + x];
        }
      }
    }
  }
}

}  // namespace detail

namespace detail {

// Items per GEMM so the unfolded block stays cache-sized (~64K elements).
inline std::size_t conv_chunk(std::size_t n, std::size_t col_elems_per_item) {
  constexpr std::size_t kBudget = std::size_t{1} << 16;
  return std::clamp<std::size_t>(kBudget / std::max<std::size_t>(col_elems_per_item, 1), 1,
                                 std::max<std::size_t>(n, 1));
}

}  // namespace detail

// Items are unfolded side by side into one K x (items * positions) matrix so
// a single GEMM covers a chunk of the batch.
template <std::floating_point T>
[[nodiscard]] Tensor4<T> conv_forward(const ConvLayer<T>& layer, const Tensor4<T>& input) {
  const Shape4& in = input.shape();
  const Shape4 out_shape = layer.output_shape(in);
  const std::size_t k = in.c * layer.filter_h() * layer.filter_w();
  const std::size_t positions = out_shape.hw();
  const std::size_t chunk = detail::conv_chunk(in.n, k * positions);
  Tensor4<T> out(out_shape);
  AlignedVector<T> col(k * positions * chunk);
  AlignedVector<T> block(out_shape.c * positions * chunk);
  AlignedVector<T> item_col(k * positions);
  const detail::ConstMatrixMap<T> w(layer.weights.data().data(), layer.out_channels(), k);
  const auto bias = layer.bias.data();
  for (std::size_t first = 0; first < in.n; first += chunk) {
    const std::size_t items = std::min(chunk, in.n - first);
    const std::size_t cols = items * positions;
    detail::MatrixMap<T> x(col.data(), k, cols);
    for (std::size_t i = 0; i < items; ++i) {
      detail::im2col(input.item(first + i), in, layer.filter_h(), layer.filter_w(), out_shape.h,
                     out_shape.w, std::span<T>(item_col));
      x.middleCols(i * positions, positions) = detail::ConstMatrixMap<T>(item_col.data(), k, positions);
    }
    detail::MatrixMap<T> y(block.data(), out_shape.c, cols);
    y.noalias() = w * x;
    for (std::size_t i = 0; i < items; ++i) {
      detail::MatrixMap<T> dst(out.item(first + i).data(), out_shape.c, positions);
      dst = y.middleCols(i * positions, positions);
      for (std::size_t o = 0; o < out_shape.c; ++o) dst.row(o).array() += bias[o];
    }
  }
  return out;
}

// Gradients of conv_forward. Pass want_input = false for the first layer,
// whose input gradient is never used.
template <std::floating_point T>
[[nodiscard]] ConvGrads<T> conv_backward(const ConvLayer<T>& layer, const Tensor4<T>& input,
                                         const Tensor4<T>& grad_out, bool want_input = true) {
  const Shape4& in = input.shape();
  const Shape4 out_shape = layer.output_shape(in);
  require_same_shape(grad_out.shape(), out_shape, "conv_backward");
  const std::size_t k = in.c * layer.filter_h() * layer.filter_w();
  const std::size_t positions = out_shape.hw();
  const std::size_t chunk = detail::conv_chunk(in.n, k * positions);

  ConvGrads<T> grads{want_input ? Tensor4<T>(in) : Tensor4<T>(),
                     Tensor4<T>(layer.weights.shape()), Tensor4<T>(layer.bias.shape())};
  AlignedVector<T> col(k * positions * chunk);
  AlignedVector<T> g_block(out_shape.c * positions * chunk);
  AlignedVector<T> item_col(k * positions);
  const detail::ConstMatrixMap<T> w(layer.weights.data().data(), layer.out_channels(), k);
  detail::MatrixMap<T> gw(grads.weights.data().data(), layer.out_channels(), k);
  auto gb = grads.bias.data();
  for (std::size_t first = 0; first < in.n; first += chunk) {
    const std::size_t items = std::min(chunk, in.n - first);
    const std::size_t cols = items * positions;
    detail::MatrixMap<T> x(col.data(), k, cols);
    detail::MatrixMap<T> g(g_block.data(), out_shape.c, cols);
    for (std::size_t i = 0; i < items; ++i) {
      detail::im2col(input.item(first + i), in, layer.filter_h(), layer.filter_w(), out_shape.h,
                     out_shape.w, std::span<T>(item_col));
      x.middleCols(i * positions, positions) = detail::ConstMatrixMap<T>(item_col.data(), k, positions);
      g.middleCols(i * positions, positions) =
          detail::ConstMatrixMap<T>(grad_out.item(first + i).data(), out_shape.c, positions);
    }
    gw.noalias() += g * x.transpose();
    for (std::size_t o = 0; o < out_shape.c; ++o) gb[o] += g.row(o).sum();
    if (want_input) {
      x.noalias() = w.transpose() * g;
      for (std::size_t i = 0; i < items; ++i) {
        detail::MatrixMap<T>(item_col.data(), k, positions) = x.middleCols(i * positions, positions);
        detail::col2im(std::span<const T>(item_col), in, layer.filter_h(), layer.filter_w(),
                       out_shape.h, out_shape.w, grads.input.item(first + i));
      }
    }
  }
  return grads;
}

// Output shape (N, out_units, 1, 1).
template <std::floating_point T>
[[nodiscard]] Tensor4<T> dense_forward(const DenseLayer<T>& layer, const Tensor4<T>& input) {
  const Shape4& in = input.shape();
  if (in.chw() != layer.in_units()) {
    throw GeometryError("dense layer expects " + std::to_string(layer.in_units()) +
                        " inputs per item, got " + in.str());
  }
  Tensor4<T> out({in.n, layer.out_units(), 1, 1});
  const detail::ConstMatrixMap<T> x(input.data().data(), in.n, layer.in_units());
  const detail::ConstMatrixMap<T> w(layer.weights.data().data(), layer.out_units(),
                                    layer.in_units());
  detail::MatrixMap<T> y(out.data().data(), in.n, layer.out_units());
  y.noalias() = x * w.transpose();
  const Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bias(layer.bias.data().data(),
                                                                   layer.out_units());
  y.rowwise() += bias;
  return out;
}

template <std::floating_point T>
[[nodiscard]] DenseGrads<T> dense_backward(const DenseLayer<T>& layer, const Tensor4<T>& input,
                                           const Tensor4<T>& grad_out, bool want_input = true) {
  const Shape4& in = input.shape();
  if (in.chw() != layer.in_units()) {
    throw GeometryError("dense_backward: input " + in.str() + " does not match layer");
  }
  require_same_shape(grad_out.shape(), Shape4{in.n, layer.out_units(), 1, 1}, "dense_backward");
  DenseGrads<T> grads{want_input ? Tensor4<T>(in) : Tensor4<T>(),
                      Tensor4<T>(layer.weights.shape()), Tensor4<T>(layer.bias.shape())};
  const detail::ConstMatrixMap<T> x(input.data().data(), in.n, layer.in_units());
  const detail::ConstMatrixMap<T> w(layer.weights.data().data(), layer.out_units(),
                                    layer.in_units());
  const detail::ConstMatrixMap<T> g(grad_out.data().data(), in.n, layer.out_units());
  detail::MatrixMap<T>(grads.weights.data().data(), layer.out_units(), layer.in_units())
      .noalias() = g.transpose() * x;
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(grads.bias.data().data(), layer.out_units()) =
      g.colwise().sum();
  if (want_input) {
    detail::MatrixMap<T>(grads.input.data().data(), in.n, layer.in_units()).noalias() = g * w;
  }
  return grads;
}

template <std::floating_point T>
[[nodiscard]] Tensor4<T> relu_forward(const Tensor4<T>& input) {
  Tensor4<T> out = input;
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  return out;
}

// Subgradient 0 at x == 0.
template <std::floating_point T>
[[nodiscard]] Tensor4<T> relu_backward(const Tensor4<T>& input, const Tensor4<T>& grad_out) {
  require_same_shape(grad_out.shape(), input.shape(), "relu_backward");
  Tensor4<T> grad(input.shape());
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = input[i] > T(0) ? grad_out[i] : T(0);
  return grad;
}

template <std::floating_point T = double>
struct LossAndGrad {
  double loss = 0.0;
  Tensor4<T> grad;
};

// Mean softmax cross-entropy over the batch. Each item is flattened to its
// class scores; the gradient is (softmax - onehot) / N.
template <std::floating_point T>
[[nodiscard]] LossAndGrad<T> softmax_xent(const Tensor4<T>& logits,
                                          std::span<const std::size_t> labels) {
  const std::size_t n = logits.shape().n;
  const std::size_t classes = logits.shape().chw();
  if (labels.size() != n) {
    throw GeometryError("softmax_xent: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(n) + " items");
  }
  LossAndGrad<T> out{0.0, Tensor4<T>(logits.shape())};
  if (n == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t b = 0; b < n; ++b) {
    if (labels[b] >= classes) {
      throw ParameterError("softmax_xent: label " + std::to_string(labels[b]) +
                           " out of range for " + std::to_string(classes) + " classes");
    }
    const auto z = logits.item(b);
    auto g = out.grad.item(b);
    const double zmax = static_cast<double>(*std::max_element(z.begin(), z.end()));
    double denom = 0.0;
    for (std::size_t k = 0; k < classes; ++k) denom += std::exp(static_cast<double>(z[k]) - zmax);
    const double log_denom = std::log(denom);
    out.loss += (log_denom - (static_cast<double>(z[labels[b]]) - zmax)) * inv_n;
    for (std::size_t k = 0; k < classes; ++k) {
      const double prob = std::exp(static_cast<double>(z[k]) - zmax - log_denom);
      g[k] = static_cast<T>((prob - (k == labels[b] ? 1.0 : 0.0)) * inv_n);
    }
  }
  return out;
}

template <std::floating_point T = double>
struct DropoutOutput {
  Tensor4<T> output;
  Tensor4<T> mask;
};

// Train-time fully-connected dropout: elementwise Bernoulli(p) mask, one
// forked substream per batch item.
template <std::floating_point T>
[[nodiscard]] DropoutOutput<T> fc_dropout_train(const Tensor4<T>& input, RetainProb p,
                                                RngStream& rng) {
  DropoutOutput<T> out{input, Tensor4<T>(input.shape())};
  for (std::size_t b = 0; b < input.shape().n; ++b) {
    RngStream item_rng = rng.fork();
    auto x = out.output.item(b);
    auto m = out.mask.item(b);
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = item_rng.bernoulli(p.p()) ? T(1) : T(0);
      x[i] *= m[i];
    }
  }
  return out;
}

// Test-time compensation: activations scaled by p.
template <std::floating_point T>
[[nodiscard]] Tensor4<T> fc_dropout_test(const Tensor4<T>& input, RetainProb p) {
  Tensor4<T> out = input;
  for (auto& v : out.data()) v *= static_cast<T>(p.p());
  return out;
}

template <std::floating_point T>
[[nodiscard]] Tensor4<T> fc_dropout_backward(const Tensor4<T>& mask, const Tensor4<T>& grad_out) {
  require_same_shape(grad_out.shape(), mask.shape(), "fc_dropout_backward");
  Tensor4<T> grad = grad_out;
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= mask[i];
  return grad;
}

// A parameter tensor and the gradient to apply to it.
template <std::floating_point T = double>
struct ParamGrad {
  Tensor4<T>* param;
  const Tensor4<T>* grad;
};

// Heavy-ball momentum: v <- momentum * v - lr * grad; param <- param + v.
// Velocity buffers are created zeroed on the first step and bound to the
// parameter order used then.
template <std::floating_point T = double>
class MomentumSGD {
 public:
  MomentumSGD(double learning_rate, double momentum)
      : learning_rate_(learning_rate), momentum_(momentum) {
    if (!(learning_rate > 0.0)) throw ParameterError("learning rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError("momentum must lie in [0, 1)");
  }

  void step(std::span<const ParamGrad<T>> params) {
    if (velocity_.empty()) {
      for (const auto& pg : params) velocity_.emplace_back(pg.param->shape());
    }
    if (velocity_.size() != params.size()) {
      throw GeometryError("MomentumSGD: parameter count changed between steps");
    }
    const T lr = static_cast<T>(learning_rate_);
    const T mu = static_cast<T>(momentum_);
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor4<T>& param = *params[k].param;
      const Tensor4<T>& grad = *params[k].grad;
      Tensor4<T>& v = velocity_[k];
      require_same_shape(param.shape(), v.shape(), "MomentumSGD velocity");
      require_same_shape(grad.shape(), v.shape(), "MomentumSGD gradient");
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = mu * v[i] - lr * grad[i];
        param[i] += v[i];
      }
    }
  }

  [[nodiscard]] double learning_rate() const { return learning_rate_; }
  [[nodiscard]] double momentum() const { return momentum_; }
  [[nodiscard]] const std::vector<Tensor4<T>>& velocity() const { return velocity_; }

 private:
  double learning_rate_;
  double momentum_;
  std::vector<Tensor4<T>> velocity_;
};

// Zero-mean Gaussian weights, zero biases.
template <std::floating_point T>
void init_params(ConvLayer<T>& layer, RngStream& rng, double weight_std = 0.1) {
  layer.weights = rng_gaussian<T>(rng, layer.weights.shape(), 0.0, weight_std);
  layer.bias.fill(T(0));
}

template <std::floating_point T>
void init_params(DenseLayer<T>& layer, RngStream& rng, double weight_std = 0.1) {
  layer.weights = rng_gaussian<T>(rng, layer.weights.shape(), 0.0, weight_std);
  layer.bias.fill(T(0));
}

}  // namespace mpd
