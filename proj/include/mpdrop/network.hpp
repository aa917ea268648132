#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "mpdrop/arch.hpp"
#include "mpdrop/layers.hpp"
#include "mpdrop/pooling.hpp"

namespace mpd {

enum class TrainPoolMode { max, max_dropout, stochastic };
enum class TestPoolMode { max, scaled_max, prob_weighted, stochastic_weighted };

[[nodiscard]] inline std::string_view to_string(TrainPoolMode m) {
  switch (m) {
    case TrainPoolMode::max: return "max";
    case TrainPoolMode::max_dropout: return "max_dropout";
    case TrainPoolMode::stochastic: return "stochastic";
  }
  return "?";
}

[[nodiscard]] inline std::string_view to_string(TestPoolMode m) {
  switch (m) {
    case TestPoolMode::max: return "max";
    case TestPoolMode::scaled_max: return "scaled_max";
    case TestPoolMode::prob_weighted: return "prob_weighted";
    case TestPoolMode::stochastic_weighted: return "stochastic_weighted";
  }
  return "?";
}

[[nodiscard]] inline TrainPoolMode parse_train_pool_mode(std::string_view s) {
  if (s == "max") return TrainPoolMode::max;
  if (s == "max_dropout") return TrainPoolMode::max_dropout;
  if (s == "stochastic") return TrainPoolMode::stochastic;
  throw ParameterError("unknown train pool mode '" + std::string(s) + "'");
}

[[nodiscard]] inline TestPoolMode parse_test_pool_mode(std::string_view s) {
  if (s == "max") return TestPoolMode::max;
  if (s == "scaled_max") return TestPoolMode::scaled_max;
  if (s == "prob_weighted") return TestPoolMode::prob_weighted;
  if (s == "stochastic_weighted") return TestPoolMode::stochastic_weighted;
  throw ParameterError("unknown test pool mode '" + std::string(s) + "'");
}

// How pooling and fully-connected dropout behave in one pass.
struct PassConfig {
  TrainPoolMode train_pool = TrainPoolMode::max;
  TestPoolMode test_pool = TestPoolMode::max;
  RetainProb pool_p{1.0};
  std::optional<RetainProb> fc_p;  // dropout on hidden dense outputs, if set
};

// A CNN assembled from an ArchSpec: conv+ReLU, pooling, dense(+ReLU) stages.
// The last dense layer produces logits.
class Network {
 public:
  struct ConvStage {
    ConvLayer<double> layer;
  };
  struct PoolStage {
    PoolSpec spec;
  };
  struct DenseStage {
    DenseLayer<double> layer;
    bool relu = true;
    bool dropout_input = false;  // fed by a hidden dense layer
  };
  using Stage = std::variant<ConvStage, PoolStage, DenseStage>;

  // Intermediate values of a training pass, consumed by backward().
  struct Tape {
    std::vector<Tensor4<double>> inputs;     // input of each stage
    std::vector<Tensor4<double>> pre_relu;   // conv / dense affine outputs
    std::vector<PoolForwardTrace<double>> traces;
    std::vector<Tensor4<double>> fc_masks;   // per dense stage; empty if unused
    Tensor4<double> logits;
  };

  Network() = default;

  // Parameters are zero; call init() to draw weights.
  explicit Network(ArchSpec arch) : arch_(std::move(arch)) {
    for (std::size_t i = 1; i < arch_.tokens.size(); ++i) {
      const Shape3 in = arch_.shapes[i - 1];
      std::visit(
          [&](const auto& tok) {
            using Tok = std::decay_t<decltype(tok)>;
            if constexpr (std::is_same_v<Tok, ConvToken>) {
              stages_.emplace_back(ConvStage{ConvLayer<double>(tok.maps, in.c, tok.filter, tok.filter)});
            } else if constexpr (std::is_same_v<Tok, PoolToken>) {
              stages_.emplace_back(PoolStage{PoolSpec::square(tok.region, tok.stride)});
            } else if constexpr (std::is_same_v<Tok, DenseToken>) {
              const bool fed_by_dense =
                  !stages_.empty() && std::holds_alternative<DenseStage>(stages_.back());
              stages_.emplace_back(DenseStage{DenseLayer<double>(tok.units, in.size()), true,
                                              fed_by_dense});
            }
          },
          arch_.tokens[i]);
    }
    std::get<DenseStage>(stages_.back()).relu = false;
  }

  [[nodiscard]] const ArchSpec& arch() const { return arch_; }
  [[nodiscard]] const std::vector<Stage>& stages() const { return stages_; }
  [[nodiscard]] std::vector<Stage>& stages() { return stages_; }

  // Weights ~ N(0, weight_std^2), biases 0, drawn stage by stage from `rng`.
  void init(RngStream& rng, double weight_std = 0.1) {
    for (auto& stage : stages_) {
      if (auto* c = std::get_if<ConvStage>(&stage)) init_params(c->layer, rng, weight_std);
      if (auto* d = std::get_if<DenseStage>(&stage)) init_params(d->layer, rng, weight_std);
    }
  }

  // Parameter tensors in a fixed order: (weights, bias) per trainable stage.
  [[nodiscard]] std::vector<Tensor4<double>*> parameters() {
    std::vector<Tensor4<double>*> out;
    for (auto& stage : stages_) {
      if (auto* c = std::get_if<ConvStage>(&stage)) {
        out.push_back(&c->layer.weights);
        out.push_back(&c->layer.bias);
      }
      if (auto* d = std::get_if<DenseStage>(&stage)) {
        out.push_back(&d->layer.weights);
        out.push_back(&d->layer.bias);
      }
    }
    return out;
  }
  [[nodiscard]] std::vector<const Tensor4<double>*> parameters() const {
    std::vector<const Tensor4<double>*> out;
    for (auto* p : const_cast<Network*>(this)->parameters()) out.push_back(p);
    return out;
  }

  [[nodiscard]] Shape4 input_shape(std::size_t batch) const {
    const Shape3 s = arch_.shapes.front();
    return {batch, s.c, s.h, s.w};
  }

  // Training pass. Pooling follows cfg.train_pool; `frozen_masks`, when
  // given, supplies max-pooling-dropout keep flags per pooling stage instead
  // of drawing them.
  [[nodiscard]] Tape forward_train(const Tensor4<double>& images, const PassConfig& cfg,
                                   RngStream& rng,
                                   const std::vector<RegionMasks>* frozen_masks = nullptr) const {
    require_same_shape(images.shape(), input_shape(images.shape().n), "Network input");
    Tape tape;
    Tensor4<double> x = images;
    std::size_t pool_index = 0;
    for (const auto& stage : stages_) {
      tape.inputs.push_back(x);
      if (const auto* c = std::get_if<ConvStage>(&stage)) {
        Tensor4<double> z = conv_forward(c->layer, x);
        x = relu_forward(z);
        tape.pre_relu.push_back(std::move(z));
      } else if (const auto* p = std::get_if<PoolStage>(&stage)) {
        PoolForwardTrace<double> trace;
        if (frozen_masks != nullptr) {
          trace = max_pool_masked_forward(x, p->spec, frozen_masks->at(pool_index));
        } else {
          switch (cfg.train_pool) {
            case TrainPoolMode::max: trace = max_pool_forward(x, p->spec); break;
            case TrainPoolMode::max_dropout:
              trace = max_pool_dropout_forward(x, p->spec, cfg.pool_p, rng);
              break;
            case TrainPoolMode::stochastic: trace = stochastic_pool_forward(x, p->spec, rng); break;
          }
        }
        ++pool_index;
        x = trace.pooled;
        tape.traces.push_back(std::move(trace));
      } else {
        const auto& d = std::get<DenseStage>(stage);
        if (d.dropout_input && cfg.fc_p) {
          DropoutOutput<double> dropped = fc_dropout_train(x, *cfg.fc_p, rng);
          x = std::move(dropped.output);
          tape.inputs.back() = x;
          tape.fc_masks.push_back(std::move(dropped.mask));
        } else {
          tape.fc_masks.emplace_back();
        }
        Tensor4<double> z = dense_forward(d.layer, x);
        x = d.relu ? relu_forward(z) : z;
        tape.pre_relu.push_back(std::move(z));
      }
    }
    tape.logits = std::move(x);
    return tape;
  }

  // Gradients for parameters(), in the same order.
  [[nodiscard]] std::vector<Tensor4<double>> backward(const Tape& tape,
                                                      const Tensor4<double>& grad_logits) const {
    std::vector<Tensor4<double>> grads(2 * trainable_count());
    std::size_t slot = grads.size();
    std::size_t affine = tape.pre_relu.size();
    std::size_t trace = tape.traces.size();
    std::size_t dense = tape.fc_masks.size();
    Tensor4<double> g = grad_logits;
    for (std::size_t i = stages_.size(); i-- > 0;) {
      const bool first = i == 0;
      const auto& stage = stages_[i];
      if (const auto* c = std::get_if<ConvStage>(&stage)) {
        g = relu_backward(tape.pre_relu[--affine], g);
        ConvGrads<double> cg = conv_backward(c->layer, tape.inputs[i], g, !first);
        grads[--slot] = std::move(cg.bias);
        grads[--slot] = std::move(cg.weights);
        g = std::move(cg.input);
      } else if (std::holds_alternative<PoolStage>(stage)) {
        g = pool_backward(tape.traces[--trace], g);
      } else {
        const auto& d = std::get<DenseStage>(stage);
        --affine;
        if (d.relu) g = relu_backward(tape.pre_relu[affine], g);
        DenseGrads<double> dg = dense_backward(d.layer, tape.inputs[i], g, !first);
        grads[--slot] = std::move(dg.bias);
        grads[--slot] = std::move(dg.weights);
        g = std::move(dg.input);
        const Tensor4<double>& mask = tape.fc_masks[--dense];
        if (!first && !mask.empty()) g = fc_dropout_backward(mask, g);
      }
    }
    return grads;
  }

  // Inference pass with test-time pooling and dropout compensation.
  [[nodiscard]] Tensor4<double> forward_test(const Tensor4<double>& images,
                                             const PassConfig& cfg) const {
    require_same_shape(images.shape(), input_shape(images.shape().n), "Network input");
    Tensor4<double> x = images;
    for (const auto& stage : stages_) {
      if (const auto* c = std::get_if<ConvStage>(&stage)) {
        x = relu_forward(conv_forward(c->layer, x));
      } else if (const auto* p = std::get_if<PoolStage>(&stage)) {
        switch (cfg.test_pool) {
          case TestPoolMode::max: x = max_pool_forward(x, p->spec).pooled; break;
          case TestPoolMode::scaled_max: x = scaled_max_pool(x, p->spec, cfg.pool_p); break;
          case TestPoolMode::prob_weighted: x = prob_weighted_pool(x, p->spec, cfg.pool_p); break;
          case TestPoolMode::stochastic_weighted: x = stochastic_pool_weighted(x, p->spec); break;
        }
      } else {
        const auto& d = std::get<DenseStage>(stage);
        if (d.dropout_input && cfg.fc_p) x = fc_dropout_test(x, *cfg.fc_p);
        Tensor4<double> z = dense_forward(d.layer, x);
        x = d.relu ? relu_forward(z) : std::move(z);
      }
    }
    return x;
  }

 private:
  [[nodiscard]] std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& stage : stages_) n += std::holds_alternative<PoolStage>(stage) ? 0 : 1;
    return n;
  }

  ArchSpec arch_;
  std::vector<Stage> stages_;
};

}  // namespace mpd
