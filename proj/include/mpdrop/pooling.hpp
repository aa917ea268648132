#pragma once

// Pooling schemes for max-pooling dropout networks.
//
// Train time:
//   max_pool_forward           plain max-pooling
//   max_pool_dropout_forward   Bernoulli mask on each region, then max
//   multinomial_pool_sample    the same distribution drawn directly from
//                              the index probabilities p_i = p q^(n-i)
//   stochastic_pool_forward    index drawn with probability a_i / sum(a)
// Test time:
//   scaled_max_pool            p * max(region)
//   prob_weighted_pool         sum_i p_i a_(i), activations sorted ascending
//   stochastic_pool_weighted   sum_i a_i^2 / sum(a)
//
// Every region is a valid window (no padding). The probability-based schemes
// require non-negative inputs, which is what a ReLU in front of the pooling
// layer guarantees.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "mpdrop/random.hpp"
#include "mpdrop/tensor.hpp"

namespace mpd {

// Pooling-region geometry. The region has t = region_h * region_w units.
struct PoolSpec {
  std::size_t region_h = 1;
  std::size_t region_w = 1;
  std::size_t stride = 1;

  PoolSpec() = default;
  PoolSpec(std::size_t rh, std::size_t rw, std::size_t s) : region_h(rh), region_w(rw), stride(s) {
    if (rh < 1 || rw < 1 || s < 1) {
      throw ParameterError("pool region and stride must be >= 1");
    }
  }
  // Square region of side `side`.
  static PoolSpec square(std::size_t side, std::size_t stride) { return {side, side, stride}; }

  [[nodiscard]] std::size_t region_size() const { return region_h * region_w; }

  [[nodiscard]] bool non_overlapping() const {
    return stride == region_h && stride == region_w;
  }

  // Spatial output shape of valid pooling; overhanging windows are dropped.
  [[nodiscard]] Shape4 output_shape(const Shape4& in) const {
    if (in.h < region_h || in.w < region_w) {
      throw GeometryError("pool region " + std::to_string(region_h) + "x" +
                          std::to_string(region_w) + " exceeds input " + in.str());
    }
    return {in.n, in.c, (in.h - region_h) / stride + 1, (in.w - region_w) / stride + 1};
  }

  friend bool operator==(const PoolSpec&, const PoolSpec&) = default;
};

// One activation of a pooling region with its flat index in the input.
template <std::floating_point T = double>
struct RegionCell {
  T value;
  std::size_t index;
};

// Index probabilities [p_0, p_1, ..., p_n] of max-pooling dropout for a
// region of n activations sorted non-decreasing. p_0 is the all-dropped event.
struct IndexProbs {
  std::vector<double> probs;

  [[nodiscard]] std::size_t region_size() const { return probs.size() - 1; }
};

// A sampled pooled value with the index it came from. For the dropout
// samplers the index is into the ascending sort (0 = all dropped); for
// stochastic pooling it is the raster position inside the region.
template <std::floating_point T = double>
struct PoolSample {
  T value;
  std::size_t index;
};

// Output of a train-time pooling pass together with what backward needs.
template <std::floating_point T = double>
struct PoolForwardTrace {
  static constexpr std::int64_t kAllDropped = -1;

  Tensor4<T> pooled;
  // Per output element: flat input index that produced it, or kAllDropped.
  std::vector<std::int64_t> chosen_index;
  Shape4 input_shape;
};

// Per-region keep flags from max-pooling dropout, laid out as
// [output element][raster position in region]. Overlapping regions draw
// independent flags for a shared input cell.
struct RegionMasks {
  std::size_t region_size = 0;
  std::vector<std::uint8_t> keep;
};

namespace detail {

// Input offsets of the region cells relative to the window's top-left cell.
inline std::vector<std::size_t> region_offsets(const Shape4& in, const PoolSpec& spec) {
  std::vector<std::size_t> offsets;
  offsets.reserve(spec.region_size());
  for (std::size_t kh = 0; kh < spec.region_h; ++kh) {
    for (std::size_t kw = 0; kw < spec.region_w; ++kw) offsets.push_back(kh * in.w + kw);
  }
  return offsets;
}

// Calls fn(out_index, window_base) for every output element, in output order.
template <typename Fn>
void for_each_window(const Shape4& in, const Shape4& out, const PoolSpec& spec, Fn&& fn) {
  std::size_t o = 0;
  for (std::size_t b = 0; b < out.n; ++b) {
    for (std::size_t c = 0; c < out.c; ++c) {
      const std::size_t plane = (b * in.c + c) * in.h * in.w;
      for (std::size_t oh = 0; oh < out.h; ++oh) {
        for (std::size_t ow = 0; ow < out.w; ++ow, ++o) {
          fn(o, plane + oh * spec.stride * in.w + ow * spec.stride);
        }
      }
    }
  }
}

template <std::floating_point T>
void require_non_negative(std::span<const T> values, const char* op) {
  for (T v : values) {
    if (v < T(0)) {
      throw PreconditionError(std::string(op) + ": activations must be non-negative, got " +
                              std::to_string(static_cast<double>(v)));
    }
  }
}

}  // namespace detail

// The t activations of the region feeding output (b, c, out_h, out_w), in
// raster order.
template <std::floating_point T>
[[nodiscard]] std::vector<RegionCell<T>> extract_region(const Tensor4<T>& input,
                                                        const PoolSpec& spec, std::size_t b,
                                                        std::size_t c, std::size_t out_h,
                                                        std::size_t out_w) {
  const Shape4& s = input.shape();
  const std::size_t top = out_h * spec.stride;
  const std::size_t left = out_w * spec.stride;
  if (b >= s.n || c >= s.c || top + spec.region_h > s.h || left + spec.region_w > s.w) {
    throw GeometryError("pool window at output (" + std::to_string(b) + "," + std::to_string(c) +
                        "," + std::to_string(out_h) + "," + std::to_string(out_w) +
                        ") exceeds input " + s.str());
  }
  std::vector<RegionCell<T>> cells;
  cells.reserve(spec.region_size());
  for (std::size_t kh = 0; kh < spec.region_h; ++kh) {
    for (std::size_t kw = 0; kw < spec.region_w; ++kw) {
      const std::size_t idx = input.index(b, c, top + kh, left + kw);
      cells.push_back({input[idx], idx});
    }
  }
  return cells;
}

// Max over each region; ties go to the lowest raster position.
template <std::floating_point T>
[[nodiscard]] PoolForwardTrace<T> max_pool_forward(const Tensor4<T>& input, const PoolSpec& spec) {
  const Shape4 out_shape = spec.output_shape(input.shape());
  const auto offsets = detail::region_offsets(input.shape(), spec);
  PoolForwardTrace<T> trace{Tensor4<T>(out_shape), std::vector<std::int64_t>(out_shape.size()),
                            input.shape()};
  detail::for_each_window(input.shape(), out_shape, spec, [&](std::size_t o, std::size_t base) {
    std::size_t best = base + offsets[0];
    for (std::size_t k = 1; k < offsets.size(); ++k) {
      if (input[base + offsets[k]] > input[best]) best = base + offsets[k];
    }
    trace.pooled[o] = input[best];
    trace.chosen_index[o] = static_cast<std::int64_t>(best);
  });
  return trace;
}

// Keep flags for every region of a pooling pass over `input_shape`. Each
// batch item draws from its own forked substream.
[[nodiscard]] inline RegionMasks draw_region_masks(const Shape4& input_shape, const PoolSpec& spec,
                                                   RetainProb p, RngStream& rng) {
  const Shape4 out_shape = spec.output_shape(input_shape);
  const std::size_t t = spec.region_size();
  const std::size_t per_item = out_shape.chw() * t;
  RegionMasks masks{t, std::vector<std::uint8_t>(out_shape.n * per_item)};
  for (std::size_t b = 0; b < out_shape.n; ++b) {
    RngStream item_rng = rng.fork();
    auto* keep = masks.keep.data() + b * per_item;
    for (std::size_t k = 0; k < per_item; ++k) keep[k] = item_rng.bernoulli(p.p()) ? 1 : 0;
  }
  return masks;
}

// Max-pooling over mask-modified regions: dropped units read as zero. The
// chosen index is the surviving argmax, or kAllDropped when nothing survives
// (output 0).
template <std::floating_point T>
[[nodiscard]] PoolForwardTrace<T> max_pool_masked_forward(const Tensor4<T>& input,
                                                          const PoolSpec& spec,
                                                          const RegionMasks& masks) {
  detail::require_non_negative(input.data(), "max_pool_masked_forward");
  const Shape4 out_shape = spec.output_shape(input.shape());
  const std::size_t t = spec.region_size();
  if (masks.region_size != t || masks.keep.size() != out_shape.size() * t) {
    throw GeometryError("region mask layout does not match pooling geometry");
  }
  const auto offsets = detail::region_offsets(input.shape(), spec);
  PoolForwardTrace<T> trace{Tensor4<T>(out_shape), std::vector<std::int64_t>(out_shape.size()),
                            input.shape()};
  detail::for_each_window(input.shape(), out_shape, spec, [&](std::size_t o, std::size_t base) {
    const std::uint8_t* keep = masks.keep.data() + o * t;
    // Dropped units read as -1 so that any survivor (>= 0) beats them.
    std::int64_t best = PoolForwardTrace<T>::kAllDropped;
    T best_value = T(-1);
    for (std::size_t k = 0; k < t; ++k) {
      const std::size_t idx = base + offsets[k];
      const T kept = static_cast<T>(keep[k]);
      const T v = input[idx] * kept + (kept - T(1));
      const bool take = v > best_value;
      best = take ? static_cast<std::int64_t>(idx) : best;
      best_value = take ? v : best_value;
    }
    trace.pooled[o] = best == PoolForwardTrace<T>::kAllDropped ? T(0) : best_value;
    trace.chosen_index[o] = best;
  });
  return trace;
}

// Train-time max-pooling dropout: independent Bernoulli(p) mask per region,
// then max of the surviving activations.
template <std::floating_point T>
[[nodiscard]] PoolForwardTrace<T> max_pool_dropout_forward(const Tensor4<T>& input,
                                                           const PoolSpec& spec, RetainProb p,
                                                           RngStream& rng) {
  detail::require_non_negative(input.data(), "max_pool_dropout_forward");
  return max_pool_masked_forward(input, spec, draw_region_masks(input.shape(), spec, p, rng));
}

// [q^n, p q^(n-1), ..., p q, p].
[[nodiscard]] inline IndexProbs dropout_index_probs(std::size_t n, RetainProb p) {
  if (n == 0) throw ParameterError("dropout_index_probs needs a non-empty region");
  IndexProbs out{std::vector<double>(n + 1)};
  const double q = p.q();
  out.probs[0] = std::pow(q, static_cast<double>(n));
  for (std::size_t i = 1; i <= n; ++i) {
    out.probs[i] = p.p() * std::pow(q, static_cast<double>(n - i));
  }
  return out;
}

// Draws the pooled value of one region straight from the index distribution
// instead of through a mask. Returns the value and its 1-based position in
// the ascending sort, 0 meaning every unit was dropped.
template <std::floating_point T>
[[nodiscard]] PoolSample<T> multinomial_pool_sample(std::span<const T> region, RetainProb p,
                                                    RngStream& rng) {
  if (region.empty()) throw ParameterError("multinomial_pool_sample: empty region");
  detail::require_non_negative(region, "multinomial_pool_sample");
  std::vector<T> sorted(region.begin(), region.end());
  std::stable_sort(sorted.begin(), sorted.end());
  const IndexProbs probs = dropout_index_probs(sorted.size(), p);
  const double u = rng.uniform();
  double cumulative = 0.0;
  std::size_t chosen = sorted.size();
  for (std::size_t i = 0; i <= sorted.size(); ++i) {
    cumulative += probs.probs[i];
    if (u < cumulative) {
      chosen = i;
      break;
    }
  }
  return {chosen == 0 ? T(0) : sorted[chosen - 1], chosen};
}

// Test time: p * max(region).
template <std::floating_point T>
[[nodiscard]] Tensor4<T> scaled_max_pool(const Tensor4<T>& input, const PoolSpec& spec,
                                         RetainProb p) {
  Tensor4<T> out = max_pool_forward(input, spec).pooled;
  for (auto& v : out.data()) v = static_cast<T>(p.p()) * v;
  return out;
}

// Test time: the exact expectation of max-pooling dropout's output, i.e.
// sum_{i=1..n} p_i a_(i) over the region sorted ascending.
template <std::floating_point T>
[[nodiscard]] Tensor4<T> prob_weighted_pool(const Tensor4<T>& input, const PoolSpec& spec,
                                            RetainProb p) {
  detail::require_non_negative(input.data(), "prob_weighted_pool");
  const Shape4 out_shape = spec.output_shape(input.shape());
  const auto offsets = detail::region_offsets(input.shape(), spec);
  const IndexProbs probs = dropout_index_probs(offsets.size(), p);
  std::vector<T> weights(probs.probs.begin() + 1, probs.probs.end());
  std::vector<T> sorted(offsets.size());
  Tensor4<T> out(out_shape);
  detail::for_each_window(input.shape(), out_shape, spec, [&](std::size_t o, std::size_t base) {
    for (std::size_t k = 0; k < offsets.size(); ++k) sorted[k] = input[base + offsets[k]];
    std::sort(sorted.begin(), sorted.end());
    T acc = T(0);
    for (std::size_t i = 0; i < sorted.size(); ++i) acc += weights[i] * sorted[i];
    out[o] = acc;
  });
  return out;
}

// a_i / sum(a); uniform when the region sums to zero.
template <std::floating_point T>
[[nodiscard]] std::vector<double> stochastic_pool_probs(std::span<const T> region) {
  if (region.empty()) throw ParameterError("stochastic_pool_probs: empty region");
  detail::require_non_negative(region, "stochastic_pool_probs");
  double total = 0.0;
  for (T v : region) total += static_cast<double>(v);
  std::vector<double> probs(region.size());
  if (total == 0.0) {
    std::fill(probs.begin(), probs.end(), 1.0 / static_cast<double>(region.size()));
  } else {
    for (std::size_t i = 0; i < region.size(); ++i) probs[i] = static_cast<double>(region[i]) / total;
  }
  return probs;
}

namespace detail {

inline std::size_t sample_categorical(std::span<const double> probs, RngStream& rng) {
  const double u = rng.uniform();
  double cumulative = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    cumulative += probs[i];
    if (u < cumulative) return i;
  }
  // Rounding left the cumulative sum just under 1; take the last non-zero entry.
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0.0) return i;
  }
  return probs.size() - 1;
}

}  // namespace detail

// Stochastic pooling draw for one region; the index is the raster position.
template <std::floating_point T>
[[nodiscard]] PoolSample<T> stochastic_pool_sample(std::span<const T> region, RngStream& rng) {
  const std::vector<double> probs = stochastic_pool_probs(region);
  const std::size_t i = detail::sample_categorical(probs, rng);
  return {region[i], i};
}

// Train-time stochastic pooling over a tensor; each batch item uses its own
// forked substream.
template <std::floating_point T>
[[nodiscard]] PoolForwardTrace<T> stochastic_pool_forward(const Tensor4<T>& input,
                                                          const PoolSpec& spec, RngStream& rng) {
  detail::require_non_negative(input.data(), "stochastic_pool_forward");
  const Shape4 out_shape = spec.output_shape(input.shape());
  const auto offsets = detail::region_offsets(input.shape(), spec);
  const std::size_t t = offsets.size();
  const std::size_t per_item = out_shape.chw();
  PoolForwardTrace<T> trace{Tensor4<T>(out_shape), std::vector<std::int64_t>(out_shape.size()),
                            input.shape()};
  if (out_shape.size() == 0) return trace;
  std::vector<T> region(t);
  RngStream item_rng = rng.fork();
  detail::for_each_window(input.shape(), out_shape, spec, [&](std::size_t o, std::size_t base) {
    if (o % per_item == 0 && o != 0) item_rng = rng.fork();
    for (std::size_t k = 0; k < t; ++k) region[k] = input[base + offsets[k]];
    const PoolSample<T> s = stochastic_pool_sample(std::span<const T>(region), item_rng);
    trace.pooled[o] = s.value;
    trace.chosen_index[o] = static_cast<std::int64_t>(base + offsets[s.index]);
  });
  return trace;
}

// Test time for stochastic pooling: sum_i p_i a_i with p_i = a_i / sum(a).
template <std::floating_point T>
[[nodiscard]] Tensor4<T> stochastic_pool_weighted(const Tensor4<T>& input, const PoolSpec& spec) {
  detail::require_non_negative(input.data(), "stochastic_pool_weighted");
  const Shape4 out_shape = spec.output_shape(input.shape());
  const auto offsets = detail::region_offsets(input.shape(), spec);
  std::vector<T> region(offsets.size());
  Tensor4<T> out(out_shape);
  detail::for_each_window(input.shape(), out_shape, spec, [&](std::size_t o, std::size_t base) {
    for (std::size_t k = 0; k < offsets.size(); ++k) region[k] = input[base + offsets[k]];
    const std::vector<double> probs = stochastic_pool_probs(std::span<const T>(region));
    double acc = 0.0;
    for (std::size_t k = 0; k < region.size(); ++k) acc += probs[k] * static_cast<double>(region[k]);
    out[o] = static_cast<T>(acc);
  });
  return out;
}

// Routes each output gradient to the input cell that produced the output.
// Overlapping windows accumulate; all-dropped regions route nothing.
template <std::floating_point T>
[[nodiscard]] Tensor4<T> pool_backward(const PoolForwardTrace<T>& trace,
                                       const Tensor4<T>& grad_out) {
  require_same_shape(grad_out.shape(), trace.pooled.shape(), "pool_backward");
  if (trace.chosen_index.size() != grad_out.size()) {
    throw GeometryError("pool_backward: trace index count does not match output");
  }
  Tensor4<T> grad_in(trace.input_shape);
  for (std::size_t o = 0; o < grad_out.size(); ++o) {
    const std::int64_t idx = trace.chosen_index[o];
    if (idx == PoolForwardTrace<T>::kAllDropped) continue;
    if (idx < 0 || static_cast<std::size_t>(idx) >= grad_in.size()) {
      throw GeometryError("pool_backward: chosen index outside the input");
    }
    grad_in[static_cast<std::size_t>(idx)] += grad_out[o];
  }
  return grad_in;
}

// Number of distinct sub-networks max-pooling dropout can realise at one
// non-overlapping pooling layer: (1 + t)^(r s / t).
struct ModelCount {
  boost::multiprecision::cpp_int count;
  std::uint64_t exponent = 0;  // number of pooling regions, r s / t
  double log10 = 0.0;
};

// r feature maps of s units each, regions of t units.
[[nodiscard]] inline ModelCount model_count(std::uint64_t r, std::uint64_t s, std::uint64_t t) {
  if (r < 1 || s < 1 || t < 1) throw ParameterError("model_count: r, s and t must be >= 1");
  const auto units = static_cast<unsigned __int128>(r) * s;
  if (units % t != 0) {
    throw ParameterError("model_count: region size " + std::to_string(t) +
                         " does not divide r*s");
  }
  const auto regions = static_cast<std::uint64_t>(units / t);
  ModelCount mc;
  mc.exponent = regions;
  mc.count = boost::multiprecision::pow(boost::multiprecision::cpp_int(t + 1),
                                        static_cast<unsigned>(regions));
  mc.log10 = static_cast<double>(regions) * std::log10(static_cast<double>(t + 1));
  return mc;
}

// Same count for a concrete geometry; refuses overlapping windows.
[[nodiscard]] inline ModelCount model_count(std::uint64_t r, std::uint64_t s,
                                            const PoolSpec& spec) {
  if (!spec.non_overlapping()) {
    throw ParameterError("model_count assumes non-overlapping pooling");
  }
  return model_count(r, s, spec.region_size());
}

// b(t) = (1 + t)^(1/t), so that the count equals b(t)^(r s).
[[nodiscard]] inline double model_count_base(std::int64_t t) {
  if (t < 1) throw ParameterError("model_count_base: t must be >= 1");
  return std::pow(static_cast<double>(t + 1), 1.0 / static_cast<double>(t));
}

}  // namespace mpd
