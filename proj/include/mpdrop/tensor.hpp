#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <new>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mpdrop/errors.hpp"

namespace mpd {

// Extents of a rank-4 array in (batch, channel, height, width) order.
struct Shape4 {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  friend bool operator==(const Shape4&, const Shape4&) = default;

  // Product of the extents; throws SizeError if it overflows.
  [[nodiscard]] std::size_t size() const {
    std::size_t total = 1;
    for (std::size_t d : {n, c, h, w}) {
      if (d != 0 && total > std::numeric_limits<std::size_t>::max() / d) {
        throw SizeError("tensor shape " + str() + " overflows addressable size");
      }
      total *= d;
    }
    return total;
  }

  // Elements per batch item.
  [[nodiscard]] std::size_t chw() const { return c * h * w; }
  [[nodiscard]] std::size_t hw() const { return h * w; }

  [[nodiscard]] std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

inline std::ostream& operator<<(std::ostream& os, const Shape4& s) { return os << s.str(); }

// Cache-line aligned storage. Vectorised reductions peel differently for
// different start alignments, so without this the same computation can
// round differently from one allocation to the next.
template <typename T, std::size_t Align = 64>
struct AlignedAllocator {
  using value_type = T;
  template <typename U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) noexcept {}

  [[nodiscard]] T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{Align}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{Align}); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U, Align>&) {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

// Dense rank-4 array stored row-major with the batch index outermost.
template <std::floating_point T = double>
class Tensor4 {
 public:
  using value_type = T;

  Tensor4() = default;

  explicit Tensor4(Shape4 shape, T fill = T(0)) : shape_(shape), data_(shape.size(), fill) {}

  Tensor4(Shape4 shape, std::initializer_list<T> data)
      : Tensor4(shape, AlignedVector<T>(data.begin(), data.end())) {}

  Tensor4(Shape4 shape, const std::vector<T>& data)
      : Tensor4(shape, AlignedVector<T>(data.begin(), data.end())) {}

  Tensor4(Shape4 shape, AlignedVector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw GeometryError("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_.str());
    }
  }

  [[nodiscard]] const Shape4& shape() const { return shape_; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  [[nodiscard]] std::size_t index(std::size_t b, std::size_t c, std::size_t h,
                                  std::size_t w) const {
    return ((b * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  T& operator()(std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
    return data_[index(b, c, h, w)];
  }
  const T& operator()(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[index(b, c, h, w)];
  }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  [[nodiscard]] std::span<T> data() { return data_; }
  [[nodiscard]] std::span<const T> data() const { return data_; }

  // Contiguous view of one batch item.
  [[nodiscard]] std::span<T> item(std::size_t b) {
    return std::span<T>(data_).subspan(b * shape_.chw(), shape_.chw());
  }
  [[nodiscard]] std::span<const T> item(std::size_t b) const {
    return std::span<const T>(data_).subspan(b * shape_.chw(), shape_.chw());
  }

  // Same data under a new shape of equal size.
  [[nodiscard]] Tensor4 reshaped(Shape4 shape) const& {
    if (shape.size() != data_.size()) {
      throw GeometryError("cannot reshape " + shape_.str() + " to " + shape.str());
    }
    return Tensor4(shape, data_);
  }
  [[nodiscard]] Tensor4 reshaped(Shape4 shape) && {
    if (shape.size() != data_.size()) {
      throw GeometryError("cannot reshape " + shape_.str() + " to " + shape.str());
    }
    return Tensor4(shape, std::move(data_));
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor4&, const Tensor4&) = default;

 private:
  Shape4 shape_{};
  AlignedVector<T> data_;
};

template <std::floating_point T = double>
[[nodiscard]] Tensor4<T> tensor_new(Shape4 shape, T fill) {
  return Tensor4<T>(shape, fill);
}

inline void require_same_shape(const Shape4& a, const Shape4& b, const char* what) {
  if (a != b) {
    throw GeometryError(std::string(what) + ": shape " + a.str() + " does not match " + b.str());
  }
}

}  // namespace mpd
