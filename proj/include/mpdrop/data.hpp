#pragma once

// MNIST (IDX) and CIFAR-10/100 (binary batch) readers, preprocessing, and
// shuffled mini-batches.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mpdrop/random.hpp"
#include "mpdrop/tensor.hpp"

namespace mpd {

enum class Preprocessing { raw, unit_scaled, channel_centered };

struct Dataset {
  Tensor4<double> images;
  std::vector<std::size_t> labels;
  std::size_t n_classes = 0;
  Preprocessing preprocessing = Preprocessing::raw;
  // Per-channel means subtracted by channel centering, in [0, 1] units.
  std::vector<double> channel_means;

  [[nodiscard]] std::size_t size() const { return labels.size(); }
};

inline constexpr std::uint32_t kIdxImageMagic = 2051;
inline constexpr std::uint32_t kIdxLabelMagic = 2049;
inline constexpr std::size_t kCifarPixels = 3 * 32 * 32;
inline constexpr std::size_t kCifar10Record = 1 + kCifarPixels;
inline constexpr std::size_t kCifar100Record = 2 + kCifarPixels;

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset,
                               const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) {
    throw FormatError(path.string() + ": truncated header at offset " + std::to_string(offset));
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void expect_size(const std::vector<std::uint8_t>& bytes, std::size_t expected,
                        const std::filesystem::path& path) {
  if (bytes.size() < expected) {
    throw FormatError(path.string() + ": truncated at offset " + std::to_string(bytes.size()) +
                      ", expected " + std::to_string(expected) + " bytes");
  }
  if (bytes.size() > expected) {
    throw FormatError(path.string() + ": " + std::to_string(bytes.size() - expected) +
                      " trailing bytes after offset " + std::to_string(expected));
  }
}

}  // namespace detail

// IDX image file (magic 2051) plus IDX label file (magic 2049), big-endian
// headers. Pixels are kept as raw 0-255 values.
[[nodiscard]] inline Dataset load_mnist(const std::filesystem::path& images_path,
                                        const std::filesystem::path& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);

  const std::uint32_t img_magic = detail::read_be32(img, 0, images_path);
  if (img_magic != kIdxImageMagic) {
    throw FormatError(images_path.string() + ": bad IDX image magic " + std::to_string(img_magic) +
                      " at offset 0");
  }
  const std::size_t count = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  detail::expect_size(img, 16 + count * rows * cols, images_path);

  const std::uint32_t lab_magic = detail::read_be32(lab, 0, labels_path);
  if (lab_magic != kIdxLabelMagic) {
    throw FormatError(labels_path.string() + ": bad IDX label magic " + std::to_string(lab_magic) +
                      " at offset 0");
  }
  const std::size_t label_count = detail::read_be32(lab, 4, labels_path);
  if (label_count != count) {
    throw FormatError(labels_path.string() + ": " + std::to_string(label_count) +
                      " labels for " + std::to_string(count) + " images (offset 4)");
  }
  detail::expect_size(lab, 8 + count, labels_path);

  Dataset ds;
  ds.n_classes = 10;
  ds.images = Tensor4<double>({count, 1, rows, cols});
  std::transform(img.begin() + 16, img.end(), ds.images.data().begin(),
                 [](std::uint8_t v) { return static_cast<double>(v); });
  ds.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint8_t label = lab[8 + i];
    if (label >= ds.n_classes) {
      throw FormatError(labels_path.string() + ": label " + std::to_string(label) +
                        " out of range at offset " + std::to_string(8 + i));
    }
    ds.labels[i] = label;
  }
  return ds;
}

namespace detail {

// Records are [label bytes][1024 R][1024 G][1024 B]; label_offset selects
// which label byte is used.
inline void append_cifar(Dataset& ds, const std::filesystem::path& path, std::size_t record,
                         std::size_t label_offset) {
  const auto bytes = read_file(path);
  if (bytes.size() % record != 0) {
    throw FormatError(path.string() + ": size " + std::to_string(bytes.size()) +
                      " is not a multiple of the " + std::to_string(record) +
                      "-byte record (partial record at offset " +
                      std::to_string(bytes.size() - bytes.size() % record) + ")");
  }
  const std::size_t count = bytes.size() / record;
  const std::size_t first = ds.labels.size();
  AlignedVector<double> pixels(ds.images.data().begin(), ds.images.data().end());
  pixels.resize((first + count) * kCifarPixels);
  ds.labels.resize(first + count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t offset = i * record;
    const std::uint8_t label = bytes[offset + label_offset];
    if (label >= ds.n_classes) {
      throw FormatError(path.string() + ": label " + std::to_string(label) +
                        " out of range at offset " + std::to_string(offset + label_offset));
    }
    ds.labels[first + i] = label;
    const std::size_t header = record - kCifarPixels;
    std::transform(bytes.begin() + static_cast<std::ptrdiff_t>(offset + header),
                   bytes.begin() + static_cast<std::ptrdiff_t>(offset + record),
                   pixels.begin() + static_cast<std::ptrdiff_t>((first + i) * kCifarPixels),
                   [](std::uint8_t v) { return static_cast<double>(v); });
  }
  ds.images = Tensor4<double>({first + count, 3, 32, 32}, std::move(pixels));
}

}  // namespace detail

// Concatenates CIFAR-10 batch files (3073-byte records).
[[nodiscard]] inline Dataset load_cifar10(std::span<const std::filesystem::path> batch_paths) {
  Dataset ds;
  ds.n_classes = 10;
  ds.images = Tensor4<double>({0, 3, 32, 32});
  for (const auto& path : batch_paths) detail::append_cifar(ds, path, kCifar10Record, 0);
  return ds;
}

// CIFAR-100 file (3074-byte records: coarse label, fine label); uses the fine label.
[[nodiscard]] inline Dataset load_cifar100(const std::filesystem::path& path) {
  Dataset ds;
  ds.n_classes = 100;
  ds.images = Tensor4<double>({0, 3, 32, 32});
  detail::append_cifar(ds, path, kCifar100Record, 1);
  return ds;
}

// Mean of each channel over every image and pixel, after scaling to [0, 1].
[[nodiscard]] inline std::vector<double> channel_means(const Dataset& ds) {
  const Shape4& s = ds.images.shape();
  std::vector<double> means(s.c, 0.0);
  if (s.n == 0 || s.hw() == 0) return means;
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const double* plane = ds.images.data().data() + (b * s.c + c) * s.hw();
      means[c] += std::accumulate(plane, plane + s.hw(), 0.0);
    }
  }
  const double scale = ds.preprocessing == Preprocessing::raw ? 255.0 : 1.0;
  for (double& m : means) m /= static_cast<double>(s.n * s.hw()) * scale;
  return means;
}

enum class PreprocessMode { mnist, cifar };

// mnist: pixels / 255. cifar: pixels / 255, then subtract per-channel means.
// The means come from `reference_means` when given (pass the training split's
// means when preprocessing a test split), else from this dataset.
[[nodiscard]] inline Dataset preprocess(Dataset ds, PreprocessMode mode,
                                        std::optional<std::vector<double>> reference_means = {}) {
  if (ds.preprocessing != Preprocessing::raw) {
    throw PreconditionError("dataset is already preprocessed");
  }
  for (double& v : ds.images.data()) v /= 255.0;
  ds.preprocessing = Preprocessing::unit_scaled;
  if (mode == PreprocessMode::mnist) return ds;

  std::vector<double> means = reference_means ? *reference_means : channel_means(ds);
  const Shape4& s = ds.images.shape();
  if (means.size() != s.c) {
    throw GeometryError("preprocess: " + std::to_string(means.size()) + " channel means for " +
                        std::to_string(s.c) + " channels");
  }
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t c = 0; c < s.c; ++c) {
      double* plane = ds.images.data().data() + (b * s.c + c) * s.hw();
      for (std::size_t i = 0; i < s.hw(); ++i) plane[i] -= means[c];
    }
  }
  ds.channel_means = std::move(means);
  ds.preprocessing = Preprocessing::channel_centered;
  return ds;
}

// First `count` examples (all of them if count exceeds the size).
[[nodiscard]] inline Dataset take_front(const Dataset& ds, std::size_t count) {
  count = std::min(count, ds.size());
  Dataset out;
  out.n_classes = ds.n_classes;
  out.preprocessing = ds.preprocessing;
  out.channel_means = ds.channel_means;
  Shape4 s = ds.images.shape();
  const auto src = ds.images.data();
  AlignedVector<double> pixels(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(count * s.chw()));
  s.n = count;
  out.images = Tensor4<double>(s, std::move(pixels));
  out.labels.assign(ds.labels.begin(), ds.labels.begin() + static_cast<std::ptrdiff_t>(count));
  return out;
}

struct Batch {
  Tensor4<double> images;
  std::vector<std::size_t> labels;
};

[[nodiscard]] inline Batch gather_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  Shape4 s = ds.images.shape();
  s.n = indices.size();
  Batch batch{Tensor4<double>(s), std::vector<std::size_t>(indices.size())};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = ds.images.item(indices[i]);
    std::copy(src.begin(), src.end(), batch.images.item(i).begin());
    batch.labels[i] = ds.labels[indices[i]];
  }
  return batch;
}

// Index lists for one epoch: a Fisher-Yates permutation (identity when
// shuffle is false) cut into batches; the last batch may be short.
[[nodiscard]] inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n,
                                                                          std::size_t batch_size,
                                                                          RngStream& rng,
                                                                          bool shuffle = true) {
  if (batch_size < 1) throw ParameterError("batch size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

// Serves one epoch of shuffled mini-batches.
class BatchIter {
 public:
  BatchIter(const Dataset& ds, std::size_t batch_size, RngStream& rng, bool shuffle = true)
      : ds_(&ds), batches_(epoch_batches(ds.size(), batch_size, rng, shuffle)) {}

  [[nodiscard]] std::optional<Batch> next() {
    if (pos_ == batches_.size()) return std::nullopt;
    return gather_batch(*ds_, batches_[pos_++]);
  }

  [[nodiscard]] std::size_t batch_count() const { return batches_.size(); }
  [[nodiscard]] const std::vector<std::vector<std::size_t>>& indices() const { return batches_; }

 private:
  const Dataset* ds_;
  std::vector<std::vector<std::size_t>> batches_;
  std::size_t pos_ = 0;
};

}  // namespace mpd
