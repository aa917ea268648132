#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "mpdrop/data.hpp"

namespace mpd {
namespace {

namespace fs = std::filesystem;

class DataFiles : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("mpdrop_data_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write(const std::string& name, const std::vector<std::uint8_t>& bytes) {
    const fs::path p = dir_ / name;
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    return p;
  }

  fs::path dir_;
};

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

std::vector<std::uint8_t> idx_images(std::uint32_t count, std::uint32_t magic = 2051) {
  std::vector<std::uint8_t> b;
  put_be32(b, magic);
  put_be32(b, count);
  put_be32(b, 28);
  put_be32(b, 28);
  for (std::uint32_t i = 0; i < count * 784; ++i) b.push_back(static_cast<std::uint8_t>((i * 7) % 256));
  return b;
}

std::vector<std::uint8_t> idx_labels(std::uint32_t count, std::uint32_t magic = 2049) {
  std::vector<std::uint8_t> b;
  put_be32(b, magic);
  put_be32(b, count);
  for (std::uint32_t i = 0; i < count; ++i) b.push_back(static_cast<std::uint8_t>(i % 10));
  return b;
}

std::vector<std::uint8_t> cifar_records(std::size_t count, std::size_t label_bytes) {
  std::vector<std::uint8_t> b;
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t k = 0; k < label_bytes; ++k) b.push_back(static_cast<std::uint8_t>((i * 13 + k * 50) % (label_bytes == 1 ? 10 : 100)));
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t px = 0; px < 1024; ++px) b.push_back(static_cast<std::uint8_t>((px + 40 * c + i) % 256));
  }
  return b;
}

// ---------------------------------------------------------------------------
// MNIST

TEST_F(DataFiles, MnistRoundTrip) {
  const auto img = write("img", idx_images(5));
  const auto lab = write("lab", idx_labels(5));
  const Dataset ds = load_mnist(img, lab);
  EXPECT_EQ(ds.images.shape(), (Shape4{5, 1, 28, 28}));
  EXPECT_EQ(ds.labels, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(ds.n_classes, 10u);
  EXPECT_EQ(ds.images(2, 0, 3, 4), static_cast<double>(((2 * 784 + 3 * 28 + 4) * 7) % 256));
}

TEST_F(DataFiles, MnistBadMagic) {
  const auto lab = write("lab", idx_labels(2));
  EXPECT_THROW((void)load_mnist(write("img", idx_images(2, 2049)), lab), FormatError);
  EXPECT_THROW((void)load_mnist(write("img2", idx_images(2)), write("lab2", idx_labels(2, 2051))),
               FormatError);
}

TEST_F(DataFiles, MnistTruncatedAndMismatched) {
  auto bytes = idx_images(3);
  bytes.resize(bytes.size() - 1);
  const auto lab = write("lab", idx_labels(3));
  try {
    (void)load_mnist(write("img", bytes), lab);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
  }
  EXPECT_THROW((void)load_mnist(write("short", std::vector<std::uint8_t>{0, 0, 8}), lab), FormatError);
  EXPECT_THROW((void)load_mnist(write("img4", idx_images(4)), lab), FormatError);
  auto extra = idx_images(3);
  extra.push_back(0);
  EXPECT_THROW((void)load_mnist(write("extra", extra), lab), FormatError);
  EXPECT_THROW((void)load_mnist(dir_ / "missing", lab), FormatError);
}

TEST_F(DataFiles, MnistLabelOutOfRange) {
  auto lab = idx_labels(2);
  lab.back() = 10;
  EXPECT_THROW((void)load_mnist(write("img", idx_images(2)), write("lab", lab)), FormatError);
}

TEST(MnistOfficialTest, CountsAndLabelSpotCheck) {
  const fs::path dir = MPDROP_MNIST_DIR;
  if (!fs::exists(dir / "train-images-idx3-ubyte")) GTEST_SKIP() << "MNIST files not found in " << dir;
  const Dataset train = load_mnist(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
  const Dataset test = load_mnist(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  EXPECT_EQ(train.size(), 60000u);
  EXPECT_EQ(test.size(), 10000u);
  EXPECT_TRUE(std::all_of(train.labels.begin(), train.labels.end(), [](std::size_t l) { return l < 10; }));

  // Independent reread of the raw label and pixel bytes.
  std::ifstream labels(dir / "train-labels-idx1-ubyte", std::ios::binary);
  std::ifstream images(dir / "train-images-idx3-ubyte", std::ios::binary);
  RngStream rng(17);
  for (int k = 0; k < 100; ++k) {
    const std::size_t i = rng.below(60000);
    labels.seekg(static_cast<std::streamoff>(8 + i));
    EXPECT_EQ(static_cast<std::size_t>(labels.get()), train.labels[i]);
    images.seekg(static_cast<std::streamoff>(16 + i * 784 + 14 * 28 + 14));
    EXPECT_EQ(static_cast<double>(images.get()), train.images(i, 0, 14, 14));
  }
}

// ---------------------------------------------------------------------------
// CIFAR

TEST_F(DataFiles, Cifar10RecordArithmetic) {
  const auto bytes = cifar_records(10, 1);
  ASSERT_EQ(bytes.size(), 30730u);
  const std::vector<fs::path> paths{write("a.bin", bytes), write("b.bin", cifar_records(3, 1))};
  const Dataset ds = load_cifar10(paths);
  EXPECT_EQ(ds.images.shape(), (Shape4{13, 3, 32, 32}));
  EXPECT_EQ(ds.n_classes, 10u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(ds.labels[i], (i * 13) % 10);
  EXPECT_EQ(ds.labels[12], (2 * 13) % 10);
}

TEST_F(DataFiles, Cifar10LabelsAndPixels) {
  std::vector<std::uint8_t> bytes = cifar_records(4, 1);
  for (std::size_t i = 0; i < 4; ++i) bytes[i * 3073] = static_cast<std::uint8_t>(9 - i);
  const std::vector<fs::path> paths{write("a.bin", bytes)};
  const Dataset ds = load_cifar10(paths);
  EXPECT_EQ(ds.labels, (std::vector<std::size_t>{9, 8, 7, 6}));
  // Channel-major planes: red, then green, then blue.
  EXPECT_EQ(ds.images(2, 1, 0, 5), static_cast<double>((5 + 40 + 2) % 256));
  EXPECT_EQ(ds.images(3, 2, 31, 31), static_cast<double>((1023 + 80 + 3) % 256));
}

TEST_F(DataFiles, CifarPartialRecordRejected) {
  auto bytes = cifar_records(2, 1);
  bytes.pop_back();
  const std::vector<fs::path> paths{write("a.bin", bytes)};
  EXPECT_THROW((void)load_cifar10(paths), FormatError);
  auto label_bad = cifar_records(1, 1);
  label_bad[0] = 10;
  const std::vector<fs::path> bad{write("c.bin", label_bad)};
  EXPECT_THROW((void)load_cifar10(bad), FormatError);
}

TEST_F(DataFiles, Cifar100UsesFineLabel) {
  std::vector<std::uint8_t> bytes = cifar_records(3, 2);
  for (std::size_t i = 0; i < 3; ++i) {
    bytes[i * 3074] = 19;                                    // coarse
    bytes[i * 3074 + 1] = static_cast<std::uint8_t>(97 + i);  // fine
  }
  const Dataset ds = load_cifar100(write("train.bin", bytes));
  EXPECT_EQ(ds.labels, (std::vector<std::size_t>{97, 98, 99}));
  EXPECT_EQ(ds.n_classes, 100u);
  EXPECT_EQ(ds.images(1, 0, 0, 0), static_cast<double>((0 + 1) % 256));
}

// ---------------------------------------------------------------------------
// Preprocessing

Dataset constant_dataset(std::size_t n, std::size_t c, double value) {
  Dataset ds;
  ds.images = Tensor4<double>({n, c, 4, 4}, value);
  ds.labels.assign(n, 0);
  ds.n_classes = 10;
  return ds;
}

TEST(PreprocessTest, MnistScalesToUnitInterval) {
  Dataset ds = constant_dataset(2, 1, 255.0);
  ds.images[3] = 0.0;
  const Dataset out = preprocess(ds, PreprocessMode::mnist);
  EXPECT_EQ(out.images[0], 1.0);
  EXPECT_EQ(out.images[3], 0.0);
  EXPECT_EQ(out.preprocessing, Preprocessing::unit_scaled);
}

TEST(PreprocessTest, CifarCentersChannels) {
  EXPECT_TRUE(std::all_of(preprocess(constant_dataset(3, 3, 77.0), PreprocessMode::cifar).images.data().begin(),
                          preprocess(constant_dataset(3, 3, 77.0), PreprocessMode::cifar).images.data().end(),
                          [](double v) { return v == 0.0; }));
  Dataset ds = constant_dataset(5, 3, 0.0);
  RngStream rng(3);
  for (auto& v : ds.images.data()) v = static_cast<double>(rng.below(256));
  const Dataset out = preprocess(ds, PreprocessMode::cifar);
  EXPECT_EQ(out.preprocessing, Preprocessing::channel_centered);
  for (double m : channel_means(out)) EXPECT_NEAR(m, 0.0, 1e-9);
  // The test split reuses the training means.
  const Dataset test = preprocess(constant_dataset(1, 3, 255.0), PreprocessMode::cifar, out.channel_means);
  EXPECT_NEAR(test.images(0, 1, 0, 0), 1.0 - out.channel_means[1], 1e-15);
}

TEST(PreprocessTest, RefusesSecondPass) {
  const Dataset once = preprocess(constant_dataset(1, 3, 10.0), PreprocessMode::cifar);
  EXPECT_THROW((void)preprocess(once, PreprocessMode::cifar), PreconditionError);
  EXPECT_THROW((void)preprocess(preprocess(constant_dataset(1, 1, 1.0), PreprocessMode::mnist),
                                PreprocessMode::mnist),
               PreconditionError);
}

// ---------------------------------------------------------------------------
// Batching

TEST(BatchTest, FullPartition) {
  RngStream rng(1);
  const auto batches = epoch_batches(60000, 100, rng);
  EXPECT_EQ(batches.size(), 600u);
  std::vector<int> seen(60000, 0);
  for (const auto& b : batches) {
    EXPECT_EQ(b.size(), 100u);
    for (std::size_t i : b) ++seen[i];
  }
  EXPECT_TRUE(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }));
}

TEST(BatchTest, ShortFinalBatch) {
  RngStream rng(2);
  std::vector<std::size_t> sizes;
  for (const auto& b : epoch_batches(10, 3, rng)) sizes.push_back(b.size());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{3, 3, 3, 1}));
  EXPECT_THROW((void)epoch_batches(10, 0, rng), ParameterError);
}

TEST(BatchTest, SeededOrder) {
  RngStream a(5), b(5), c(6);
  const auto first = epoch_batches(1000, 100, a);
  EXPECT_EQ(first, epoch_batches(1000, 100, b));
  EXPECT_NE(first, epoch_batches(1000, 100, c));
  EXPECT_NE(first, epoch_batches(1000, 100, a));  // next epoch reshuffles
  RngStream d(5);
  const auto plain = epoch_batches(10, 4, d, false);
  EXPECT_EQ(plain.front(), (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(BatchTest, IteratorGathersRows) {
  Dataset ds = constant_dataset(7, 1, 0.0);
  for (std::size_t i = 0; i < 7; ++i) {
    ds.labels[i] = i;
    for (auto& v : ds.images.item(i)) v = static_cast<double>(i);
  }
  RngStream rng(8);
  BatchIter it(ds, 3, rng);
  EXPECT_EQ(it.batch_count(), 3u);
  std::size_t total = 0;
  while (auto batch = it.next()) {
    for (std::size_t b = 0; b < batch->labels.size(); ++b) {
      EXPECT_EQ(batch->images(b, 0, 2, 2), static_cast<double>(batch->labels[b]));
    }
    total += batch->labels.size();
  }
  EXPECT_EQ(total, 7u);
}

}  // namespace
}  // namespace mpd
