#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "mpdrop/random.hpp"
#include "mpdrop/tensor.hpp"

namespace mpd {
namespace {

TEST(TensorTest, NewIsFilled) {
  const auto t = tensor_new<double>({2, 3, 4, 5}, 0.0);
  EXPECT_EQ(t.size(), 120u);
  EXPECT_TRUE(std::all_of(t.data().begin(), t.data().end(), [](double v) { return v == 0.0; }));
  const auto ones = tensor_new<double>({1, 1, 3, 3}, 1.5);
  EXPECT_EQ(std::accumulate(ones.data().begin(), ones.data().end(), 0.0), 13.5);
  EXPECT_EQ(tensor_new<double>({0, 3, 4, 4}, 1.0).size(), 0u);
}

TEST(TensorTest, OverflowingShapeIsSizeError) {
  const std::size_t big = std::size_t{1} << 32;
  EXPECT_THROW((void)tensor_new<double>({big, big, 2, 1}, 0.0), SizeError);
}

TEST(TensorTest, RowMajorLayoutRoundTrip) {
  Tensor4<double> t({2, 3, 4, 5});
  std::iota(t.data().begin(), t.data().end(), 0.0);
  std::size_t flat = 0;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t w = 0; w < 5; ++w) {
          EXPECT_EQ(t.index(b, c, h, w), flat);
          EXPECT_EQ(t(b, c, h, w), static_cast<double>(flat));
          ++flat;
        }
  EXPECT_EQ(t.item(1)[0], 60.0);
  EXPECT_EQ(t.reshaped({2, 60, 1, 1})(1, 59, 0, 0), 119.0);
  EXPECT_THROW((void)t.reshaped({2, 61, 1, 1}), GeometryError);
}

TEST(TensorTest, DataLengthMustMatchShape) {
  EXPECT_THROW(Tensor4<double>({1, 1, 2, 2}, std::vector<double>(3)), GeometryError);
  EXPECT_THROW(require_same_shape({1, 1, 2, 2}, {1, 1, 2, 3}, "x"), GeometryError);
}

TEST(RngTest, SameSeedSameStream) {
  RngStream a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
  EXPECT_EQ(a.counter(), 1000u);
}

TEST(RngTest, ForkAndSubstream) {
  RngStream a(7), b(7);
  RngStream fa = a.fork();
  RngStream fb = b.fork();
  EXPECT_EQ(fa.next_u64(), fb.next_u64());
  EXPECT_EQ(a.counter(), 1u);
  const RngStream parent(9);
  RngStream s0 = parent.substream(0), s0b = parent.substream(0), s1 = parent.substream(1);
  EXPECT_EQ(parent.counter(), 0u);
  const auto x = s0.next_u64();
  EXPECT_EQ(x, s0b.next_u64());
  EXPECT_NE(x, s1.next_u64());
}

TEST(RngTest, UniformAndBelowRanges) {
  RngStream rng(5);
  for (int i = 0; i < 100000; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(rng.below(7), 7u);
  }
  EXPECT_THROW((void)rng.below(0), ParameterError);
}

TEST(RngTest, BernoulliMaskFraction) {
  RngStream rng(2024);
  const auto mask = rng_bernoulli_mask<double>(rng, {1, 1, 1000, 1000}, RetainProb(0.5));
  const double ones = std::accumulate(mask.data().begin(), mask.data().end(), 0.0);
  EXPECT_GE(ones / 1e6, 0.498);
  EXPECT_LE(ones / 1e6, 0.502);
  EXPECT_TRUE(std::all_of(mask.data().begin(), mask.data().end(),
                          [](double v) { return v == 0.0 || v == 1.0; }));
  const auto all = rng_bernoulli_mask<double>(rng, {1, 1, 100, 100}, RetainProb(1.0));
  EXPECT_EQ(std::accumulate(all.data().begin(), all.data().end(), 0.0), 10000.0);
}

TEST(RngTest, GaussianMoments) {
  RngStream rng(3);
  const auto g = rng_gaussian<double>(rng, {1, 1, 1000, 1000}, 0.0, 0.1);
  const double mean = std::accumulate(g.data().begin(), g.data().end(), 0.0) / 1e6;
  double var = 0.0;
  for (double v : g.data()) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / (1e6 - 1));
  EXPECT_NEAR(mean, 0.0, 0.0005);
  EXPECT_GE(sd, 0.0995);
  EXPECT_LE(sd, 0.1005);
  const auto flat = rng_gaussian<double>(rng, {1, 1, 10, 10}, 3.0, 0.0);
  EXPECT_TRUE(std::all_of(flat.data().begin(), flat.data().end(), [](double v) { return v == 3.0; }));
  EXPECT_THROW((void)rng_gaussian<double>(rng, {1, 1, 1, 1}, 0.0, -1.0), ParameterError);
}

}  // namespace
}  // namespace mpd
