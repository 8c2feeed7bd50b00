#include <gtest/gtest.h>

#include <cmath>

#include "ktcaa/aa.hpp"
#include "ktcaa/rng.hpp"

using namespace ktcaa;

namespace {

// Independent scalar oracle: per-pixel luma, direct 2D product-kernel
// convolution (no separability), same reflect indexing, dodge with a floored
// denominator.
Image<double> sketch_oracle(const Image<double>& img, double sigma, double guard) {
  const long h = static_cast<long>(img.height), w = static_cast<long>(img.width);
  const long radius = static_cast<long>(std::ceil(2.0 * sigma));
  std::vector<double> k1(2 * radius + 1);
  double ks = 0;
  for (long i = -radius; i <= radius; ++i) {
    k1[i + radius] = std::exp(-double(i * i) / (2 * sigma * sigma));
    ks += k1[i + radius];
  }
  for (double& v : k1) v /= ks;

  auto reflect = [](long i, long n) {
    while (i < 0 || i >= n) {
      if (i < 0) i = -i;
      if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
  };
  auto gray_at = [&](long y, long x) {
    return 0.299 * img.at(size_t(y), size_t(x), 0) + 0.587 * img.at(size_t(y), size_t(x), 1) +
           0.114 * img.at(size_t(y), size_t(x), 2);
  };

  Image<double> out(img.height, img.width);
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double blur = 0;
      for (long dy = -radius; dy <= radius; ++dy)
        for (long dx = -radius; dx <= radius; ++dx) {
          const long yy = reflect(y + dy, h), xx = reflect(x + dx, w);
          blur += k1[dy + radius] * k1[dx + radius] * (1.0 - gray_at(yy, xx));
        }
      const double g = gray_at(y, x);
      const double v = std::clamp(g / std::max(1.0 - blur, guard), 0.0, 1.0);
      for (size_t c = 0; c < 3; ++c) out.at(size_t(y), size_t(x), c) = v;
    }
  return out;
}

Image<double> random_image(std::size_t h, std::size_t w, Rng& rng) {
  Image<double> img(h, w);
  for (auto& v : img.data) v = rng.uniform();
  return img;
}

}  // namespace

TEST(SketchTransform, ConstantColorGivesConstantAboveLuma) {
  Image<double> img(16, 16);
  for (std::size_t i = 0; i < img.size(); i += 3) {
    img.data[i] = 0.3;
    img.data[i + 1] = 0.5;
    img.data[i + 2] = 0.7;
  }
  const double luma = 0.299 * 0.3 + 0.587 * 0.5 + 0.114 * 0.7;
  const auto out = sketch_transform(img);
  const double v0 = out.data[0];
  EXPECT_GE(v0, luma);
  for (double v : out.data) EXPECT_DOUBLE_EQ(v, v0);
}

TEST(SketchTransform, PureWhiteIsExactlyOne) {
  Image<double> img(12, 10);
  img.fill(1.0);
  const auto out = sketch_transform(img);
  for (double v : out.data) EXPECT_EQ(v, 1.0);
}

TEST(SketchTransform, ChannelsIdentical) {
  Rng rng(5);
  const auto img = random_image(20, 12, rng);
  const auto out = sketch_transform(img);
  for (std::size_t i = 0; i < out.size(); i += 3) {
    EXPECT_EQ(out.data[i], out.data[i + 1]);
    EXPECT_EQ(out.data[i], out.data[i + 2]);
  }
}

TEST(SketchTransform, Deterministic) {
  Rng rng(6);
  const auto img = random_image(16, 16, rng);
  const auto a = sketch_transform(img);
  const auto b = sketch_transform(img);
  EXPECT_EQ(a.data, b.data);
}

TEST(SketchTransform, BlackDotOnWhiteMatchesScalarOracle) {
  Image<double> img(16, 12);
  img.fill(1.0);
  for (std::size_t c = 0; c < 3; ++c) img.at(7, 5, c) = 0.0;
  const auto out = sketch_transform(img);
  const auto ref = sketch_oracle(img, 2.0, 1e-4);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out.data[i], ref.data[i], 1e-6);
  // near-white background, localized dark dot
  EXPECT_LT(out.at(7, 5, 0), 0.1);
  EXPECT_GT(out.at(0, 0, 0), 0.9);
}

TEST(SketchTransform, RandomImagesMatchScalarOracle) {
  Rng rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    const auto img = random_image(24, 16, rng);
    const auto out = sketch_transform(img);
    const auto ref = sketch_oracle(img, 2.0, 1e-4);
    for (std::size_t i = 0; i < out.size(); ++i) ASSERT_NEAR(out.data[i], ref.data[i], 1e-6);
  }
}

TEST(SampleRect, BoundsAndAreaOver10kDraws) {
  Rng rng(0);
  const std::size_t h = 64, w = 32;
  for (int i = 0; i < 10000; ++i) {
    const Rect r = sample_rect(rng, h, w);
    ASSERT_TRUE(r.valid_for(h, w));
    ASSERT_GE(r.height, 1u);
    ASSERT_GE(r.width, 1u);
    // area within [0.2, 0.5] up to integer rounding of +-1 pixel per side
    const double hi = double(r.height + 1) * double(r.width + 1);
    const double lo = double(r.height - 1) * double(r.width - 1);
    ASSERT_GE(hi, 0.2 * h * w) << r.height << "x" << r.width;
    ASSERT_LE(lo, 0.5 * h * w) << r.height << "x" << r.width;
  }
}

TEST(SampleRect, FallbackReachableOn8x8) {
  Rng rng(0);
  const Rect fallback{2, 2, 4, 4};  // centered, area 0.25, aspect 1 on 8x8
  int fallback_count = 0;
  for (int i = 0; i < 10000; ++i) {
    const Rect r = sample_rect(rng, 8, 8);
    ASSERT_TRUE(r.valid_for(8, 8));
    if (r == fallback) ++fallback_count;
  }
  EXPECT_GT(fallback_count, 0);
}

TEST(SampleRect, FixedSeedIdenticalSequence) {
  Rng a(9), b(9);
  for (int i = 0; i < 100; ++i) EXPECT_TRUE(sample_rect(a, 64, 32) == sample_rect(b, 64, 32));
}

TEST(LocalSketchReplace, FullRectEqualsSketch) {
  Rng rng(3);
  const auto rgb = random_image(16, 12, rng);
  const auto sketch = random_image(16, 12, rng);
  const auto out = local_sketch_replace(rgb, sketch, Rect{0, 0, 16, 12});
  EXPECT_EQ(out.data, sketch.data);
}

TEST(LocalSketchReplace, EmptyRectEqualsRgb) {
  Rng rng(3);
  const auto rgb = random_image(16, 12, rng);
  const auto sketch = random_image(16, 12, rng);
  const auto out = local_sketch_replace(rgb, sketch, Rect{});
  EXPECT_EQ(out.data, rgb.data);
}

TEST(LocalSketchReplace, TopHalfExactPerElement) {
  Rng rng(4);
  const auto rgb = random_image(16, 12, rng);
  const auto sketch = random_image(16, 12, rng);
  const Rect top_half{0, 0, 8, 12};
  const auto out = local_sketch_replace(rgb, sketch, top_half);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 12; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        EXPECT_EQ(out.at(y, x, c), y < 8 ? sketch.at(y, x, c) : rgb.at(y, x, c));
}

TEST(LocalSketchReplace, Idempotent) {
  Rng rng(5);
  const auto rgb = random_image(16, 12, rng);
  const auto sketch = random_image(16, 12, rng);
  const Rect r{2, 3, 7, 5};
  const auto once = local_sketch_replace(rgb, sketch, r);
  const auto twice = local_sketch_replace(once, sketch, r);
  EXPECT_EQ(once.data, twice.data);
}

TEST(LocalSketchReplace, ComposesWithSketchTransform) {
  Rng rng(6);
  const auto rgb = random_image(16, 12, rng);
  const auto sketch = sketch_transform(rgb);
  const auto out = local_sketch_replace(rgb, sketch, Rect{0, 0, 16, 12});
  EXPECT_EQ(out.data, sketch.data);
}

TEST(LocalSketchReplace, ShapeMismatchThrows) {
  Image<double> a(16, 12), b(16, 10);
  EXPECT_THROW(local_sketch_replace(a, b, Rect{}), std::invalid_argument);
}

TEST(DeltaNorms, AllOnesMaskEqualsGlobal) {
  Rng rng(7);
  const auto rgb = random_image(16, 12, rng);
  const auto sketch = random_image(16, 12, rng);
  const auto [g, l] = delta_norms(rgb, sketch, mask_from_rect(Rect{0, 0, 16, 12}, 16, 12));
  EXPECT_DOUBLE_EQ(g, l);
}

TEST(DeltaNorms, ZeroMaskGivesZeroLocal) {
  Rng rng(8);
  const auto rgb = random_image(16, 12, rng);
  const auto sketch = random_image(16, 12, rng);
  const auto [g, l] = delta_norms(rgb, sketch, Mask(16, 12));
  EXPECT_EQ(l, 0.0);
  EXPECT_GT(g, 0.0);
}

TEST(DeltaNorms, MatchesScalarOracleAndLocalBound) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const auto rgb = random_image(16, 12, rng);
    const auto sketch = random_image(16, 12, rng);
    Mask mask(16, 12);
    for (auto& m : mask.data) m = rng.bernoulli(0.4) ? 1 : 0;
    const auto [g, l] = delta_norms(rgb, sketch, mask);
    double gs = 0, ls = 0;
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 12; ++x)
        for (std::size_t c = 0; c < 3; ++c) {
          const double d = sketch.at(y, x, c) - rgb.at(y, x, c);
          gs += d * d;
          if (mask.at(y, x)) ls += d * d;
        }
    EXPECT_NEAR(g, std::sqrt(gs), 1e-6);
    EXPECT_NEAR(l, std::sqrt(ls), 1e-6);
    EXPECT_LE(l, g + 1e-12);
  }
}

TEST(Rect, ValidityRules) {
  EXPECT_TRUE((Rect{0, 0, 4, 4}).valid_for(8, 8));
  EXPECT_FALSE((Rect{5, 0, 4, 4}).valid_for(8, 8));
  EXPECT_FALSE((Rect{0, 0, 0, 3}).valid_for(8, 8));  // half-empty is invalid
  EXPECT_TRUE(Rect{}.valid_for(8, 8));
  EXPECT_THROW(mask_from_rect(Rect{6, 6, 4, 4}, 8, 8), std::invalid_argument);
}
