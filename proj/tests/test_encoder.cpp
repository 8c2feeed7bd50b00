#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "fd_check.hpp"
#include "ktcaa/encoder.hpp"
#include "ktcaa/losses.hpp"

using namespace ktcaa;

namespace {

template <typename T>
std::vector<Sample<T>> make_batch(std::size_t n, std::size_t h, std::size_t w,
                                  std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample<T>> out;
  for (std::size_t i = 0; i < n; ++i) {
    Sample<T> s;
    s.image = Image<T>(h, w);
    for (auto& v : s.image.data) v = static_cast<T>(rng.uniform());
    s.identity = static_cast<int>(i / 2);
    s.modality = Modality::kRgb;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST(Encoder, ShapesAndUnitNorm) {
  ThreadPool pool(2);
  const auto params = init_encoder<float>(EncoderProfile::desk(10), 0);
  const auto batch = make_batch<float>(4, 64, 32, 1);
  const auto emb = encode(params, batch, {}, pool);
  ASSERT_EQ(emb.size(), 4u);
  for (const auto& e : emb) {
    ASSERT_EQ(e.size(), 64u);
    double n = 0;
    for (float v : e) n += double(v) * v;
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
  }
}

TEST(Encoder, ModalityRoutesDifferentStems) {
  ThreadPool pool(1);
  const auto params = init_encoder<float>(EncoderProfile::tiny(3), 0);
  auto batch = make_batch<float>(1, 16, 8, 2);
  const auto as_rgb = encode(params, batch, {}, pool);
  batch[0].modality = Modality::kSketch;
  const auto as_sketch = encode(params, batch, {}, pool);
  double diff = 0;
  for (std::size_t c = 0; c < as_rgb[0].size(); ++c)
    diff += std::abs(double(as_rgb[0][c]) - double(as_sketch[0][c]));
  EXPECT_GT(diff, 1e-3);
}

TEST(Encoder, AugmentedRoutingFlag) {
  ThreadPool pool(1);
  const auto params = init_encoder<float>(EncoderProfile::tiny(3), 0);
  auto batch = make_batch<float>(1, 16, 8, 3);
  batch[0].modality = Modality::kAugmented;
  const auto via_sketch = encode(params, batch, EncoderFlags{false}, pool);
  const auto via_rgb = encode(params, batch, EncoderFlags{true}, pool);
  batch[0].modality = Modality::kSketch;
  const auto sketch = encode(params, batch, {}, pool);
  batch[0].modality = Modality::kRgb;
  const auto rgb = encode(params, batch, {}, pool);
  EXPECT_EQ(via_sketch[0], sketch[0]);
  EXPECT_EQ(via_rgb[0], rgb[0]);
}

TEST(Encoder, DeterministicAcrossCalls) {
  ThreadPool pool(3);
  const auto params = init_encoder<float>(EncoderProfile::tiny(3), 0);
  const auto batch = make_batch<float>(5, 16, 8, 4);
  const auto a = encode(params, batch, {}, pool);
  const auto b = encode(params, batch, {}, pool);
  EXPECT_EQ(a, b);
}

TEST(Encoder, PermutingBatchPermutesOutputs) {
  ThreadPool pool(2);
  const auto params = init_encoder<float>(EncoderProfile::tiny(3), 0);
  auto batch = make_batch<float>(6, 16, 8, 5);
  const auto base = encode(params, batch, {}, pool);
  std::vector<Sample<float>> reversed(batch.rbegin(), batch.rend());
  const auto rev = encode(params, reversed, {}, pool);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(rev[i], base[5 - i]);
}

TEST(Encoder, BatchShapeMismatchThrows) {
  ThreadPool pool(1);
  const auto params = init_encoder<float>(EncoderProfile::tiny(3), 0);
  auto batch = make_batch<float>(2, 16, 8, 6);
  batch[1].image = Image<float>(16, 12);
  EXPECT_THROW(encode(params, batch, {}, pool), std::invalid_argument);
  auto tiny_img = make_batch<float>(1, 4, 4, 7);
  EXPECT_THROW(encode(params, tiny_img, {}, pool), std::invalid_argument);
}

TEST(Encoder, UnknownModalityTagThrows) {
  ThreadPool pool(1);
  const auto params = init_encoder<float>(EncoderProfile::tiny(3), 0);
  auto batch = make_batch<float>(1, 16, 8, 8);
  batch[0].modality = static_cast<Modality>(42);
  EXPECT_THROW(encode(params, batch, {}, pool), std::invalid_argument);
}

TEST(Encoder, DeskParamCountMatchesLayerSpec) {
  const std::size_t c = 50;
  const auto params = make_encoder_params<float>(EncoderProfile::desk(c));
  const std::size_t stem = (16 * 3 * 9 + 16) + (32 * 16 * 9 + 32);
  const std::size_t trunk = (64 * 32 * 9 + 64) + (64 * 64 * 9 + 64);
  const std::size_t embed = 64 * 64 + 64;
  const std::size_t cls = c * 64 + c;
  EXPECT_EQ(params.param_count(), 2 * stem + trunk + embed + cls);
  EXPECT_EQ(params.param_count(), 73010u);
}

TEST(Classify, AffineContract) {
  nn::DenseParams<float> head;
  head.w = Tensor<float>({3, 4});
  head.b = Tensor<float>({3});
  head.b.data = {0.5f, -1.0f, 2.0f};
  Embeddings<float> zero{std::vector<float>(4, 0.0f)};
  const auto logits = classify(head, zero);
  EXPECT_EQ(logits[0][0], 0.5f);
  EXPECT_EQ(logits[0][1], -1.0f);
  EXPECT_EQ(logits[0][2], 2.0f);
}

TEST(Classify, ConstructedArgmax) {
  nn::DenseParams<float> head;
  head.w = Tensor<float>({3, 4});
  head.b = Tensor<float>({3});
  // row 2 favors coordinate 1
  head.w.data[2 * 4 + 1] = 5.0f;
  Embeddings<float> e{{0.0f, 1.0f, 0.0f, 0.0f}};
  const auto logits = classify(head, e);
  std::size_t argmax = 0;
  for (std::size_t k = 1; k < 3; ++k)
    if (logits[0][k] > logits[0][argmax]) argmax = k;
  EXPECT_EQ(argmax, 2u);
}

TEST(Classify, BatchShape) {
  nn::DenseParams<float> head;
  head.w = Tensor<float>({7, 4});
  head.b = Tensor<float>({7});
  Embeddings<float> e(5, std::vector<float>(4, 0.1f));
  const auto logits = classify(head, e);
  ASSERT_EQ(logits.size(), 5u);
  for (const auto& row : logits) EXPECT_EQ(row.size(), 7u);
  Embeddings<float> bad(1, std::vector<float>(3, 0.0f));
  EXPECT_THROW(classify(head, bad), std::invalid_argument);
}

// ---- gradients -------------------------------------------------------------

namespace {

struct GradFixture {
  ThreadPool pool{1};
  EncoderParams<double> params;
  std::vector<Image<double>> images;
  std::vector<Modality> mods;

  GradFixture() {
    params = init_encoder<double>(EncoderProfile::tiny(3), 12);
    Rng rng(34);
    for (int i = 0; i < 4; ++i) images.push_back(fdcheck::structured_image(16, 8, rng));
    mods = {Modality::kRgb, Modality::kAugmented, Modality::kRgb, Modality::kSketch};
  }

  BatchCache<double> forward(const EncoderParams<double>& p) const {
    std::vector<EncodeItem<double>> items;
    for (std::size_t i = 0; i < images.size(); ++i) items.push_back({&images[i], mods[i]});
    BatchCache<double> cache;
    encoder_forward(p, items, {}, const_cast<ThreadPool&>(pool), cache);
    return cache;
  }
};

}  // namespace

TEST(EncoderGrad, HalfSquaredPrenormMatchesFiniteDifference) {
  // loss = 1/2 sum_i ||prenorm_i||^2, seeded through the prenorm path
  GradFixture fx;
  auto loss_fn = [&fx](const EncoderParams<double>& p) {
    auto cache = fx.forward(p);
    double l = 0;
    for (const auto& item : cache.items)
      for (double v : item.prenorm) l += 0.5 * v * v;
    return l;
  };
  auto cache = fx.forward(fx.params);
  Embeddings<double> d_pre;
  for (const auto& item : cache.items) d_pre.push_back(item.prenorm);
  EncoderParams<double> g = zeros_like(fx.params);
  encoder_backward(fx.params, cache, {}, d_pre, fx.pool, &g,
                   static_cast<std::vector<Image<double>>*>(nullptr));
  Rng coord_rng(77);
  const auto res = fdcheck::run(fx.params, g, loss_fn, 5, coord_rng);
  EXPECT_LT(res.max_rel, 1e-4) << res.worst;
}

TEST(EncoderGrad, LossIndependentBlockHasExactlyZeroGradient) {
  // An embedding-space loss never touches the classifier head.
  GradFixture fx;
  auto cache = fx.forward(fx.params);
  Embeddings<double> d_norm;
  for (const auto& item : cache.items) d_norm.push_back(item.normalized);
  EncoderParams<double> g = zeros_like(fx.params);
  encoder_backward(fx.params, cache, d_norm, {}, fx.pool, &g,
                   static_cast<std::vector<Image<double>>*>(nullptr));
  for (double v : g.cls.w.data) EXPECT_EQ(v, 0.0);
  for (double v : g.cls.b.data) EXPECT_EQ(v, 0.0);
  // RGB-only seeding leaves the sketch stem untouched
  EncoderParams<double> g2 = zeros_like(fx.params);
  Embeddings<double> d_rgb_only = d_norm;
  d_rgb_only[1].assign(4, 0.0);  // augmented sample
  d_rgb_only[3].assign(4, 0.0);  // sketch sample
  encoder_backward(fx.params, cache, d_rgb_only, {}, fx.pool, &g2,
                   static_cast<std::vector<Image<double>>*>(nullptr));
  for (double v : g2.sk1.w.data) EXPECT_EQ(v, 0.0);
  for (double v : g2.sk2.b.data) EXPECT_EQ(v, 0.0);
}

TEST(EncoderGrad, LinearInSeeds) {
  GradFixture fx;
  auto cache = fx.forward(fx.params);
  Rng rng(55);
  Embeddings<double> s1(4, std::vector<double>(4)), s2(4, std::vector<double>(4));
  for (auto& row : s1)
    for (auto& v : row) v = rng.normal();
  for (auto& row : s2)
    for (auto& v : row) v = rng.normal();
  const double a = 2.75;
  Embeddings<double> combo(4, std::vector<double>(4));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 4; ++c) combo[i][c] = a * s1[i][c] + s2[i][c];

  auto backward = [&](const Embeddings<double>& seed) {
    EncoderParams<double> g = zeros_like(fx.params);
    encoder_backward(fx.params, cache, seed, {}, fx.pool, &g,
                     static_cast<std::vector<Image<double>>*>(nullptr));
    return g;
  };
  auto g1 = backward(s1), g2 = backward(s2), gc = backward(combo);
  auto l1 = g1.tensors(), l2 = g2.tensors(), lc = gc.tensors();
  for (std::size_t t = 0; t < l1.size(); ++t)
    for (std::size_t i = 0; i < l1[t].second->size(); ++i)
      EXPECT_NEAR(lc[t].second->data[i],
                  a * l1[t].second->data[i] + l2[t].second->data[i], 1e-8);
}

TEST(EncoderGrad, ComposedLossesSmokeCheck) {
  // Small-profile version of the full acceptance gradient check.
  GradFixture fx;
  const std::vector<int> labels{0, 0, 1, 2};
  auto loss_fn = [&](const EncoderParams<double>& p) {
    auto cache = fx.forward(p);
    Embeddings<double> emb(4);
    for (int i = 0; i < 4; ++i) emb[i] = cache.items[i].normalized;
    const double lc = info_nce<double>({emb[0], emb[2]}, {emb[1], emb[3]}, {0, 1}, 0.1);
    const double la = align_loss<double>({emb[0], emb[2]}, {emb[1], emb[3]});
    return lc + la;
  };
  auto cache = fx.forward(fx.params);
  Embeddings<double> emb(4);
  for (int i = 0; i < 4; ++i) emb[i] = cache.items[i].normalized;
  Embeddings<double> da, dp, dac, daa;
  info_nce<double>({emb[0], emb[2]}, {emb[1], emb[3]}, {0, 1}, 0.1, &da, &dp);
  align_loss<double>({emb[0], emb[2]}, {emb[1], emb[3]}, &dac, &daa);
  Embeddings<double> d_norm(4, std::vector<double>(4, 0.0));
  for (int c = 0; c < 4; ++c) {
    d_norm[0][c] = da[0][c] + dac[0][c];
    d_norm[2][c] = da[1][c] + dac[1][c];
    d_norm[1][c] = dp[0][c] + daa[0][c];
    d_norm[3][c] = dp[1][c] + daa[1][c];
  }
  EncoderParams<double> g = zeros_like(fx.params);
  encoder_backward(fx.params, cache, d_norm, {}, fx.pool, &g,
                   static_cast<std::vector<Image<double>>*>(nullptr));
  Rng coord_rng(78);
  const auto res = fdcheck::run(fx.params, g, loss_fn, 5, coord_rng);
  EXPECT_LT(res.max_rel, 1e-4) << res.worst;
}

TEST(EncoderGrad, InputGradientMatchesFiniteDifference) {
  GradFixture fx;
  auto cache = fx.forward(fx.params);
  Embeddings<double> d_norm;
  for (const auto& item : cache.items) d_norm.push_back(item.normalized);
  std::vector<Image<double>> d_inputs;
  encoder_backward(fx.params, cache, d_norm, {}, fx.pool,
                   static_cast<EncoderParams<double>*>(nullptr), &d_inputs);
  // loss = sum_i <normalized_i(x), const seed_i> with seed = normalized at the base point
  auto loss_at = [&](const std::vector<Image<double>>& imgs) {
    std::vector<EncodeItem<double>> items;
    for (std::size_t i = 0; i < imgs.size(); ++i) items.push_back({&imgs[i], fx.mods[i]});
    BatchCache<double> c2;
    encoder_forward(fx.params, items, {}, fx.pool, c2);
    double l = 0;
    for (std::size_t i = 0; i < imgs.size(); ++i)
      for (std::size_t c = 0; c < 4; ++c) l += c2.items[i].normalized[c] * d_norm[i][c];
    return l;
  };
  Rng rng(91);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t img = rng.uniform_index(4);
    const std::size_t idx = rng.uniform_index(fx.images[img].size());
    auto imgs = fx.images;
    const double h = 1e-6;
    imgs[img].data[idx] += h;
    const double lp = loss_at(imgs);
    imgs[img].data[idx] -= 2 * h;
    const double lm = loss_at(imgs);
    const double fd = (lp - lm) / (2 * h);
    EXPECT_NEAR(d_inputs[img].data[idx], fd, 1e-5);
  }
}
