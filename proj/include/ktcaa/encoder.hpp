#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ktcaa/image.hpp"
#include "ktcaa/nn.hpp"
#include "ktcaa/parallel.hpp"
#include "ktcaa/rng.hpp"
#include "ktcaa/tensor.hpp"
#include "ktcaa/types.hpp"

namespace ktcaa {

// Layer widths of the dual-path feature extractor: two stride-2 stem convs
// per modality, a shared stride-1 trunk, global average pooling, an embedding
// head with L2 normalization, and an identity classifier on the
// pre-normalization embedding.
struct EncoderProfile {
  std::string name = "desk";
  std::size_t stem1 = 16;
  std::size_t stem2 = 32;
  std::size_t trunk1 = 64;
  std::size_t trunk2 = 64;
  std::size_t embed_dim = 64;
  std::size_t n_classes = 2;

  static EncoderProfile desk(std::size_t n_classes) {
    EncoderProfile p;
    p.n_classes = n_classes;
    return p;
  }

  // Small profile for fast unit tests.
  static EncoderProfile tiny(std::size_t n_classes) {
    return EncoderProfile{"tiny", 4, 8, 8, 8, 4, n_classes};
  }

  static EncoderProfile by_name(const std::string& name, std::size_t n_classes) {
    if (name == "desk") return desk(n_classes);
    if (name == "tiny") return tiny(n_classes);
    if (name == "resnet50")
      throw std::runtime_error(
          "encoder profile 'resnet50' is declared but unsupported at desk scale");
    throw std::runtime_error("unknown encoder profile '" + name + "'");
  }

  bool operator==(const EncoderProfile&) const = default;
};

template <typename T>
struct EncoderParams {
  EncoderProfile profile;
  nn::ConvParams<T> rgb1, rgb2, sk1, sk2, tr1, tr2;
  nn::DenseParams<T> embed, cls;

  // Fixed tensor visiting order; serialization, updates and the init draw
  // order all follow this list.
  std::vector<std::pair<std::string, Tensor<T>*>> tensors() {
    return {{"rgb_stem.conv1.w", &rgb1.w}, {"rgb_stem.conv1.b", &rgb1.b},
            {"rgb_stem.conv2.w", &rgb2.w}, {"rgb_stem.conv2.b", &rgb2.b},
            {"sketch_stem.conv1.w", &sk1.w}, {"sketch_stem.conv1.b", &sk1.b},
            {"sketch_stem.conv2.w", &sk2.w}, {"sketch_stem.conv2.b", &sk2.b},
            {"trunk.conv1.w", &tr1.w},     {"trunk.conv1.b", &tr1.b},
            {"trunk.conv2.w", &tr2.w},     {"trunk.conv2.b", &tr2.b},
            {"embed.w", &embed.w},         {"embed.b", &embed.b},
            {"classifier.w", &cls.w},      {"classifier.b", &cls.b}};
  }
  std::vector<std::pair<std::string, const Tensor<T>*>> tensors() const {
    auto* self = const_cast<EncoderParams*>(this);
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    for (auto& [name, t] : self->tensors()) out.emplace_back(name, t);
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : tensors()) n += t->size();
    return n;
  }
};

namespace detail {

template <typename T>
nn::ConvParams<T> make_conv(std::size_t in_ch, std::size_t out_ch, std::size_t stride) {
  nn::ConvParams<T> p;
  p.spec = {in_ch, out_ch, stride};
  p.w = Tensor<T>({out_ch, in_ch * 9});
  p.b = Tensor<T>({out_ch});
  return p;
}

template <typename T>
nn::DenseParams<T> make_dense(std::size_t in, std::size_t out) {
  nn::DenseParams<T> p;
  p.w = Tensor<T>({out, in});
  p.b = Tensor<T>({out});
  return p;
}

}  // namespace detail

template <typename T>
EncoderParams<T> make_encoder_params(const EncoderProfile& prof) {
  EncoderParams<T> p;
  p.profile = prof;
  p.rgb1 = detail::make_conv<T>(3, prof.stem1, 2);
  p.rgb2 = detail::make_conv<T>(prof.stem1, prof.stem2, 2);
  p.sk1 = detail::make_conv<T>(3, prof.stem1, 2);
  p.sk2 = detail::make_conv<T>(prof.stem1, prof.stem2, 2);
  p.tr1 = detail::make_conv<T>(prof.stem2, prof.trunk1, 1);
  p.tr2 = detail::make_conv<T>(prof.trunk1, prof.trunk2, 1);
  p.embed = detail::make_dense<T>(prof.trunk2, prof.embed_dim);
  p.cls = detail::make_dense<T>(prof.embed_dim, prof.n_classes);
  return p;
}

// Fan-in scaled uniform init (bound sqrt(6/fan_in), the rectifier variant)
// for weights. Weight tensors are filled in the tensors() order, elementwise,
// from one seeded stream. Biases get a small positive constant: with zero
// biases, any conv output whose receptive field is fully relu-dead sits
// exactly on the relu kink, which breaks finite-difference gradient checks.
template <typename T>
EncoderParams<T> init_encoder(const EncoderProfile& prof, std::uint64_t seed) {
  EncoderParams<T> p = make_encoder_params<T>(prof);
  Rng rng(seed);
  for (auto& [name, t] : p.tensors()) {
    if (name.ends_with(".b")) {
      t->fill(T(0.01));
      continue;
    }
    const std::size_t fan_in = t->shape.size() >= 2 ? t->shape[1] : 1;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (T& v : t->data) v = static_cast<T>(rng.uniform(-bound, bound));
  }
  return p;
}

template <typename T>
EncoderParams<T> zeros_like(const EncoderParams<T>& p) {
  return make_encoder_params<T>(p.profile);
}

template <typename T>
void params_axpy(T a, const EncoderParams<T>& x, EncoderParams<T>& y) {
  auto xs = x.tensors();
  auto ys = y.tensors();
  for (std::size_t i = 0; i < xs.size(); ++i) axpy(a, *xs[i].second, *ys[i].second);
}

template <typename T>
void params_scale(EncoderParams<T>& p, T a) {
  for (auto& [name, t] : p.tensors())
    for (T& v : t->data) v *= a;
}

// --- forward / backward ----------------------------------------------------

template <typename T>
struct EncodeItem {
  const Image<T>* image;
  Modality modality;
};

template <typename T>
struct ImageCache {
  std::vector<T> col1, col2, col3, col4;
  std::vector<T> act1, act2, act3, act4;  // post-relu
  std::vector<T> pooled, prenorm, normalized;
  T norm = T(1);
  bool rgb_path = true;
  std::size_t h = 0, w = 0;
  std::size_t h1 = 0, w1 = 0, h2 = 0, w2 = 0;
};

template <typename T>
struct BatchCache {
  std::vector<ImageCache<T>> items;
};

struct EncoderFlags {
  bool augmented_through_rgb_stem = false;
};

template <typename T>
void encoder_forward(const EncoderParams<T>& p, const std::vector<EncodeItem<T>>& batch,
                     const EncoderFlags& flags, ThreadPool& pool, BatchCache<T>& cache) {
  // Existing per-image buffers are reused; every field is rewritten below.
  cache.items.resize(batch.size());
  if (batch.empty()) return;
  const std::size_t h = batch[0].image->height, w = batch[0].image->width;
  if (h < 8 || w < 8) throw std::invalid_argument("encoder_forward: images must be >= 8x8");
  for (const auto& item : batch) {
    if (item.image->height != h || item.image->width != w)
      throw std::invalid_argument("encoder_forward: images in a batch must share one shape");
    if (item.modality != Modality::kRgb && item.modality != Modality::kSketch &&
        item.modality != Modality::kAugmented)
      throw std::invalid_argument("encoder_forward: unknown modality tag");
  }

  pool.parallel_for(batch.size(), [&](std::size_t i) {
    const Image<T>& img = *batch[i].image;
    ImageCache<T>& c = cache.items[i];
    c.h = h;
    c.w = w;
    switch (batch[i].modality) {
      case Modality::kRgb: c.rgb_path = true; break;
      case Modality::kSketch: c.rgb_path = false; break;
      case Modality::kAugmented: c.rgb_path = flags.augmented_through_rgb_stem; break;
    }
    // HWC -> CHW
    std::vector<T> x(3 * h * w);
    for (std::size_t cch = 0; cch < 3; ++cch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) x[(cch * h + y) * w + xx] = img.at(y, xx, cch);

    const nn::ConvParams<T>& s1 = c.rgb_path ? p.rgb1 : p.sk1;
    const nn::ConvParams<T>& s2 = c.rgb_path ? p.rgb2 : p.sk2;

    nn::conv_forward(s1, x.data(), h, w, c.col1, c.act1, c.h1, c.w1);
    nn::relu_inplace(c.act1);
    nn::conv_forward(s2, c.act1.data(), c.h1, c.w1, c.col2, c.act2, c.h2, c.w2);
    nn::relu_inplace(c.act2);
    std::size_t h3, w3, h4, w4;
    nn::conv_forward(p.tr1, c.act2.data(), c.h2, c.w2, c.col3, c.act3, h3, w3);
    nn::relu_inplace(c.act3);
    nn::conv_forward(p.tr2, c.act3.data(), h3, w3, c.col4, c.act4, h4, w4);
    nn::relu_inplace(c.act4);

    const std::size_t spatial = h4 * w4;
    c.pooled.assign(p.profile.trunk2, T(0));
    for (std::size_t ch = 0; ch < p.profile.trunk2; ++ch) {
      T s = 0;
      const T* plane = c.act4.data() + ch * spatial;
      for (std::size_t j = 0; j < spatial; ++j) s += plane[j];
      c.pooled[ch] = s / static_cast<T>(spatial);
    }
    c.prenorm.assign(p.profile.embed_dim, T(0));
    nn::dense_forward(p.embed, c.pooled.data(), c.prenorm.data());
    c.normalized.assign(p.profile.embed_dim, T(0));
    c.norm = nn::l2_normalize(c.prenorm.data(), p.profile.embed_dim, c.normalized.data());
  });
}

// Backpropagates d(normalized) and/or d(prenorm) seeds. Parameter gradients
// are accumulated per image and reduced in batch order, so the result does
// not depend on the thread count.
template <typename T>
void encoder_backward(const EncoderParams<T>& p, const BatchCache<T>& cache,
                      const std::vector<std::vector<T>>& d_normalized,
                      const std::vector<std::vector<T>>& d_prenorm, ThreadPool& pool,
                      EncoderParams<T>* grads, std::vector<Image<T>>* d_inputs) {
  const std::size_t n = cache.items.size();
  if (!d_normalized.empty() && d_normalized.size() != n)
    throw std::invalid_argument("encoder_backward: d_normalized size mismatch");
  if (!d_prenorm.empty() && d_prenorm.size() != n)
    throw std::invalid_argument("encoder_backward: d_prenorm size mismatch");

  std::vector<EncoderParams<T>> per_image;
  if (grads) per_image.assign(n, zeros_like(*grads));
  if (d_inputs) d_inputs->assign(n, Image<T>{});

  pool.parallel_for(n, [&](std::size_t i) {
    const ImageCache<T>& c = cache.items[i];
    const std::size_t d = p.profile.embed_dim;
    std::vector<T> de(d, T(0));
    if (!d_normalized.empty() && !d_normalized[i].empty())
      nn::l2_normalize_backward(c.normalized.data(), c.norm, d_normalized[i].data(), d,
                                de.data());
    if (!d_prenorm.empty() && !d_prenorm[i].empty())
      for (std::size_t j = 0; j < d; ++j) de[j] += d_prenorm[i][j];

    EncoderParams<T>* g = grads ? &per_image[i] : nullptr;

    std::vector<T> dpooled(p.profile.trunk2, T(0));
    nn::dense_backward(p.embed, c.pooled.data(), de.data(), g ? &g->embed : nullptr,
                       dpooled.data());

    const std::size_t h3 = c.h2, w3 = c.w2, h4 = c.h2, w4 = c.w2;  // trunk is stride 1
    const std::size_t spatial = h4 * w4;
    std::vector<T> dact4(p.profile.trunk2 * spatial);
    for (std::size_t ch = 0; ch < p.profile.trunk2; ++ch) {
      const T v = dpooled[ch] / static_cast<T>(spatial);
      T* plane = dact4.data() + ch * spatial;
      for (std::size_t j = 0; j < spatial; ++j) plane[j] = v;
    }
    nn::relu_backward_inplace(c.act4, dact4);

    std::vector<T> scratch;
    std::vector<T> dact3(p.profile.trunk1 * h3 * w3, T(0));
    nn::conv_backward(p.tr2, c.col4, dact4.data(), h3, w3, g ? &g->tr2 : nullptr, dact3.data(),
                      scratch);
    nn::relu_backward_inplace(c.act3, dact3);

    std::vector<T> dact2(p.profile.stem2 * c.h2 * c.w2, T(0));
    nn::conv_backward(p.tr1, c.col3, dact3.data(), c.h2, c.w2, g ? &g->tr1 : nullptr,
                      dact2.data(), scratch);
    nn::relu_backward_inplace(c.act2, dact2);

    const nn::ConvParams<T>& s1 = c.rgb_path ? p.rgb1 : p.sk1;
    const nn::ConvParams<T>& s2 = c.rgb_path ? p.rgb2 : p.sk2;
    nn::ConvParams<T>* gs1 = nullptr;
    nn::ConvParams<T>* gs2 = nullptr;
    if (g) {
      gs1 = c.rgb_path ? &g->rgb1 : &g->sk1;
      gs2 = c.rgb_path ? &g->rgb2 : &g->sk2;
    }

    std::vector<T> dact1(p.profile.stem1 * c.h1 * c.w1, T(0));
    nn::conv_backward(s2, c.col2, dact2.data(), c.h1, c.w1, gs2, dact1.data(), scratch);
    nn::relu_backward_inplace(c.act1, dact1);

    std::vector<T> dx;
    if (d_inputs) {
      dx.assign(3 * c.h * c.w, T(0));
      nn::conv_backward(s1, c.col1, dact1.data(), c.h, c.w, gs1, dx.data(), scratch);
      Image<T>& di = (*d_inputs)[i];
      di = Image<T>(c.h, c.w);
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t y = 0; y < c.h; ++y)
          for (std::size_t xx = 0; xx < c.w; ++xx)
            di.at(y, xx, ch) = dx[(ch * c.h + y) * c.w + xx];
    } else {
      nn::conv_backward(s1, c.col1, dact1.data(), c.h, c.w, gs1, static_cast<T*>(nullptr),
                        scratch);
    }
  });

  if (grads)
    for (std::size_t i = 0; i < n; ++i) params_axpy(T(1), per_image[i], *grads);
}

// Public encode operation: normalized embeddings for a batch of samples.
template <typename T>
std::vector<std::vector<T>> encode(const EncoderParams<T>& p,
                                   const std::vector<Sample<T>>& samples,
                                   const EncoderFlags& flags, ThreadPool& pool) {
  std::vector<EncodeItem<T>> items;
  items.reserve(samples.size());
  for (const auto& s : samples) items.push_back({&s.image, s.modality});
  BatchCache<T> cache;
  encoder_forward(p, items, flags, pool, cache);
  std::vector<std::vector<T>> out;
  out.reserve(samples.size());
  for (auto& c : cache.items) out.push_back(c.normalized);
  return out;
}

// Identity logits from pre-normalization embeddings.
template <typename T>
std::vector<std::vector<T>> classify(const nn::DenseParams<T>& head,
                                     const std::vector<std::vector<T>>& prenorm) {
  const std::size_t out = head.b.size();
  const std::size_t in = head.w.size() / out;
  std::vector<std::vector<T>> logits(prenorm.size());
  for (std::size_t i = 0; i < prenorm.size(); ++i) {
    if (prenorm[i].size() != in)
      throw std::invalid_argument("classify: embedding dimension mismatch");
    logits[i].assign(out, T(0));
    nn::dense_forward(head, prenorm[i].data(), logits[i].data());
  }
  return logits;
}

}  // namespace ktcaa
