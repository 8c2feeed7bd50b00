#pragma once

#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ktcaa/aa.hpp"
#include "ktcaa/checkpoint.hpp"
#include "ktcaa/config.hpp"
#include "ktcaa/data.hpp"
#include "ktcaa/encoder.hpp"
#include "ktcaa/ktc.hpp"
#include "ktcaa/losses.hpp"
#include "ktcaa/parallel.hpp"
#include "ktcaa/rng.hpp"
#include "ktcaa/types.hpp"

namespace ktcaa {

// In-memory training corpus: meta-train RGB pool (with dense labels for the
// classifier) plus the episode pools used for meta-testing.
template <typename T>
struct TrainData {
  std::vector<Sample<T>> train_rgb;  // identity = original label
  IdentityMap train_ids;
  std::vector<std::vector<std::size_t>> by_dense_id;  // indices into train_rgb
  std::set<int> train_id_set;

  std::vector<Sample<T>> episode_support;  // RGB
  std::vector<Sample<T>> episode_query;    // sketch

  std::size_t image_height = 0, image_width = 0;
};

template <typename T>
TrainData<T> load_train_data(const DatasetManifest& manifest) {
  TrainData<T> d;
  auto train_all = load_split_samples<T>(manifest, "meta_train");
  for (auto& s : train_all)
    if (s.modality == Modality::kRgb) d.train_rgb.push_back(std::move(s));
  if (d.train_rgb.empty())
    throw std::runtime_error("load_train_data: no RGB meta_train samples in manifest");
  for (const auto& s : d.train_rgb) d.train_id_set.insert(s.identity);
  d.train_ids = IdentityMap::from_ids(d.train_id_set);
  d.by_dense_id.assign(d.train_ids.dense_to_original.size(), {});
  for (std::size_t i = 0; i < d.train_rgb.size(); ++i)
    d.by_dense_id[static_cast<std::size_t>(d.train_ids.dense(d.train_rgb[i].identity))]
        .push_back(i);
  d.episode_support = load_split_samples<T>(manifest, "support");
  d.episode_query = load_split_samples<T>(manifest, "query");
  d.image_height = d.train_rgb[0].image.height;
  d.image_width = d.train_rgb[0].image.width;
  for (const auto& s : d.train_rgb)
    if (s.image.height != d.image_height || s.image.width != d.image_width)
      throw std::runtime_error("load_train_data: meta_train images must share one shape");
  return d;
}

template <typename T>
struct BatchItem {
  const Sample<T>* sample;
  int dense_label;
};

// PK sampling: batch_identities distinct identities, batch_instances samples
// each, all without replacement. Draw order: identity selection first, then
// per-identity instances, Fisher-Yates partial shuffles throughout.
template <typename T>
std::vector<BatchItem<T>> sample_meta_train_batch(const TrainData<T>& data, Rng& rng,
                                                  const TrainConfig& cfg) {
  const std::size_t p = static_cast<std::size_t>(cfg.batch_identities);
  const std::size_t k = static_cast<std::size_t>(cfg.batch_instances);
  std::vector<std::size_t> eligible;
  for (std::size_t id = 0; id < data.by_dense_id.size(); ++id)
    if (data.by_dense_id[id].size() >= k) eligible.push_back(id);
  if (data.by_dense_id.size() < 2)
    throw std::runtime_error("sample_meta_train_batch: dataset has fewer than 2 identities");
  if (eligible.size() < p)
    throw std::runtime_error("sample_meta_train_batch: dataset too small for " +
                             std::to_string(p) + "x" + std::to_string(k) + " sampling (" +
                             std::to_string(eligible.size()) + " identities with >= " +
                             std::to_string(k) + " samples)");
  for (std::size_t i = 0; i < p; ++i) {
    const std::size_t j = i + rng.uniform_index(eligible.size() - i);
    std::swap(eligible[i], eligible[j]);
  }
  std::vector<BatchItem<T>> batch;
  batch.reserve(p * k);
  for (std::size_t i = 0; i < p; ++i) {
    std::vector<std::size_t> idx = data.by_dense_id[eligible[i]];
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t r = j + rng.uniform_index(idx.size() - j);
      std::swap(idx[j], idx[r]);
      batch.push_back({&data.train_rgb[idx[j]], static_cast<int>(eligible[i])});
    }
  }
  return batch;
}

// 5-way episode: identities present in both episode pools and absent from the
// meta-train pool; all their support and query samples, in manifest order.
template <typename T>
Episode<T> sample_episode(const TrainData<T>& data, Rng& rng, int n_way = 5) {
  std::set<int> support_ids, query_ids;
  for (const auto& s : data.episode_support) support_ids.insert(s.identity);
  for (const auto& s : data.episode_query) query_ids.insert(s.identity);
  std::vector<int> eligible;
  for (int id : support_ids)
    if (query_ids.count(id) && !data.train_id_set.count(id)) eligible.push_back(id);
  if (static_cast<int>(eligible.size()) < n_way)
    throw std::runtime_error("sample_episode: insufficient episode identities (" +
                             std::to_string(eligible.size()) + " eligible, need " +
                             std::to_string(n_way) + ")");
  for (int i = 0; i < n_way; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) +
                          rng.uniform_index(eligible.size() - static_cast<std::size_t>(i));
    std::swap(eligible[static_cast<std::size_t>(i)], eligible[j]);
  }
  std::set<int> chosen(eligible.begin(), eligible.begin() + n_way);
  Episode<T> e;
  e.n_way = n_way;
  for (const auto& s : data.episode_support)
    if (chosen.count(s.identity)) e.support.push_back(s);
  for (const auto& s : data.episode_query)
    if (chosen.count(s.identity)) e.query.push_back(s);
  return e;
}

template <typename T>
struct PhaseOutput {
  LossBreakdown<T> breakdown;
  EncoderParams<T> grads;          // encoder + built-in classifier gradients
  nn::DenseParams<T> head_grads;   // gradients of the head actually used
  T ktc_objective = T(0);
};

namespace detail {

template <typename T>
void add_rows(Embeddings<T>& acc, const Embeddings<T>& inc) {
  for (std::size_t i = 0; i < inc.size(); ++i)
    for (std::size_t c = 0; c < inc[i].size(); ++c) acc[i][c] += inc[i][c];
}

}  // namespace detail

// Shared supervised phase over a labeled RGB batch: optional AA positives and
// contrastive loss, optional universal-perturbation optimization, adversarial
// (or clean, when KTC is off) cross-entropy through `head`, and the
// clean-vs-perturbed alignment loss. Returns the loss breakdown and gradients
// w.r.t. the encoder parameters and the head.
//
// RNG draw order per batch element, when AA is enabled: one coin; if it hits,
// four draws per rect attempt.
template <typename T>
PhaseOutput<T> rgb_phase(const EncoderParams<T>& params, const nn::DenseParams<T>& head,
                         const std::vector<BatchItem<T>>& batch,
                         PerturbationState<T>* perturb, Rng& rng, const TrainConfig& cfg,
                         ThreadPool& pool) {
  const std::size_t n = batch.size();
  if (n == 0) throw std::invalid_argument("rgb_phase: empty batch");
  const EncoderFlags flags{cfg.augmented_through_rgb_stem};
  const std::size_t d = params.profile.embed_dim;

  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = batch[i].dense_label;

  // Alignment augmentation counterparts.
  std::vector<Image<T>> aug_images;
  std::vector<long> aug_of(n, -1);
  if (cfg.enable_aa) {
    const SketchParams sp{cfg.sketch_blur_sigma, cfg.sketch_dodge_guard};
    for (std::size_t i = 0; i < n; ++i) {
      if (!rng.bernoulli(cfg.aa_probability)) continue;
      const Image<T>& img = batch[i].sample->image;
      const Image<T> sketch = sketch_transform(img, sp);
      const Rect rect = sample_rect(rng, img.height, img.width);
      aug_of[i] = static_cast<long>(aug_images.size());
      aug_images.push_back(local_sketch_replace(img, sketch, rect));
    }
  }

  // Clean forward; these embeddings also serve as the perturbation bank.
  std::vector<EncodeItem<T>> items_clean(n);
  for (std::size_t i = 0; i < n; ++i)
    items_clean[i] = {&batch[i].sample->image, batch[i].sample->modality};
  BatchCache<T> cache_clean;
  encoder_forward(params, items_clean, flags, pool, cache_clean);
  Embeddings<T> emb_clean(n);
  for (std::size_t i = 0; i < n; ++i) emb_clean[i] = cache_clean.items[i].normalized;

  PhaseOutput<T> out;
  out.grads = zeros_like(params);
  out.head_grads.w = Tensor<T>(head.w.shape);
  out.head_grads.b = Tensor<T>(head.b.shape);

  const bool use_ktc = cfg.enable_ktc && perturb != nullptr;
  if (use_ktc)
    out.ktc_objective =
        optimize_perturbation(params, items_clean, labels, emb_clean, labels, *perturb, cfg,
                              pool);

  // Augmented forward.
  BatchCache<T> cache_aug;
  Embeddings<T> emb_aug;
  if (!aug_images.empty()) {
    std::vector<EncodeItem<T>> items_aug;
    items_aug.reserve(aug_images.size());
    for (const auto& img : aug_images) items_aug.push_back({&img, Modality::kAugmented});
    encoder_forward(params, items_aug, flags, pool, cache_aug);
    emb_aug.resize(aug_images.size());
    for (std::size_t i = 0; i < aug_images.size(); ++i)
      emb_aug[i] = cache_aug.items[i].normalized;
  }

  // Adversarial forward. Without KTC the perturbation is identically zero and
  // the clean pass is reused.
  std::vector<Image<T>> adv_images;
  BatchCache<T> cache_adv_storage;
  const BatchCache<T>* cache_adv = &cache_clean;
  if (use_ktc) {
    adv_images.resize(n);
    std::vector<EncodeItem<T>> items_adv(n);
    for (std::size_t i = 0; i < n; ++i) {
      adv_images[i] = apply_perturbation(batch[i].sample->image, perturb->perturbation);
      items_adv[i] = {&adv_images[i], batch[i].sample->modality};
    }
    encoder_forward(params, items_adv, flags, pool, cache_adv_storage);
    cache_adv = &cache_adv_storage;
  }
  Embeddings<T> emb_adv(n);
  for (std::size_t i = 0; i < n; ++i) emb_adv[i] = cache_adv->items[i].normalized;

  // Contrastive loss. The positive is the AA counterpart when present, else
  // the next same-identity batch element; anchors without any positive drop
  // out of the term.
  T l_c = T(0);
  Embeddings<T> d_clean(n, std::vector<T>(d, T(0)));
  Embeddings<T> d_aug(aug_images.size(), std::vector<T>(d, T(0)));
  if (cfg.enable_aa) {
    std::vector<std::size_t> anchor_idx;
    std::vector<long> pos_aug, pos_clean;  // exactly one is >= 0 per anchor
    for (std::size_t i = 0; i < n; ++i) {
      if (aug_of[i] >= 0) {
        anchor_idx.push_back(i);
        pos_aug.push_back(aug_of[i]);
        pos_clean.push_back(-1);
        continue;
      }
      long j_pos = -1;
      for (std::size_t off = 1; off < n; ++off) {
        const std::size_t j = (i + off) % n;
        if (labels[j] == labels[i]) { j_pos = static_cast<long>(j); break; }
      }
      if (j_pos >= 0) {
        anchor_idx.push_back(i);
        pos_aug.push_back(-1);
        pos_clean.push_back(j_pos);
      }
    }
    std::set<int> distinct;
    for (std::size_t a : anchor_idx) distinct.insert(labels[a]);
    if (distinct.size() >= 2) {
      Embeddings<T> anchors, positives;
      std::vector<int> ids;
      for (std::size_t k = 0; k < anchor_idx.size(); ++k) {
        anchors.push_back(emb_clean[anchor_idx[k]]);
        positives.push_back(pos_aug[k] >= 0 ? emb_aug[static_cast<std::size_t>(pos_aug[k])]
                                            : emb_clean[static_cast<std::size_t>(pos_clean[k])]);
        ids.push_back(labels[anchor_idx[k]]);
      }
      Embeddings<T> da, dp;
      l_c = info_nce(anchors, positives, ids, static_cast<T>(cfg.temperature), &da, &dp);
      for (std::size_t k = 0; k < anchor_idx.size(); ++k) {
        for (std::size_t c = 0; c < d; ++c) d_clean[anchor_idx[k]][c] += da[k][c];
        if (pos_aug[k] >= 0)
          for (std::size_t c = 0; c < d; ++c)
            d_aug[static_cast<std::size_t>(pos_aug[k])][c] += dp[k][c];
        else
          for (std::size_t c = 0; c < d; ++c)
            d_clean[static_cast<std::size_t>(pos_clean[k])][c] += dp[k][c];
      }
    }
  }

  // Adversarial cross-entropy through the head.
  Embeddings<T> prenorm_adv(n);
  for (std::size_t i = 0; i < n; ++i) prenorm_adv[i] = cache_adv->items[i].prenorm;
  std::vector<std::vector<T>> logits = classify(head, prenorm_adv);
  std::vector<std::vector<T>> d_logits;
  const T l_adv = adv_ce(logits, labels, &d_logits);
  Embeddings<T> d_prenorm_adv(n, std::vector<T>(d, T(0)));
  for (std::size_t i = 0; i < n; ++i)
    nn::dense_backward(head, prenorm_adv[i].data(), d_logits[i].data(), &out.head_grads,
                       d_prenorm_adv[i].data());

  // Feature consistency between clean and perturbed embeddings.
  T l_align = T(0);
  Embeddings<T> d_align_clean, d_align_adv;
  if (cfg.enable_align && use_ktc)
    l_align = align_loss(emb_clean, emb_adv, &d_align_clean, &d_align_adv);

  // Backward passes, adversarial first, clean last.
  if (use_ktc) {
    encoder_backward(params, *cache_adv, d_align_adv, d_prenorm_adv, pool, &out.grads,
                     static_cast<std::vector<Image<T>>*>(nullptr));
  }
  if (!aug_images.empty())
    encoder_backward(params, cache_aug, d_aug, {}, pool, &out.grads,
                     static_cast<std::vector<Image<T>>*>(nullptr));
  if (!d_align_clean.empty()) detail::add_rows(d_clean, d_align_clean);
  encoder_backward(params, cache_clean, d_clean, use_ktc ? Embeddings<T>{} : d_prenorm_adv,
                   pool, &out.grads, static_cast<std::vector<Image<T>>*>(nullptr));

  out.breakdown = phase_loss(l_c, l_adv, l_align);
  return out;
}

// Meta-test phase over one episode, evaluated at the adapted parameters:
// queries are sketch anchors, same-identity support embeddings are positives,
// the perturbation attacks the RGB support against the sketch bank, and the
// adversarial cross-entropy runs through a temporary episode head.
template <typename T>
PhaseOutput<T> episode_phase(const EncoderParams<T>& params, const nn::DenseParams<T>& head,
                             const Episode<T>& episode, PerturbationState<T>* perturb,
                             const TrainConfig& cfg, ThreadPool& pool) {
  if (episode.support.empty() || episode.query.empty())
    throw std::invalid_argument("episode_phase: episode must have support and query samples");
  const EncoderFlags flags{cfg.augmented_through_rgb_stem};
  const std::size_t d = params.profile.embed_dim;

  std::set<int> id_set;
  for (const auto& s : episode.support) id_set.insert(s.identity);
  const IdentityMap ids = IdentityMap::from_ids(id_set);
  const std::size_t ns = episode.support.size(), nq = episode.query.size();

  std::vector<int> support_labels(ns), query_labels(nq);
  for (std::size_t i = 0; i < ns; ++i) support_labels[i] = ids.dense(episode.support[i].identity);
  for (std::size_t i = 0; i < nq; ++i) query_labels[i] = ids.dense(episode.query[i].identity);

  std::vector<EncodeItem<T>> items_s(ns), items_q(nq);
  for (std::size_t i = 0; i < ns; ++i)
    items_s[i] = {&episode.support[i].image, episode.support[i].modality};
  for (std::size_t i = 0; i < nq; ++i)
    items_q[i] = {&episode.query[i].image, episode.query[i].modality};

  BatchCache<T> cache_s, cache_q;
  encoder_forward(params, items_s, flags, pool, cache_s);
  encoder_forward(params, items_q, flags, pool, cache_q);
  Embeddings<T> emb_s(ns), emb_q(nq);
  for (std::size_t i = 0; i < ns; ++i) emb_s[i] = cache_s.items[i].normalized;
  for (std::size_t i = 0; i < nq; ++i) emb_q[i] = cache_q.items[i].normalized;

  PhaseOutput<T> out;
  out.grads = zeros_like(params);
  out.head_grads.w = Tensor<T>(head.w.shape);
  out.head_grads.b = Tensor<T>(head.b.shape);

  const bool use_ktc = cfg.enable_ktc && perturb != nullptr;
  if (use_ktc)
    out.ktc_objective = optimize_perturbation(params, items_s, support_labels, emb_q,
                                              query_labels, *perturb, cfg, pool);

  std::vector<Image<T>> adv_images;
  BatchCache<T> cache_adv_storage;
  const BatchCache<T>* cache_adv = &cache_s;
  if (use_ktc) {
    adv_images.resize(ns);
    std::vector<EncodeItem<T>> items_adv(ns);
    for (std::size_t i = 0; i < ns; ++i) {
      adv_images[i] = apply_perturbation(episode.support[i].image, perturb->perturbation);
      items_adv[i] = {&adv_images[i], episode.support[i].modality};
    }
    encoder_forward(params, items_adv, flags, pool, cache_adv_storage);
    cache_adv = &cache_adv_storage;
  }
  Embeddings<T> emb_adv(ns);
  for (std::size_t i = 0; i < ns; ++i) emb_adv[i] = cache_adv->items[i].normalized;

  // Contrastive: sketch query anchors vs first same-identity support
  // embedding.
  T l_c = T(0);
  Embeddings<T> d_q(nq, std::vector<T>(d, T(0)));
  Embeddings<T> d_s(ns, std::vector<T>(d, T(0)));
  if (cfg.enable_aa) {
    std::vector<long> pos_of(nq, -1);
    for (std::size_t i = 0; i < nq; ++i)
      for (std::size_t j = 0; j < ns; ++j)
        if (support_labels[j] == query_labels[i]) { pos_of[i] = static_cast<long>(j); break; }
    Embeddings<T> anchors, positives;
    std::vector<int> aids;
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < nq; ++i) {
      if (pos_of[i] < 0) continue;
      anchors.push_back(emb_q[i]);
      positives.push_back(emb_s[static_cast<std::size_t>(pos_of[i])]);
      aids.push_back(query_labels[i]);
      rows.push_back(i);
    }
    std::set<int> distinct(aids.begin(), aids.end());
    if (distinct.size() >= 2) {
      Embeddings<T> da, dp;
      l_c = info_nce(anchors, positives, aids, static_cast<T>(cfg.temperature), &da, &dp);
      for (std::size_t k = 0; k < rows.size(); ++k) {
        for (std::size_t c = 0; c < d; ++c) d_q[rows[k]][c] += da[k][c];
        const std::size_t j = static_cast<std::size_t>(pos_of[rows[k]]);
        for (std::size_t c = 0; c < d; ++c) d_s[j][c] += dp[k][c];
      }
    }
  }

  // Adversarial cross-entropy on the (perturbed) support through the
  // temporary episode head.
  Embeddings<T> prenorm_adv(ns);
  for (std::size_t i = 0; i < ns; ++i) prenorm_adv[i] = cache_adv->items[i].prenorm;
  std::vector<std::vector<T>> logits = classify(head, prenorm_adv);
  std::vector<std::vector<T>> d_logits;
  const T l_adv = adv_ce(logits, support_labels, &d_logits);
  Embeddings<T> d_prenorm_adv(ns, std::vector<T>(d, T(0)));
  for (std::size_t i = 0; i < ns; ++i)
    nn::dense_backward(head, prenorm_adv[i].data(), d_logits[i].data(), &out.head_grads,
                       d_prenorm_adv[i].data());

  T l_align = T(0);
  Embeddings<T> d_align_clean, d_align_adv;
  if (cfg.enable_align && use_ktc)
    l_align = align_loss(emb_s, emb_adv, &d_align_clean, &d_align_adv);

  if (use_ktc) {
    encoder_backward(params, *cache_adv, d_align_adv, d_prenorm_adv, pool, &out.grads,
                     static_cast<std::vector<Image<T>>*>(nullptr));
  }
  if (!d_align_clean.empty()) detail::add_rows(d_s, d_align_clean);
  encoder_backward(params, cache_s, d_s, use_ktc ? Embeddings<T>{} : d_prenorm_adv, pool,
                   &out.grads, static_cast<std::vector<Image<T>>*>(nullptr));
  encoder_backward(params, cache_q, d_q, {}, pool, &out.grads,
                   static_cast<std::vector<Image<T>>*>(nullptr));

  out.breakdown = phase_loss(l_c, l_adv, l_align);
  return out;
}

// Run state for the episodic training loop.
template <typename T>
struct MetaState {
  EncoderParams<T> base;     // w: mutated only by meta_update
  EncoderParams<T> adapted;  // w': rewritten by each meta_train_step
  PerturbationState<T> perturbation;
  EncoderParams<T> velocity;    // outer momentum buffers
  EncoderParams<T> grad_accum;  // summed meta-train gradients of the cycle
  int grad_accum_count = 0;
  EncoderParams<T> grad_test;
  bool has_grad_test = false;
  long step = 0;
  long cycle = 0;
  Rng rng{0};
};

template <typename T>
MetaState<T> make_meta_state(const TrainConfig& cfg, const TrainData<T>& data) {
  MetaState<T> s;
  const EncoderProfile profile =
      EncoderProfile::by_name(cfg.profile, data.train_ids.dense_to_original.size());
  s.base = init_encoder<T>(profile, mix_seed(cfg.seed, 1));
  s.adapted = s.base;
  s.perturbation = PerturbationState<T>::make(
      data.image_height, data.image_width, static_cast<T>(cfg.epsilon()),
      static_cast<T>(cfg.alpha()), static_cast<T>(cfg.momentum));
  s.velocity = zeros_like(s.base);
  s.grad_accum = zeros_like(s.base);
  s.grad_test = zeros_like(s.base);
  s.rng = Rng(mix_seed(cfg.seed, 2));
  return s;
}

template <typename T>
LossBreakdown<T> meta_train_step(MetaState<T>& state, const TrainData<T>& data,
                                 const TrainConfig& cfg, ThreadPool& pool) {
  const auto batch = sample_meta_train_batch(data, state.rng, cfg);
  state.perturbation.phase = PerturbPhase::kMetaTrain;
  PhaseOutput<T> out = rgb_phase(state.base, state.base.cls, batch,
                                 cfg.enable_ktc ? &state.perturbation : nullptr, state.rng,
                                 cfg, pool);
  // The built-in classifier is part of w, so its gradients join the cache.
  axpy(T(1), out.head_grads.w, out.grads.cls.w);
  axpy(T(1), out.head_grads.b, out.grads.cls.b);

  params_axpy(T(1), out.grads, state.grad_accum);
  ++state.grad_accum_count;
  ++state.step;

  // First-order inner adaptation from this step's gradient.
  state.adapted = state.base;
  params_axpy(static_cast<T>(-cfg.inner_lr), out.grads, state.adapted);
  return out.breakdown;
}

template <typename T>
LossBreakdown<T> meta_test_step(MetaState<T>& state, const TrainData<T>& data,
                                const Episode<T>& episode, const TrainConfig& cfg,
                                ThreadPool& pool) {
  for (const auto& s : episode.support)
    if (data.train_id_set.count(s.identity))
      throw std::runtime_error("meta_test_step: episode identity " +
                               std::to_string(s.identity) + " overlaps the meta-train pool");
  std::set<int> id_set;
  for (const auto& s : episode.support) id_set.insert(s.identity);

  // Temporary episode head; train identities are disjoint so the built-in
  // classifier is unusable here.
  nn::DenseParams<T> head = detail::make_dense<T>(state.base.profile.embed_dim, id_set.size());
  {
    Rng head_rng(state.rng.child_seed());
    const double bound = 1.0 / std::sqrt(static_cast<double>(state.base.profile.embed_dim));
    for (T& v : head.w.data) v = static_cast<T>(head_rng.uniform(-bound, bound));
  }

  state.perturbation.phase = PerturbPhase::kMetaTest;
  PhaseOutput<T> out = episode_phase(state.adapted, head, episode,
                                     cfg.enable_ktc ? &state.perturbation : nullptr, cfg, pool);
  // First-order approximation: the gradient w.r.t. w' stands in for w. The
  // temporary head is discarded.
  state.grad_test = std::move(out.grads);
  state.has_grad_test = true;
  return out.breakdown;
}

template <typename T>
void meta_update(MetaState<T>& state, const TrainConfig& cfg) {
  if (state.grad_accum_count == 0 || !state.has_grad_test)
    throw std::runtime_error("meta_update: missing cached gradients");
  EncoderParams<T> total = state.grad_test;
  params_axpy(T(1) / static_cast<T>(state.grad_accum_count), state.grad_accum, total);

  params_scale(state.velocity, static_cast<T>(cfg.outer_momentum));
  params_axpy(T(1), total, state.velocity);
  params_axpy(static_cast<T>(-cfg.outer_lr), state.velocity, state.base);

  state.grad_accum = zeros_like(state.base);
  state.grad_accum_count = 0;
  state.grad_test = zeros_like(state.base);
  state.has_grad_test = false;
  state.adapted = state.base;
  ++state.cycle;
}

// --- full run ---------------------------------------------------------------

using MetricsSink = std::function<void(const std::string&)>;

template <typename T>
std::string format_record(long step, long cycle, const char* phase,
                          const LossBreakdown<T>& b) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "step=%ld cycle=%ld phase=%s l_c=%.9g l_adv=%.9g l_align=%.9g total=%.9g",
                step, cycle, phase, static_cast<double>(b.l_c), static_cast<double>(b.l_adv),
                static_cast<double>(b.l_align), static_cast<double>(b.total));
  return buf;
}

template <typename T>
void save_run_checkpoint(const std::filesystem::path& dir, const MetaState<T>& state,
                         const TrainConfig& cfg, const TrainData<T>& data) {
  CheckpointExtras<T> extras;
  for (auto& [name, t] : state.velocity.tensors())
    extras.extra_tensors.emplace("velocity." + name, t);
  extras.rng_state = state.rng.save_state();
  extras.step = state.step;
  extras.cycle = state.cycle;
  extras.label_map = data.train_ids.dense_to_original;
  save_checkpoint(dir, state.base, state.perturbation, cfg, extras);
}

template <typename T>
MetaState<T> restore_run_state(const LoadedCheckpoint<T>& ck, const TrainConfig& cfg,
                               const TrainData<T>& data) {
  MetaState<T> s;
  s.base = ck.make_params();
  s.adapted = s.base;
  s.perturbation = ck.make_perturbation();
  s.velocity = zeros_like(s.base);
  for (auto& [name, t] : s.velocity.tensors()) {
    auto it = ck.tensors.find("velocity." + name);
    if (it == ck.tensors.end())
      throw CheckpointError("checkpoint is missing tensor 'velocity." + name + "'");
    if (it->second.shape != t->shape)
      throw CheckpointError("shape mismatch for tensor 'velocity." + name + "'");
    t->data = it->second.data;
  }
  s.grad_accum = zeros_like(s.base);
  s.grad_test = zeros_like(s.base);
  s.step = ck.step;
  s.cycle = ck.cycle;
  s.rng = Rng(mix_seed(cfg.seed, 2));
  if (!ck.rng_state.empty()) s.rng.restore_state(ck.rng_state);
  if (ck.label_map != data.train_ids.dense_to_original)
    throw CheckpointError("checkpoint label mapping does not match the dataset");
  return s;
}

// Episodic schedule: meta_test_period train steps, one episode, one update,
// per cycle; 12 metrics records per cycle. Checkpoints land in out_dir.
template <typename T>
MetaState<T> run_training(const TrainConfig& cfg, const TrainData<T>& data,
                          const std::filesystem::path& out_dir, const MetricsSink& sink,
                          ThreadPool& pool, const MetaState<T>* resume_from = nullptr) {
  MetaState<T> state = resume_from ? *resume_from : make_meta_state(cfg, data);
  const long start_cycle = state.cycle;
  for (long cycle = start_cycle; cycle < cfg.cycles; ++cycle) {
    try {
      double train_total_sum = 0;
      for (int i = 0; i < cfg.meta_test_period; ++i) {
        const auto bd = meta_train_step(state, data, cfg, pool);
        train_total_sum += static_cast<double>(bd.total);
        sink(format_record(state.step, state.cycle, "meta_train", bd));
      }
      const Episode<T> episode = sample_episode(data, state.rng, 5);
      const auto test_bd = meta_test_step(state, data, episode, cfg, pool);
      sink(format_record(state.step, state.cycle, "meta_test", test_bd));

      // Combined objective of the cycle; the train side is the mean over the
      // cycle's steps, mirroring the averaged outer gradient.
      const double l_total =
          train_total_sum / cfg.meta_test_period + static_cast<double>(test_bd.total);
      meta_update(state, cfg);
      char buf[128];
      std::snprintf(buf, sizeof buf, "step=%ld cycle=%ld phase=meta_update l_total=%.9g",
                    state.step, state.cycle, l_total);
      sink(buf);
      if (cfg.checkpoint_every > 0 && state.cycle % cfg.checkpoint_every == 0 &&
          state.cycle < cfg.cycles) {
        char name[64];
        std::snprintf(name, sizeof name, "checkpoint_cycle_%06ld", state.cycle);
        save_run_checkpoint(out_dir / name, state, cfg, data);
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("training aborted at cycle " + std::to_string(state.cycle) +
                               ", step " + std::to_string(state.step) + ": " + e.what());
    }
  }
  save_run_checkpoint(out_dir / "checkpoint_final", state, cfg, data);
  return state;
}

}  // namespace ktcaa
