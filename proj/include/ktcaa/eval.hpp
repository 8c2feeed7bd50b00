#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ktcaa/encoder.hpp"
#include "ktcaa/ktc.hpp"
#include "ktcaa/losses.hpp"
#include "ktcaa/metaloop.hpp"
#include "ktcaa/rng.hpp"

namespace ktcaa {

struct MetricsReport {
  std::map<int, double> rank_k;
  double map = 0;
  std::size_t n_queries = 0;
  std::size_t n_gallery = 0;
};

// Cosine distance 1 - <q, g> on unit-norm embeddings.
template <typename T>
std::vector<std::vector<T>> pairwise_distances(const Embeddings<T>& queries,
                                               const Embeddings<T>& gallery) {
  std::vector<std::vector<T>> dist(queries.size(), std::vector<T>(gallery.size(), T(0)));
  for (std::size_t i = 0; i < queries.size(); ++i) {
    for (std::size_t j = 0; j < gallery.size(); ++j) {
      if (queries[i].size() != gallery[j].size())
        throw std::invalid_argument("pairwise_distances: dimension mismatch");
      T dot = 0;
      for (std::size_t c = 0; c < queries[i].size(); ++c) dot += queries[i][c] * gallery[j][c];
      dist[i][j] = T(1) - dot;
    }
  }
  return dist;
}

namespace detail {

template <typename T>
std::vector<std::size_t> ranked_gallery(const std::vector<T>& row) {
  std::vector<std::size_t> order(row.size());
  std::iota(order.begin(), order.end(), 0);
  // Ties break toward the lower gallery index.
  std::stable_sort(order.begin(), order.end(),
                   [&row](std::size_t a, std::size_t b) { return row[a] < row[b]; });
  return order;
}

inline void require_query_ids_present(const std::vector<int>& q_ids,
                                      const std::vector<int>& g_ids) {
  std::set<int> gal(g_ids.begin(), g_ids.end());
  for (int id : q_ids)
    if (!gal.count(id))
      throw std::runtime_error("query identity " + std::to_string(id) +
                               " is absent from the gallery");
}

}  // namespace detail

// Cumulative match characteristic at the given ranks.
template <typename T>
std::map<int, double> cmc(const std::vector<std::vector<T>>& dist,
                          const std::vector<int>& q_ids, const std::vector<int>& g_ids,
                          const std::vector<int>& ks) {
  if (dist.size() != q_ids.size()) throw std::invalid_argument("cmc: q_ids mismatch");
  if (!dist.empty() && dist[0].size() != g_ids.size())
    throw std::invalid_argument("cmc: g_ids mismatch");
  detail::require_query_ids_present(q_ids, g_ids);
  std::map<int, double> acc;
  for (int k : ks) acc[k] = 0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    const auto order = detail::ranked_gallery(dist[i]);
    std::size_t first_hit = order.size();
    for (std::size_t r = 0; r < order.size(); ++r)
      if (g_ids[order[r]] == q_ids[i]) { first_hit = r; break; }
    for (int k : ks)
      if (first_hit < static_cast<std::size_t>(k)) acc[k] += 1.0;
  }
  for (int k : ks) acc[k] /= dist.empty() ? 1.0 : static_cast<double>(dist.size());
  return acc;
}

// Mean average precision: per query, AP averages precision at each relevant
// rank over the number of relevant entries.
template <typename T>
double mean_ap(const std::vector<std::vector<T>>& dist, const std::vector<int>& q_ids,
               const std::vector<int>& g_ids) {
  if (dist.size() != q_ids.size()) throw std::invalid_argument("mean_ap: q_ids mismatch");
  if (!dist.empty() && dist[0].size() != g_ids.size())
    throw std::invalid_argument("mean_ap: g_ids mismatch");
  detail::require_query_ids_present(q_ids, g_ids);
  double sum_ap = 0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    const auto order = detail::ranked_gallery(dist[i]);
    std::size_t hits = 0;
    double ap = 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (g_ids[order[r]] != q_ids[i]) continue;
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
    sum_ap += ap / static_cast<double>(hits);
  }
  return dist.empty() ? 0.0 : sum_ap / static_cast<double>(dist.size());
}

// --- theory-motivated diagnostics -------------------------------------------

// Minimal view of a feature extractor for the sensitivity probes: encode an
// image, and pull a feature-space seed back to an input gradient.
template <typename T>
struct FeatureModel {
  std::function<std::vector<T>(const Image<T>&)> encode;
  // returns dL/dx for L = <seed, f(x)>
  std::function<Image<T>(const Image<T>&, const std::vector<T>&)> input_grad;
  bool clamp_inputs = true;  // perturbed inputs are clamped back into [0,1]
};

template <typename T>
FeatureModel<T> encoder_feature_model(const EncoderParams<T>& params, Modality modality,
                                      const EncoderFlags& flags, ThreadPool& pool) {
  FeatureModel<T> m;
  m.clamp_inputs = true;
  m.encode = [&params, modality, &flags, &pool](const Image<T>& x) {
    BatchCache<T> cache;
    std::vector<EncodeItem<T>> items{{&x, modality}};
    encoder_forward(params, items, flags, pool, cache);
    return cache.items[0].normalized;
  };
  m.input_grad = [&params, modality, &flags, &pool](const Image<T>& x,
                                                    const std::vector<T>& seed) {
    BatchCache<T> cache;
    std::vector<EncodeItem<T>> items{{&x, modality}};
    encoder_forward(params, items, flags, pool, cache);
    std::vector<Image<T>> d_inputs;
    encoder_backward(params, cache, {seed}, {}, pool,
                     static_cast<EncoderParams<T>*>(nullptr), &d_inputs);
    return d_inputs[0];
  };
  return m;
}

// Empirical perturbation sensitivity:
//   gamma_hat     = mean_n ||f(x + delta) - f(x)||, delta ~ U[-eps, eps]
//   gamma_adv_hat = mean_n of the largest shift found by 10 sign-gradient
//                   ascent steps (step eps/2) on ||f(x + eta) - f(x)||^2,
//                   with the random delta included among the candidates.
// Including delta makes gamma_hat <= gamma_adv_hat hold by construction.
template <typename T>
std::pair<double, double> estimate_gamma(const FeatureModel<T>& model,
                                         const std::vector<Image<T>>& samples, double epsilon,
                                         std::size_t n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("estimate_gamma: n must be >= 1");
  n = std::min(n, samples.size());
  if (n == 0) throw std::invalid_argument("estimate_gamma: no samples");

  auto shifted = [&model](const Image<T>& x, const Image<T>& pert) {
    Image<T> xp(x.height, x.width);
    for (std::size_t i = 0; i < x.size(); ++i) {
      T v = x.data[i] + pert.data[i];
      if (model.clamp_inputs) v = std::clamp(v, T(0), T(1));
      xp.data[i] = v;
    }
    return xp;
  };
  auto shift_norm = [](const std::vector<T>& a, const std::vector<T>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double dd = static_cast<double>(a[i]) - static_cast<double>(b[i]);
      s += dd * dd;
    }
    return std::sqrt(s);
  };

  double sum_rand = 0, sum_adv = 0;
  for (std::size_t s = 0; s < n; ++s) {
    const Image<T>& x = samples[s];
    const std::vector<T> f0 = model.encode(x);

    Image<T> delta(x.height, x.width);
    for (T& v : delta.data) v = static_cast<T>(rng.uniform(-epsilon, epsilon));
    const double rand_shift = shift_norm(model.encode(shifted(x, delta)), f0);
    sum_rand += rand_shift;

    double best = rand_shift;
    if (epsilon > 0) {
      Image<T> eta(x.height, x.width);
      for (T& v : eta.data) v = static_cast<T>(rng.uniform(-epsilon / 10, epsilon / 10));
      const T step = static_cast<T>(epsilon / 2);
      for (int it = 0; it < 10; ++it) {
        const Image<T> xa = shifted(x, eta);
        const std::vector<T> fa = model.encode(xa);
        best = std::max(best, shift_norm(fa, f0));
        std::vector<T> seed(f0.size());
        for (std::size_t c = 0; c < f0.size(); ++c) seed[c] = T(2) * (fa[c] - f0[c]);
        Image<T> g = model.input_grad(xa, seed);
        for (std::size_t i = 0; i < eta.size(); ++i) {
          if (model.clamp_inputs) {
            const T raw = x.data[i] + eta.data[i];
            if (raw < T(0) || raw > T(1)) g.data[i] = T(0);
          }
          T sign = T(0);
          if (g.data[i] > T(0)) sign = T(1);
          else if (g.data[i] < T(0)) sign = T(-1);
          eta.data[i] = std::clamp(eta.data[i] + step * sign, static_cast<T>(-epsilon),
                                   static_cast<T>(epsilon));
        }
      }
      best = std::max(best, shift_norm(model.encode(shifted(x, eta)), f0));
    }
    sum_adv += best;
  }
  return {sum_rand / static_cast<double>(n), sum_adv / static_cast<double>(n)};
}

// Heuristic domain separability in [0,1]: a seeded logistic probe is trained
// to tell the domains apart on a 50/50 split; 0 means indistinguishable. This
// is a labeled stand-in, not the hypothesis-class divergence itself.
// Features are canonicalized by sorting, so the value is independent of input
// order.
template <typename T>
double discrepancy_proxy(const Embeddings<T>& features_src, const Embeddings<T>& features_tgt,
                         Rng& rng) {
  if (features_src.size() < 10 || features_tgt.size() < 10)
    throw std::invalid_argument("discrepancy_proxy: need at least 10 features per domain");
  const std::size_t d = features_src[0].size();

  auto canonical = [](Embeddings<T> f) {
    std::sort(f.begin(), f.end());
    return f;
  };
  const Embeddings<T> src = canonical(features_src);
  const Embeddings<T> tgt = canonical(features_tgt);

  auto split = [&rng](std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i + 1 < n; ++i) {
      const std::size_t j = i + rng.uniform_index(n - i);
      std::swap(idx[i], idx[j]);
    }
    return idx;
  };
  const auto idx_s = split(src.size());
  const auto idx_t = split(tgt.size());
  const std::size_t half_s = src.size() / 2, half_t = tgt.size() / 2;

  std::vector<const std::vector<T>*> train_x;
  std::vector<int> train_y;
  for (std::size_t i = 0; i < half_s; ++i) {
    train_x.push_back(&src[idx_s[i]]);
    train_y.push_back(0);
  }
  for (std::size_t i = 0; i < half_t; ++i) {
    train_x.push_back(&tgt[idx_t[i]]);
    train_y.push_back(1);
  }

  std::vector<double> w(d, 0.0);
  double b = 0;
  const double lr = 1.0, weight_decay = 0.01;
  for (int it = 0; it < 100; ++it) {
    std::vector<double> gw(d, 0.0);
    double gb = 0;
    for (std::size_t i = 0; i < train_x.size(); ++i) {
      double z = b;
      for (std::size_t c = 0; c < d; ++c) z += w[c] * static_cast<double>((*train_x[i])[c]);
      const double p = 1.0 / (1.0 + std::exp(-z));
      const double g = (p - static_cast<double>(train_y[i])) / static_cast<double>(train_x.size());
      for (std::size_t c = 0; c < d; ++c) gw[c] += g * static_cast<double>((*train_x[i])[c]);
      gb += g;
    }
    for (std::size_t c = 0; c < d; ++c) w[c] -= lr * (gw[c] + weight_decay * w[c]);
    b -= lr * gb;
  }

  auto class_acc = [&](const Embeddings<T>& f, const std::vector<std::size_t>& idx,
                       std::size_t from, int label) {
    std::size_t correct = 0, total = 0;
    for (std::size_t i = from; i < idx.size(); ++i) {
      double z = b;
      for (std::size_t c = 0; c < d; ++c) z += w[c] * static_cast<double>(f[idx[i]][c]);
      const int pred = z > 0 ? 1 : 0;
      correct += (pred == label);
      ++total;
    }
    return static_cast<double>(correct) / static_cast<double>(total);
  };
  const double balanced =
      0.5 * (class_acc(src, idx_s, half_s, 0) + class_acc(tgt, idx_t, half_t, 1));
  return std::clamp(2.0 * (balanced - 0.5), 0.0, 1.0);
}

struct DiagnosticsReport {
  double gamma_hat = 0;
  double gamma_adv_hat = 0;
  double lipschitz_ratio = 0;
  double delta_global_mean = 0;
  double delta_local_mean = 0;
  double discrepancy_proxy = 0;
};

// --- retrieval evaluation ----------------------------------------------------

template <typename T>
MetricsReport evaluate_retrieval(const EncoderParams<T>& params,
                                 const std::vector<Sample<T>>& queries,
                                 const std::vector<Sample<T>>& gallery,
                                 const EncoderFlags& flags, ThreadPool& pool) {
  if (queries.empty() || gallery.empty())
    throw std::runtime_error("evaluate_retrieval: empty query or gallery set");
  const Embeddings<T> qe = encode(params, queries, flags, pool);
  const Embeddings<T> ge = encode(params, gallery, flags, pool);
  std::vector<int> q_ids, g_ids;
  for (const auto& s : queries) q_ids.push_back(s.identity);
  for (const auto& s : gallery) g_ids.push_back(s.identity);
  const auto dist = pairwise_distances(qe, ge);
  MetricsReport r;
  r.rank_k = cmc(dist, q_ids, g_ids, {1, 5, 10});
  r.map = mean_ap(dist, q_ids, g_ids);
  r.n_queries = queries.size();
  r.n_gallery = gallery.size();
  return r;
}

// Deployment-style adaptation: a few supervised steps on the support set with
// a fresh episode head, mirroring the meta-training loss composition. The
// incoming parameters and perturbation are copied; nothing is mutated.
template <typename T>
EncoderParams<T> adapt_for_eval(const EncoderParams<T>& base,
                                const std::vector<Sample<T>>& support, int steps,
                                const PerturbationState<T>& perturb, const TrainConfig& cfg,
                                ThreadPool& pool) {
  if (steps <= 0) return base;
  if (support.empty()) throw std::runtime_error("adapt_for_eval: empty support set");

  std::set<int> id_set;
  for (const auto& s : support) id_set.insert(s.identity);
  const IdentityMap ids = IdentityMap::from_ids(id_set);

  EncoderParams<T> adapted = base;
  PerturbationState<T> perturb_copy = perturb;
  nn::DenseParams<T> head = detail::make_dense<T>(base.profile.embed_dim, id_set.size());
  Rng rng(mix_seed(cfg.seed, 0xE7A1));
  {
    const double bound = 1.0 / std::sqrt(static_cast<double>(base.profile.embed_dim));
    for (T& v : head.w.data) v = static_cast<T>(rng.uniform(-bound, bound));
  }

  std::vector<BatchItem<T>> batch;
  for (const auto& s : support) batch.push_back({&s, ids.dense(s.identity)});

  for (int step = 0; step < steps; ++step) {
    PhaseOutput<T> out = rgb_phase(adapted, head, batch,
                                   cfg.enable_ktc ? &perturb_copy : nullptr, rng, cfg, pool);
    params_axpy(static_cast<T>(-cfg.inner_lr), out.grads, adapted);
    axpy(static_cast<T>(-cfg.inner_lr), out.head_grads.w, head.w);
    axpy(static_cast<T>(-cfg.inner_lr), out.head_grads.b, head.b);
  }
  return adapted;
}

}  // namespace ktcaa
