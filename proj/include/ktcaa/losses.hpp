#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace ktcaa {

template <typename T>
using Embeddings = std::vector<std::vector<T>>;

template <typename T>
struct LossBreakdown {
  T l_c = 0;
  T l_adv = 0;
  T l_align = 0;
  T total = 0;
};

template <typename T>
LossBreakdown<T> phase_loss(T l_c, T l_adv, T l_align) {
  if (!std::isfinite(static_cast<double>(l_c)) || !std::isfinite(static_cast<double>(l_adv)) ||
      !std::isfinite(static_cast<double>(l_align)))
    throw std::invalid_argument("phase_loss: non-finite component");
  return LossBreakdown<T>{l_c, l_adv, l_align, l_c + l_adv + l_align};
}

template <typename T>
T total_loss(const LossBreakdown<T>& meta_train, const LossBreakdown<T>& meta_test) {
  if (!std::isfinite(static_cast<double>(meta_train.total)) ||
      !std::isfinite(static_cast<double>(meta_test.total)))
    throw std::invalid_argument("total_loss: non-finite phase total");
  return meta_train.total + meta_test.total;
}

namespace detail {

template <typename T>
T dot(const std::vector<T>& a, const std::vector<T>& b) {
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
T euclid(const std::vector<T>& a, const std::vector<T>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return static_cast<T>(std::sqrt(s));
}

}  // namespace detail

// InfoNCE over aligned (anchor, positive) pairs. Similarity is the dot
// product (cosine on unit vectors). The denominator is the positive term plus
// every in-batch anchor of a different identity; self-similarity and same-id
// non-positive entries are excluded. Optional d_* buffers (same shapes as the
// inputs, zeroed here) receive the gradients.
template <typename T>
T info_nce(const Embeddings<T>& anchors, const Embeddings<T>& positives,
           const std::vector<int>& ids, T tau, Embeddings<T>* d_anchors = nullptr,
           Embeddings<T>* d_positives = nullptr) {
  const std::size_t n = anchors.size();
  if (positives.size() != n || ids.size() != n)
    throw std::invalid_argument("info_nce: anchors, positives and ids must align");
  if (n == 0) throw std::invalid_argument("info_nce: empty batch");
  if (!(tau > T(0))) throw std::invalid_argument("info_nce: tau must be > 0");
  const std::size_t d = anchors[0].size();

  if (d_anchors) d_anchors->assign(n, std::vector<T>(d, T(0)));
  if (d_positives) d_positives->assign(n, std::vector<T>(d, T(0)));

  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> negs;
    for (std::size_t j = 0; j < n; ++j)
      if (ids[j] != ids[i]) negs.push_back(j);
    if (negs.empty())
      throw std::runtime_error(
          "info_nce: anchor " + std::to_string(i) +
          " has no negative; use a larger batch with mixed identities");

    const double s_pos = static_cast<double>(detail::dot(anchors[i], positives[i])) /
                         static_cast<double>(tau);
    std::vector<double> s_neg(negs.size());
    double m = s_pos;
    for (std::size_t k = 0; k < negs.size(); ++k) {
      s_neg[k] = static_cast<double>(detail::dot(anchors[i], anchors[negs[k]])) /
                 static_cast<double>(tau);
      m = std::max(m, s_neg[k]);
    }
    const double w_pos = std::exp(s_pos - m);
    double den = w_pos;
    std::vector<double> w_neg(negs.size());
    for (std::size_t k = 0; k < negs.size(); ++k) {
      w_neg[k] = std::exp(s_neg[k] - m);
      den += w_neg[k];
    }
    loss += m + std::log(den) - s_pos;

    if (d_anchors || d_positives) {
      const double inv_tau_n = 1.0 / (static_cast<double>(tau) * static_cast<double>(n));
      const double g_pos = (w_pos / den - 1.0) * inv_tau_n;  // dL/ds_pos * n scaling folded
      if (d_anchors)
        for (std::size_t c = 0; c < d; ++c)
          (*d_anchors)[i][c] += static_cast<T>(g_pos * static_cast<double>(positives[i][c]));
      if (d_positives)
        for (std::size_t c = 0; c < d; ++c)
          (*d_positives)[i][c] += static_cast<T>(g_pos * static_cast<double>(anchors[i][c]));
      if (d_anchors) {
        for (std::size_t k = 0; k < negs.size(); ++k) {
          const double g = (w_neg[k] / den) * inv_tau_n;
          const std::size_t j = negs[k];
          for (std::size_t c = 0; c < d; ++c) {
            (*d_anchors)[i][c] += static_cast<T>(g * static_cast<double>(anchors[j][c]));
            (*d_anchors)[j][c] += static_cast<T>(g * static_cast<double>(anchors[i][c]));
          }
        }
      }
    }
  }
  return static_cast<T>(loss / static_cast<double>(n));
}

// Adversarial triplet with batch-hard mining: per anchor, the positive is the
// farthest same-id bank entry and the negative the closest different-id one
// (ties resolved to the lowest bank index). The loss term is
// max(d(neg, anchor) - d(pos, anchor) + rho, 0), averaged over anchors.
template <typename T>
T adv_triplet(const Embeddings<T>& f_adv, const Embeddings<T>& bank,
              const std::vector<int>& ids_adv, const std::vector<int>& ids_bank, T rho,
              Embeddings<T>* d_fadv = nullptr, Embeddings<T>* d_bank = nullptr) {
  const std::size_t n = f_adv.size();
  if (ids_adv.size() != n) throw std::invalid_argument("adv_triplet: ids_adv must align");
  if (bank.size() != ids_bank.size())
    throw std::invalid_argument("adv_triplet: ids_bank must align");
  if (n == 0) throw std::invalid_argument("adv_triplet: empty batch");
  if (!(rho >= T(0))) throw std::invalid_argument("adv_triplet: rho must be >= 0");
  const std::size_t d = f_adv[0].size();

  if (d_fadv) d_fadv->assign(n, std::vector<T>(d, T(0)));
  if (d_bank) d_bank->assign(bank.size(), std::vector<T>(d, T(0)));

  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    long pos = -1, neg = -1;
    T d_pos = -1, d_neg = std::numeric_limits<T>::max();
    for (std::size_t j = 0; j < bank.size(); ++j) {
      const T dist = detail::euclid(f_adv[i], bank[j]);
      if (ids_bank[j] == ids_adv[i]) {
        if (dist > d_pos) { d_pos = dist; pos = static_cast<long>(j); }
      } else {
        if (dist < d_neg) { d_neg = dist; neg = static_cast<long>(j); }
      }
    }
    if (pos < 0)
      throw std::runtime_error("adv_triplet: anchor " + std::to_string(i) +
                               " has no same-identity bank entry");
    if (neg < 0)
      throw std::runtime_error("adv_triplet: anchor " + std::to_string(i) +
                               " has no different-identity bank entry");
    const T hinge = d_neg - d_pos + rho;
    if (hinge > T(0)) {
      loss += static_cast<double>(hinge);
      if (d_fadv || d_bank) {
        const T inv_n = T(1) / static_cast<T>(n);
        const T dn = std::max(d_neg, T(1e-12));
        const T dp = std::max(d_pos, T(1e-12));
        const auto& bp = bank[static_cast<std::size_t>(pos)];
        const auto& bn = bank[static_cast<std::size_t>(neg)];
        for (std::size_t c = 0; c < d; ++c) {
          const T gn = (f_adv[i][c] - bn[c]) / dn;   // d d_neg / d anchor
          const T gp = (f_adv[i][c] - bp[c]) / dp;   // d d_pos / d anchor
          if (d_fadv) (*d_fadv)[i][c] += inv_n * (gn - gp);
          if (d_bank) {
            (*d_bank)[static_cast<std::size_t>(neg)][c] -= inv_n * gn;
            (*d_bank)[static_cast<std::size_t>(pos)][c] += inv_n * gp;
          }
        }
      }
    }
  }
  return static_cast<T>(loss / static_cast<double>(n));
}

// Mean cross-entropy of softmax(logits) against integer labels.
template <typename T>
T adv_ce(const std::vector<std::vector<T>>& logits, const std::vector<int>& labels,
         std::vector<std::vector<T>>* d_logits = nullptr) {
  const std::size_t n = logits.size();
  if (labels.size() != n) throw std::invalid_argument("adv_ce: labels must align with logits");
  if (n == 0) throw std::invalid_argument("adv_ce: empty batch");
  const std::size_t c = logits[0].size();
  if (d_logits) d_logits->assign(n, std::vector<T>(c, T(0)));

  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw std::out_of_range("adv_ce: label " + std::to_string(labels[i]) +
                              " out of range [0, " + std::to_string(c) + ")");
    double m = -std::numeric_limits<double>::infinity();
    for (T v : logits[i]) m = std::max(m, static_cast<double>(v));
    double den = 0;
    for (T v : logits[i]) den += std::exp(static_cast<double>(v) - m);
    const double log_den = m + std::log(den);
    loss += log_den - static_cast<double>(logits[i][static_cast<std::size_t>(labels[i])]);
    if (d_logits) {
      for (std::size_t k = 0; k < c; ++k) {
        const double p = std::exp(static_cast<double>(logits[i][k]) - log_den);
        (*d_logits)[i][k] = static_cast<T>(p / static_cast<double>(n));
      }
      (*d_logits)[i][static_cast<std::size_t>(labels[i])] -= T(1) / static_cast<T>(n);
    }
  }
  return static_cast<T>(loss / static_cast<double>(n));
}

// Mean squared feature drift between index-aligned embeddings.
template <typename T>
T align_loss(const Embeddings<T>& f_clean, const Embeddings<T>& f_adv,
             Embeddings<T>* d_clean = nullptr, Embeddings<T>* d_adv = nullptr) {
  const std::size_t n = f_clean.size();
  if (f_adv.size() != n) throw std::invalid_argument("align_loss: batch size mismatch");
  if (n == 0) throw std::invalid_argument("align_loss: empty batch");
  const std::size_t d = f_clean[0].size();
  if (d_clean) d_clean->assign(n, std::vector<T>(d, T(0)));
  if (d_adv) d_adv->assign(n, std::vector<T>(d, T(0)));

  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (f_adv[i].size() != d) throw std::invalid_argument("align_loss: dimension mismatch");
    for (std::size_t c = 0; c < d; ++c) {
      const double diff =
          static_cast<double>(f_clean[i][c]) - static_cast<double>(f_adv[i][c]);
      loss += diff * diff;
      if (d_clean) (*d_clean)[i][c] = static_cast<T>(2.0 * diff / static_cast<double>(n));
      if (d_adv) (*d_adv)[i][c] = static_cast<T>(-2.0 * diff / static_cast<double>(n));
    }
  }
  return static_cast<T>(loss / static_cast<double>(n));
}

}  // namespace ktcaa
