#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "ktcaa/config.hpp"
#include "ktcaa/encoder.hpp"
#include "ktcaa/image.hpp"
#include "ktcaa/losses.hpp"
#include "ktcaa/parallel.hpp"
#include "ktcaa/types.hpp"

namespace ktcaa {

enum class PerturbPhase { kMetaTrain, kMetaTest };

inline std::string phase_name(PerturbPhase p) {
  return p == PerturbPhase::kMetaTrain ? "meta_train" : "meta_test";
}

// Universal perturbation state for MI-SGD updates. One instance persists for
// a whole run; the momentum buffer is carried across meta-train and meta-test
// phases unchanged (only the gradients feeding it differ).
template <typename T>
struct PerturbationState {
  Image<T> perturbation;  // kept within [-bound, bound]
  Image<T> momentum;
  T bound = 0;
  T step_size = 0;
  T momentum_coef = 0;
  PerturbPhase phase = PerturbPhase::kMetaTrain;
  long iteration = 0;
  bool zero_grad_flagged = false;

  static PerturbationState make(std::size_t h, std::size_t w, T bound, T step_size,
                                T momentum_coef) {
    if (!(bound > T(0))) throw std::invalid_argument("PerturbationState: bound must be > 0");
    if (!(step_size > T(0)))
      throw std::invalid_argument("PerturbationState: step size must be > 0");
    if (!(momentum_coef >= T(0) && momentum_coef < T(1)))
      throw std::invalid_argument("PerturbationState: momentum must be in [0, 1)");
    PerturbationState s;
    s.perturbation = Image<T>(h, w);
    s.momentum = Image<T>(h, w);
    s.bound = bound;
    s.step_size = step_size;
    s.momentum_coef = momentum_coef;
    return s;
  }

  bool within_bound(double slack = 0.0) const {
    for (T v : perturbation.data)
      if (std::abs(static_cast<double>(v)) > static_cast<double>(bound) + slack) return false;
    return true;
  }
};

// One MI-SGD update:
//   momentum <- theta * momentum + grad / ||grad||_1
//   perturbation <- clip(perturbation + direction * alpha * sign(momentum))
// A zero gradient is a legal no-op (hinge losses go fully inactive); it sets
// a flag instead of failing. Non-finite gradients are an error.
template <typename T>
void perturb_step(PerturbationState<T>& s, const Image<T>& grad, int direction) {
  if (direction != 1 && direction != -1)
    throw std::invalid_argument("perturb_step: direction must be +1 or -1");
  if (!grad.same_shape(s.perturbation))
    throw std::invalid_argument("perturb_step: gradient shape mismatch");
  double l1 = 0;
  for (T v : grad.data) {
    if (!std::isfinite(static_cast<double>(v)))
      throw std::runtime_error("perturb_step: non-finite gradient");
    l1 += std::abs(static_cast<double>(v));
  }
  if (l1 == 0.0) {
    s.zero_grad_flagged = true;
    return;
  }
  const T inv_l1 = static_cast<T>(1.0 / l1);
  const T step = static_cast<T>(direction) * s.step_size;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    T& m = s.momentum.data[i];
    m = s.momentum_coef * m + grad.data[i] * inv_l1;
    T sign = T(0);
    if (m > T(0)) sign = T(1);
    else if (m < T(0)) sign = T(-1);
    T& v = s.perturbation.data[i];
    v = std::clamp(v + step * sign, -s.bound, s.bound);
  }
  ++s.iteration;
}

// x_adv = clamp(x + perturbation, 0, 1). Clamping keeps the result a valid
// image; the raw sum can leave the canonical range.
template <typename T>
Image<T> apply_perturbation(const Image<T>& x, const Image<T>& perturbation) {
  if (!x.same_shape(perturbation))
    throw std::invalid_argument("apply_perturbation: shape mismatch");
  Image<T> out(x.height, x.width);
  for (std::size_t i = 0; i < x.size(); ++i)
    out.data[i] = std::clamp(x.data[i] + perturbation.data[i], T(0), T(1));
  return out;
}

// Optimizes the universal perturbation for max_iter MI-SGD iterations against
// the batch-hard triplet objective. The bank embeddings are fixed (parameters
// frozen throughout). Returns the objective value at the last iteration.
template <typename T>
T optimize_perturbation(const EncoderParams<T>& params,
                        const std::vector<EncodeItem<T>>& batch,
                        const std::vector<int>& ids_adv, const Embeddings<T>& bank_emb,
                        const std::vector<int>& ids_bank, PerturbationState<T>& state,
                        const TrainConfig& cfg, ThreadPool& pool) {
  if (batch.empty()) throw std::invalid_argument("optimize_perturbation: empty batch");
  if (batch.size() != ids_adv.size())
    throw std::invalid_argument("optimize_perturbation: ids must align with batch");
  if (cfg.per_batch_perturbation) state.perturbation.fill(T(0));
  for (const auto& item : batch)
    if (!item.image->same_shape(state.perturbation))
      throw std::invalid_argument(
          "optimize_perturbation: image shape differs from perturbation shape");

  EncoderFlags flags{cfg.augmented_through_rgb_stem};
  T last = T(0);
  std::vector<Image<T>> adv(batch.size());
  std::vector<EncodeItem<T>> items(batch.size());
  BatchCache<T> cache;
  for (int it = 0; it < cfg.max_iter; ++it) {
    for (std::size_t i = 0; i < batch.size(); ++i) {
      adv[i] = apply_perturbation(*batch[i].image, state.perturbation);
      items[i] = {&adv[i], batch[i].modality};
    }
    encoder_forward(params, items, flags, pool, cache);
    Embeddings<T> f_adv(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) f_adv[i] = cache.items[i].normalized;

    Embeddings<T> d_fadv;
    last = adv_triplet(f_adv, bank_emb, ids_adv, ids_bank, static_cast<T>(cfg.margin),
                       &d_fadv, static_cast<Embeddings<T>*>(nullptr));

    std::vector<Image<T>> d_inputs;
    encoder_backward(params, cache, d_fadv, {}, pool, static_cast<EncoderParams<T>*>(nullptr),
                     &d_inputs);

    // d x_adv / d perturbation is 1 where the clamp is inactive. The
    // perturbation is shared, so per-image input gradients sum.
    Image<T> grad(state.perturbation.height, state.perturbation.width);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const Image<T>& x = *batch[i].image;
      for (std::size_t j = 0; j < grad.size(); ++j) {
        const T s = x.data[j] + state.perturbation.data[j];
        if (s >= T(0) && s <= T(1)) grad.data[j] += d_inputs[i].data[j];
      }
    }
    perturb_step(state, grad, cfg.update_direction);
  }
  return last;
}

// Spec-shaped overload: encodes the bank itself with the frozen parameters.
template <typename T>
T optimize_perturbation(const EncoderParams<T>& params, const std::vector<Sample<T>>& batch,
                        const std::vector<Sample<T>>& bank, PerturbationState<T>& state,
                        const TrainConfig& cfg, ThreadPool& pool) {
  EncoderFlags flags{cfg.augmented_through_rgb_stem};
  Embeddings<T> bank_emb = encode(params, bank, flags, pool);
  std::vector<int> ids_bank;
  ids_bank.reserve(bank.size());
  for (const auto& s : bank) ids_bank.push_back(s.identity);
  std::vector<EncodeItem<T>> items;
  std::vector<int> ids_adv;
  items.reserve(batch.size());
  for (const auto& s : batch) {
    items.push_back({&s.image, s.modality});
    ids_adv.push_back(s.identity);
  }
  return optimize_perturbation(params, items, ids_adv, bank_emb, ids_bank, state, cfg, pool);
}

}  // namespace ktcaa
