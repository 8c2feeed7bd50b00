#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace ktcaa {

// Thrown for bad user input (config files, CLI values, malformed data files).
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  // contrastive / triplet objectives
  double temperature = 0.1;  // InfoNCE temperature
  double margin = 0.5;       // triplet margin

  // perturbation optimizer (MI-SGD). Bounds are given on the 0..255 pixel
  // scale and converted to the canonical [0,1] scale once, here.
  double momentum = 0.9;
  double epsilon_pixels = 8.0;
  double alpha_pixels = 0.0;  // 0 = epsilon/10
  int max_iter = 10;
  int update_direction = +1;
  bool per_batch_perturbation = false;  // ablation: reset perturbation per batch

  // meta-learning schedule
  int meta_test_period = 10;  // meta-train steps per meta-test
  int cycles = 200;

  // PK batch composition (batch_size = identities * instances)
  int batch_identities = 8;
  int batch_instances = 4;

  double inner_lr = 0.01;
  double outer_lr = 0.01;
  double outer_momentum = 0.9;

  // alignment augmentation
  double aa_probability = 0.5;
  double sketch_blur_sigma = 2.0;
  double sketch_dodge_guard = 1e-4;
  bool augmented_through_rgb_stem = false;  // ablation routing

  // component switches (ablation study)
  bool enable_aa = true;
  bool enable_ktc = true;
  bool enable_align = true;

  std::string profile = "desk";
  std::uint64_t seed = 0;
  int threads = 0;  // 0 = hardware concurrency
  int checkpoint_every = 50;

  std::string train_manifest;
  std::string eval_manifest;

  int batch_size() const { return batch_identities * batch_instances; }
  double epsilon() const { return epsilon_pixels / 255.0; }
  double alpha() const {
    const double a = alpha_pixels > 0 ? alpha_pixels : epsilon_pixels / 10.0;
    return a / 255.0;
  }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ValidationError("config field '" + field + "' " + why);
    };
    if (!(temperature > 0)) fail("train.temperature", "must be > 0");
    if (!(margin >= 0)) fail("train.margin", "must be >= 0");
    if (!(momentum >= 0 && momentum < 1)) fail("train.momentum", "must be in [0, 1)");
    if (!(epsilon_pixels > 0)) fail("train.epsilon_pixels", "must be > 0");
    if (alpha_pixels < 0) fail("train.alpha_pixels", "must be >= 0 (0 = epsilon/10)");
    if (max_iter < 0) fail("train.max_iter", "must be >= 0");
    if (update_direction != 1 && update_direction != -1)
      fail("train.update_direction", "must be +1 or -1");
    if (meta_test_period < 1) fail("train.meta_test_period", "must be >= 1");
    if (cycles < 0) fail("train.cycles", "must be >= 0");
    if (batch_identities < 2) fail("train.batch_identities", "must be >= 2");
    if (batch_instances < 2) fail("train.batch_instances", "must be >= 2");
    if (!(inner_lr >= 0)) fail("train.inner_lr", "must be >= 0");
    if (!(outer_lr >= 0)) fail("train.outer_lr", "must be >= 0");
    if (!(outer_momentum >= 0 && outer_momentum < 1))
      fail("train.outer_momentum", "must be in [0, 1)");
    if (!(aa_probability >= 0 && aa_probability <= 1))
      fail("train.aa_probability", "must be in [0, 1]");
    if (!(sketch_blur_sigma > 0)) fail("train.sketch_blur_sigma", "must be > 0");
    if (!(sketch_dodge_guard > 0)) fail("train.sketch_dodge_guard", "must be > 0");
    if (profile != "desk" && profile != "tiny" && profile != "resnet50")
      fail("train.profile", "must be one of desk, tiny, resnet50");
    if (threads < 0) fail("train.threads", "must be >= 0 (0 = hardware)");
    if (checkpoint_every < 0) fail("train.checkpoint_every", "must be >= 0 (0 = final only)");
  }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const std::string& section,
                                std::initializer_list<const char*> known) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : known)
      if (it.key() == k) { ok = true; break; }
    if (!ok)
      throw ValidationError("unknown config key '" + section + "." + it.key() + "'");
  }
}

template <typename T>
void maybe_get(const nlohmann::json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace detail

// Parses the "train" and "data" sections of a run config document. Unknown
// keys anywhere are rejected by name; missing keys keep their defaults.
inline TrainConfig train_config_from_json(const nlohmann::json& doc) {
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string& k = it.key();
    if (k != "train" && k != "data" && k != "synthetic" && k != "logging")
      throw ValidationError("unknown config section '" + k + "'");
  }
  TrainConfig c;
  if (doc.contains("train")) {
    const auto& t = doc.at("train");
    detail::reject_unknown_keys(
        t, "train",
        {"temperature", "margin", "momentum", "epsilon_pixels", "alpha_pixels", "max_iter",
         "update_direction", "per_batch_perturbation", "meta_test_period", "cycles",
         "batch_identities", "batch_instances", "inner_lr", "outer_lr", "outer_momentum",
         "aa_probability", "sketch_blur_sigma", "sketch_dodge_guard",
         "augmented_through_rgb_stem", "enable_aa", "enable_ktc", "enable_align", "profile",
         "seed", "threads", "checkpoint_every"});
    detail::maybe_get(t, "temperature", c.temperature);
    detail::maybe_get(t, "margin", c.margin);
    detail::maybe_get(t, "momentum", c.momentum);
    detail::maybe_get(t, "epsilon_pixels", c.epsilon_pixels);
    detail::maybe_get(t, "alpha_pixels", c.alpha_pixels);
    detail::maybe_get(t, "max_iter", c.max_iter);
    detail::maybe_get(t, "update_direction", c.update_direction);
    detail::maybe_get(t, "per_batch_perturbation", c.per_batch_perturbation);
    detail::maybe_get(t, "meta_test_period", c.meta_test_period);
    detail::maybe_get(t, "cycles", c.cycles);
    detail::maybe_get(t, "batch_identities", c.batch_identities);
    detail::maybe_get(t, "batch_instances", c.batch_instances);
    detail::maybe_get(t, "inner_lr", c.inner_lr);
    detail::maybe_get(t, "outer_lr", c.outer_lr);
    detail::maybe_get(t, "outer_momentum", c.outer_momentum);
    detail::maybe_get(t, "aa_probability", c.aa_probability);
    detail::maybe_get(t, "sketch_blur_sigma", c.sketch_blur_sigma);
    detail::maybe_get(t, "sketch_dodge_guard", c.sketch_dodge_guard);
    detail::maybe_get(t, "augmented_through_rgb_stem", c.augmented_through_rgb_stem);
    detail::maybe_get(t, "enable_aa", c.enable_aa);
    detail::maybe_get(t, "enable_ktc", c.enable_ktc);
    detail::maybe_get(t, "enable_align", c.enable_align);
    detail::maybe_get(t, "profile", c.profile);
    detail::maybe_get(t, "seed", c.seed);
    detail::maybe_get(t, "threads", c.threads);
    detail::maybe_get(t, "checkpoint_every", c.checkpoint_every);
  }
  if (doc.contains("data")) {
    const auto& d = doc.at("data");
    detail::reject_unknown_keys(d, "data", {"train_manifest", "eval_manifest"});
    detail::maybe_get(d, "train_manifest", c.train_manifest);
    detail::maybe_get(d, "eval_manifest", c.eval_manifest);
  }
  c.validate();
  return c;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json t;
  t["temperature"] = c.temperature;
  t["margin"] = c.margin;
  t["momentum"] = c.momentum;
  t["epsilon_pixels"] = c.epsilon_pixels;
  t["alpha_pixels"] = c.alpha_pixels;
  t["max_iter"] = c.max_iter;
  t["update_direction"] = c.update_direction;
  t["per_batch_perturbation"] = c.per_batch_perturbation;
  t["meta_test_period"] = c.meta_test_period;
  t["cycles"] = c.cycles;
  t["batch_identities"] = c.batch_identities;
  t["batch_instances"] = c.batch_instances;
  t["inner_lr"] = c.inner_lr;
  t["outer_lr"] = c.outer_lr;
  t["outer_momentum"] = c.outer_momentum;
  t["aa_probability"] = c.aa_probability;
  t["sketch_blur_sigma"] = c.sketch_blur_sigma;
  t["sketch_dodge_guard"] = c.sketch_dodge_guard;
  t["augmented_through_rgb_stem"] = c.augmented_through_rgb_stem;
  t["enable_aa"] = c.enable_aa;
  t["enable_ktc"] = c.enable_ktc;
  t["enable_align"] = c.enable_align;
  t["profile"] = c.profile;
  t["seed"] = c.seed;
  t["threads"] = c.threads;
  t["checkpoint_every"] = c.checkpoint_every;
  nlohmann::json d;
  d["train_manifest"] = c.train_manifest;
  d["eval_manifest"] = c.eval_manifest;
  return nlohmann::json{{"train", t}, {"data", d}};
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open config file: " + path);
  nlohmann::json doc;
  try {
    f >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config parse error in " + path + ": " + e.what());
  }
  return train_config_from_json(doc);
}

}  // namespace ktcaa
