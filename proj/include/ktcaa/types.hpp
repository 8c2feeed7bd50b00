#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ktcaa/image.hpp"

namespace ktcaa {

enum class Modality { kRgb, kSketch, kAugmented };

inline std::string modality_name(Modality m) {
  switch (m) {
    case Modality::kRgb: return "rgb";
    case Modality::kSketch: return "sketch";
    case Modality::kAugmented: return "augmented";
  }
  throw std::invalid_argument("modality_name: unknown tag");
}

inline Modality modality_from_name(const std::string& s) {
  if (s == "rgb") return Modality::kRgb;
  if (s == "sketch") return Modality::kSketch;
  if (s == "augmented") return Modality::kAugmented;
  throw std::invalid_argument("modality_from_name: unknown tag '" + s + "'");
}

template <typename T>
struct Sample {
  Image<T> image;
  int identity = 0;
  Modality modality = Modality::kRgb;
  std::optional<int> camera;
};

// 5-way few-shot task: RGB support set, sketch query set.
template <typename T>
struct Episode {
  std::vector<Sample<T>> support;
  std::vector<Sample<T>> query;
  int n_way = 5;
};

}  // namespace ktcaa
