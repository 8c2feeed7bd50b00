#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "ktcaa/image.hpp"
#include "ktcaa/rng.hpp"

namespace ktcaa {

// Rectangular region in pixel coordinates. height == width == 0 is the
// explicit empty rect; otherwise extents must stay inside the target image.
struct Rect {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  bool empty() const { return height == 0 && width == 0; }

  bool valid_for(std::size_t img_h, std::size_t img_w) const {
    if (empty()) return true;
    return height >= 1 && width >= 1 && top + height <= img_h && left + width <= img_w;
  }
};

inline bool operator==(const Rect& a, const Rect& b) {
  return a.top == b.top && a.left == b.left && a.height == b.height && a.width == b.width;
}

// Binary H x W grid, 1 inside the perturbed region.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<unsigned char> data;

  Mask() = default;
  Mask(std::size_t h, std::size_t w) : height(h), width(w), data(h * w, 0) {}

  unsigned char& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  unsigned char at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
};

inline Mask mask_from_rect(const Rect& r, std::size_t img_h, std::size_t img_w) {
  if (!r.valid_for(img_h, img_w))
    throw std::invalid_argument("mask_from_rect: rect out of bounds");
  Mask m(img_h, img_w);
  for (std::size_t y = r.top; y < r.top + r.height; ++y)
    for (std::size_t x = r.left; x < r.left + r.width; ++x) m.at(y, x) = 1;
  return m;
}

struct SketchParams {
  double blur_sigma = 2.0;
  double dodge_guard = 1e-4;  // lower bound on the dodge denominator
};

namespace detail {

// Mirror indexing without duplicating the border pixel (numpy 'reflect').
inline std::size_t reflect_index(long i, long n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return static_cast<std::size_t>(i);
}

inline std::vector<double> gaussian_kernel(double sigma) {
  const long radius = static_cast<long>(std::ceil(2.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (long i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

}  // namespace detail

// Deterministic pencil-sketch rendering (color-dodge):
//   gray    = 0.299 R + 0.587 G + 0.114 B
//   blurred = gaussian blur of (1 - gray), reflect padding
//   out     = clamp(gray / max(1 - blurred, guard), 0, 1), replicated x3
// The blur kernel radius is ceil(2 sigma). The separable passes below equal a
// direct 2D product-kernel convolution.
template <typename T>
Image<T> sketch_transform(const Image<T>& img, const SketchParams& p = {}) {
  const std::size_t h = img.height, w = img.width;
  if (h < 8 || w < 8) throw std::invalid_argument("sketch_transform: image smaller than 8x8");

  std::vector<double> gray(h * w), inv(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double g = 0.299 * static_cast<double>(img.at(y, x, 0)) +
                       0.587 * static_cast<double>(img.at(y, x, 1)) +
                       0.114 * static_cast<double>(img.at(y, x, 2));
      gray[y * w + x] = g;
      inv[y * w + x] = 1.0 - g;
    }

  const auto kernel = detail::gaussian_kernel(p.blur_sigma);
  const long radius = static_cast<long>(kernel.size() / 2);

  std::vector<double> tmp(h * w), blurred(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0;
      for (long k = -radius; k <= radius; ++k)
        s += kernel[k + radius] *
             inv[y * w + detail::reflect_index(static_cast<long>(x) + k, static_cast<long>(w))];
      tmp[y * w + x] = s;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0;
      for (long k = -radius; k <= radius; ++k)
        s += kernel[k + radius] *
             tmp[detail::reflect_index(static_cast<long>(y) + k, static_cast<long>(h)) * w + x];
      blurred[y * w + x] = s;
    }

  Image<T> out(h, w);
  for (std::size_t i = 0; i < h * w; ++i) {
    const double denom = std::max(1.0 - blurred[i], p.dodge_guard);
    const double v = std::clamp(gray[i] / denom, 0.0, 1.0);
    out.data[3 * i + 0] = static_cast<T>(v);
    out.data[3 * i + 1] = static_cast<T>(v);
    out.data[3 * i + 2] = static_cast<T>(v);
  }
  return out;
}

// Random rect with area fraction in [0.2, 0.5] and aspect (h/w) in [0.5, 2.0].
// Each attempt draws area, aspect and a corner over the full image; placement
// is accepted when the rect fits. After 10 failed attempts, falls back to the
// centered rect of area fraction 0.25 and aspect 1.
// Draws per attempt: area, aspect, top, left (4 uniform draws).
inline Rect sample_rect(Rng& rng, std::size_t img_h, std::size_t img_w) {
  if (img_h < 8 || img_w < 8) throw std::invalid_argument("sample_rect: image smaller than 8x8");
  const double area = static_cast<double>(img_h * img_w);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double frac = rng.uniform(0.2, 0.5);
    const double aspect = rng.uniform(0.5, 2.0);
    const double target = frac * area;
    std::size_t rh = static_cast<std::size_t>(
        std::max(1l, std::lround(std::sqrt(target * aspect))));
    std::size_t rw = static_cast<std::size_t>(
        std::max(1l, std::lround(std::sqrt(target / aspect))));
    const std::size_t top = rng.uniform_index(img_h);
    const std::size_t left = rng.uniform_index(img_w);
    if (top + rh <= img_h && left + rw <= img_w) return Rect{top, left, rh, rw};
  }
  std::size_t side = static_cast<std::size_t>(std::lround(std::sqrt(0.25 * area)));
  side = std::clamp<std::size_t>(side, 1, std::min(img_h, img_w));
  return Rect{(img_h - side) / 2, (img_w - side) / 2, side, side};
}

// Replaces the rect region of rgb with the corresponding sketch pixels.
template <typename T>
Image<T> local_sketch_replace(const Image<T>& rgb, const Image<T>& sketch, const Rect& rect) {
  if (!rgb.same_shape(sketch))
    throw std::invalid_argument("local_sketch_replace: shape mismatch");
  if (!rect.valid_for(rgb.height, rgb.width))
    throw std::invalid_argument("local_sketch_replace: rect out of bounds");
  Image<T> out = rgb;
  for (std::size_t y = rect.top; y < rect.top + rect.height; ++y)
    for (std::size_t x = rect.left; x < rect.left + rect.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = sketch.at(y, x, c);
  return out;
}

// L2 norms of the full and the masked sketch-minus-rgb difference.
template <typename T>
std::pair<double, double> delta_norms(const Image<T>& rgb, const Image<T>& sketch,
                                      const Mask& mask) {
  if (!rgb.same_shape(sketch)) throw std::invalid_argument("delta_norms: image shape mismatch");
  if (mask.height != rgb.height || mask.width != rgb.width)
    throw std::invalid_argument("delta_norms: mask shape mismatch");
  double global = 0, local = 0;
  for (std::size_t y = 0; y < rgb.height; ++y)
    for (std::size_t x = 0; x < rgb.width; ++x) {
      double px = 0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double d =
            static_cast<double>(sketch.at(y, x, c)) - static_cast<double>(rgb.at(y, x, c));
        px += d * d;
      }
      global += px;
      if (mask.at(y, x)) local += px;
    }
  return {std::sqrt(global), std::sqrt(local)};
}

}  // namespace ktcaa
