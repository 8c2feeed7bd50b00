#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ktcaa {

// H x W x 3 image, interleaved channels, row-major, canonical range [0,1].
template <typename T>
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> data;  // height * width * 3

  Image() = default;
  Image(std::size_t h, std::size_t w) : height(h), width(w), data(h * w * 3, T(0)) {}

  T& at(std::size_t y, std::size_t x, std::size_t c) { return data[(y * width + x) * 3 + c]; }
  const T& at(std::size_t y, std::size_t x, std::size_t c) const {
    return data[(y * width + x) * 3 + c];
  }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Image& o) const { return height == o.height && width == o.width; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }
};

template <typename T>
Image<T> clamp01(Image<T> img) {
  for (T& v : img.data) v = std::clamp(v, T(0), T(1));
  return img;
}

template <typename T>
bool image_finite(const Image<T>& img) {
  for (T v : img.data)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

template <typename T>
bool image_in_unit_range(const Image<T>& img) {
  for (T v : img.data)
    if (!(v >= T(0) && v <= T(1))) return false;
  return true;
}

template <typename T>
double image_l2_distance(const Image<T>& a, const Image<T>& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("image_l2_distance: shape mismatch");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

// --- binary PPM (P6, 8-bit) ---------------------------------------------
// Lossless 8-bit raster; decode maps to [0,1] by /255, encode rounds to the
// nearest 8-bit level, so write/read round-trips byte-identically.

template <typename T>
void save_ppm(const Image<T>& img, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_ppm: cannot open " + path.string());
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> buf(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = std::clamp(static_cast<double>(img.data[i]), 0.0, 1.0);
    buf[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("save_ppm: write failed for " + path.string());
}

template <typename T>
Image<T> load_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_ppm: cannot open " + path.string());
  std::string magic;
  f >> magic;
  if (magic != "P6") throw std::runtime_error("load_ppm: not a P6 file: " + path.string());
  // Header tokens may be separated by whitespace/comments.
  auto next_int = [&f, &path]() {
    long v = -1;
    while (true) {
      f >> std::ws;
      if (f.peek() == '#') {
        std::string line;
        std::getline(f, line);
        continue;
      }
      if (!(f >> v)) throw std::runtime_error("load_ppm: bad header in " + path.string());
      return v;
    }
  };
  const long w = next_int();
  const long h = next_int();
  const long maxval = next_int();
  if (w <= 0 || h <= 0 || maxval != 255)
    throw std::runtime_error("load_ppm: unsupported header in " + path.string());
  f.get();  // single whitespace after maxval
  Image<T> img(static_cast<std::size_t>(h), static_cast<std::size_t>(w));
  std::vector<unsigned char> buf(img.size());
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (f.gcount() != static_cast<std::streamsize>(buf.size()))
    throw std::runtime_error("load_ppm: truncated pixel data in " + path.string());
  for (std::size_t i = 0; i < img.size(); ++i)
    img.data[i] = static_cast<T>(buf[i]) / T(255);
  return img;
}

}  // namespace ktcaa
