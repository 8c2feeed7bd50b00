#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace ktcaa {

// Single deterministic random source. All sampling decisions in a run flow
// through one Rng instance consumed in a documented order, so equal seeds give
// bit-identical runs. The raw engine is std::mt19937_64 (sequence fixed by the
// standard); the derived draws below avoid std::*_distribution so the mapping
// from raw words to values is pinned by this file rather than by the stdlib.
//
// Draw costs (raw 64-bit words consumed):
//   uniform(), uniform(a,b), bernoulli(): 1
//   uniform_index(n): 1 per rejection round (almost always 1)
//   normal(): 2 per Box-Muller pair, cached, so 2 per two calls
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling keeps the draw unbiased.
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw std::invalid_argument("Rng::uniform_index: n must be > 0");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return static_cast<std::size_t>(x % n);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Derives an independent child seed (consumes one draw).
  std::uint64_t child_seed() { return engine_(); }

  std::string save_state() const {
    std::ostringstream os;
    os.precision(17);
    os << engine_;
    if (have_spare_) os << " 1 " << spare_;
    else os << " 0 0";
    return os.str();
  }

  void restore_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    int flag = 0;
    is >> flag >> spare_;
    if (is.fail()) throw std::runtime_error("Rng::restore_state: malformed state string");
    have_spare_ = (flag != 0);
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Mixes a base seed with stream tags, for deriving per-identity/per-view
// generator seeds without consuming the parent stream (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace ktcaa
