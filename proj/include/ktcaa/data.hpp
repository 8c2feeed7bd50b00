#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ktcaa/config.hpp"
#include "ktcaa/image.hpp"
#include "ktcaa/rng.hpp"
#include "ktcaa/types.hpp"

namespace ktcaa {

struct ManifestRecord {
  std::string path;  // relative to the manifest root
  int identity = 0;
  Modality modality = Modality::kRgb;
  std::string split;  // meta_train | support | query | gallery
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestRecord> records;
};

inline bool known_split(const std::string& s) {
  return s == "meta_train" || s == "support" || s == "query" || s == "gallery";
}

namespace detail {

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string record_line(const ManifestRecord& r) {
  return r.path + "," + std::to_string(r.identity) + "," + modality_name(r.modality) + "," +
         r.split;
}

}  // namespace detail

inline std::uint64_t manifest_checksum(const DatasetManifest& m) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& r : m.records) h = detail::fnv1a(detail::record_line(r) + "\n", h);
  return h;
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_manifest: cannot open " + path.string());
  f << "path,identity,modality,split\n";
  for (const auto& r : m.records) f << detail::record_line(r) << "\n";
  char hex[32];
  std::snprintf(hex, sizeof hex, "%016llx",
                static_cast<unsigned long long>(manifest_checksum(m)));
  f << "#checksum," << hex << "\n";
  if (!f) throw std::runtime_error("save_manifest: write failed for " + path.string());
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("load_manifest: cannot open " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  std::string checksum_hex;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.rfind("#checksum,", 0) == 0) {
      checksum_hex = line.substr(10);
      continue;
    }
    if (line[0] == '#') continue;
    if (!header_seen) {
      if (line != "path,identity,modality,split")
        throw ValidationError("load_manifest: " + path.string() + ":" +
                              std::to_string(lineno) + ": bad header line");
      header_seen = true;
      continue;
    }
    std::vector<std::string> parts;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) parts.push_back(tok);
    if (parts.size() != 4)
      throw ValidationError("load_manifest: " + path.string() + ":" + std::to_string(lineno) +
                            ": expected 4 comma-separated fields");
    ManifestRecord r;
    r.path = parts[0];
    try {
      r.identity = std::stoi(parts[1]);
    } catch (const std::exception&) {
      throw ValidationError("load_manifest: " + path.string() + ":" + std::to_string(lineno) +
                            ": bad identity '" + parts[1] + "'");
    }
    if (r.identity < 0)
      throw ValidationError("load_manifest: " + path.string() + ":" + std::to_string(lineno) +
                            ": identity must be non-negative");
    try {
      r.modality = modality_from_name(parts[2]);
    } catch (const std::exception&) {
      throw ValidationError("load_manifest: " + path.string() + ":" + std::to_string(lineno) +
                            ": bad modality '" + parts[2] + "'");
    }
    if (!known_split(parts[3]))
      throw ValidationError("load_manifest: " + path.string() + ":" + std::to_string(lineno) +
                            ": bad split '" + parts[3] + "'");
    r.split = parts[3];
    m.records.push_back(std::move(r));
  }
  if (!header_seen)
    throw ValidationError("load_manifest: " + path.string() + ":1: missing header line");
  if (!checksum_hex.empty()) {
    char hex[32];
    std::snprintf(hex, sizeof hex, "%016llx",
                  static_cast<unsigned long long>(manifest_checksum(m)));
    if (checksum_hex != hex)
      throw ValidationError("load_manifest: " + path.string() +
                            ": checksum mismatch (expected " + checksum_hex + ", computed " +
                            hex + ")");
  }
  return m;
}

// Reports missing files, identity leakage between meta_train and the episode
// splits, and gaps in each pool's identity range (labels are expected to map
// densely; a gap usually means records were deleted).
inline std::vector<std::string> validate(const DatasetManifest& m) {
  std::vector<std::string> violations;
  for (const auto& r : m.records)
    if (!std::filesystem::exists(m.root / r.path))
      violations.push_back("missing file: " + (m.root / r.path).string());

  std::set<int> train_ids, episode_ids;
  for (const auto& r : m.records) {
    if (r.split == "meta_train") train_ids.insert(r.identity);
    else episode_ids.insert(r.identity);
  }
  for (int id : train_ids)
    if (episode_ids.count(id))
      violations.push_back("identity leakage: id " + std::to_string(id) +
                           " appears in meta_train and in an episode split");

  auto check_dense = [&violations](const std::set<int>& ids, const std::string& pool) {
    if (ids.empty()) return;
    const int lo = *ids.begin(), hi = *ids.rbegin();
    if (static_cast<int>(ids.size()) != hi - lo + 1)
      violations.push_back("non-dense labels in " + pool + " pool: range [" +
                           std::to_string(lo) + ", " + std::to_string(hi) + "] has " +
                           std::to_string(ids.size()) + " identities");
  };
  check_dense(train_ids, "meta_train");
  check_dense(episode_ids, "episode");
  return violations;
}

template <typename T>
std::vector<Sample<T>> load_split_samples(const DatasetManifest& m, const std::string& split) {
  std::vector<Sample<T>> out;
  for (const auto& r : m.records) {
    if (r.split != split) continue;
    Sample<T> s;
    s.image = load_ppm<T>(m.root / r.path);
    if (!image_in_unit_range(s.image))
      throw std::runtime_error("load_split_samples: decoded image outside [0,1]: " + r.path);
    s.identity = r.identity;
    s.modality = r.modality;
    out.push_back(std::move(s));
  }
  return out;
}

// Dense label mapping for a pool of original identities (sorted order).
struct IdentityMap {
  std::vector<int> dense_to_original;
  std::map<int, int> original_to_dense;

  static IdentityMap from_ids(const std::set<int>& ids) {
    IdentityMap im;
    for (int id : ids) {
      im.original_to_dense[id] = static_cast<int>(im.dense_to_original.size());
      im.dense_to_original.push_back(id);
    }
    return im;
  }

  int dense(int original) const {
    auto it = original_to_dense.find(original);
    if (it == original_to_dense.end())
      throw std::out_of_range("IdentityMap: unknown identity " + std::to_string(original));
    return it->second;
  }
};

// --- synthetic corpus -------------------------------------------------------

struct SyntheticSpec {
  int n_identities = 70;
  int images_per_identity_per_modality = 4;
  std::size_t height = 64;
  std::size_t width = 32;
  int n_artists = 3;
  std::uint64_t seed = 0;
  int episode_identities = 0;  // 0 = auto: max(5, 2n/7)

  int resolved_episode_identities() const {
    if (episode_identities > 0) return episode_identities;
    return std::max(5, 2 * n_identities / 7);
  }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ValidationError("synthetic spec field '" + field + "' " + why);
    };
    if (n_identities < 7) fail("n_identities", "must be >= 7");
    if (images_per_identity_per_modality < 2)
      fail("images_per_identity_per_modality", "must be >= 2");
    if (height < 8) fail("height", "must be >= 8");
    if (width < 8) fail("width", "must be >= 8");
    if (n_artists < 1) fail("n_artists", "must be >= 1");
    const int e = resolved_episode_identities();
    if (e < 5) fail("episode_identities", "must be >= 5");
    if (n_identities - e < 2) fail("episode_identities", "must leave >= 2 meta-train identities");
  }
};

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& obj) {
  detail::reject_unknown_keys(obj, "synthetic",
                              {"n_identities", "images_per_identity_per_modality", "height",
                               "width", "n_artists", "seed", "episode_identities"});
  SyntheticSpec s;
  detail::maybe_get(obj, "n_identities", s.n_identities);
  detail::maybe_get(obj, "images_per_identity_per_modality",
                    s.images_per_identity_per_modality);
  detail::maybe_get(obj, "height", s.height);
  detail::maybe_get(obj, "width", s.width);
  detail::maybe_get(obj, "n_artists", s.n_artists);
  detail::maybe_get(obj, "seed", s.seed);
  detail::maybe_get(obj, "episode_identities", s.episode_identities);
  s.validate();
  return s;
}

namespace detail {

struct FigureSpec {
  double head_cy, head_ry, head_rx;
  double torso_top, torso_h, torso_hw;
  double leg_len, leg_hw;
  double torso_color[3], leg_color[3], head_color[3];
  double bg_base;
};

// Identity-determined body proportions and colors. Draw order matters for
// reproducibility; do not reorder.
inline FigureSpec sample_figure(Rng& rng, std::size_t h, std::size_t w) {
  FigureSpec f;
  const double hh = static_cast<double>(h), ww = static_cast<double>(w);
  f.head_cy = (0.12 + rng.uniform() * 0.05) * hh;
  f.head_ry = (0.055 + rng.uniform() * 0.045) * hh;
  f.head_rx = (0.11 + rng.uniform() * 0.09) * ww;
  f.torso_top = f.head_cy + f.head_ry + 1.0;
  f.torso_h = (0.26 + rng.uniform() * 0.14) * hh;
  f.torso_hw = (0.14 + rng.uniform() * 0.16) * ww;
  f.leg_len = (0.22 + rng.uniform() * 0.16) * hh;
  f.leg_hw = (0.38 + rng.uniform() * 0.10) * f.torso_hw;
  for (int c = 0; c < 3; ++c) f.torso_color[c] = 0.10 + rng.uniform() * 0.80;
  for (int c = 0; c < 3; ++c) f.leg_color[c] = 0.10 + rng.uniform() * 0.80;
  for (int c = 0; c < 3; ++c) f.head_color[c] = 0.35 + rng.uniform() * 0.45;
  f.bg_base = 0.70 + rng.uniform() * 0.25;
  return f;
}

enum class Part { kHead, kTorso, kLegLeft, kLegRight };

inline bool inside_part(const FigureSpec& f, Part part, double cx, double dx, double dy,
                        double y, double x) {
  const double px = x - dx, py = y - dy;
  switch (part) {
    case Part::kHead: {
      const double ey = (py - f.head_cy) / f.head_ry;
      const double ex = (px - cx) / f.head_rx;
      return ey * ey + ex * ex <= 1.0;
    }
    case Part::kTorso:
      return py >= f.torso_top && py <= f.torso_top + f.torso_h && px >= cx - f.torso_hw &&
             px <= cx + f.torso_hw;
    case Part::kLegLeft: {
      const double top = f.torso_top + f.torso_h;
      return py > top && py <= top + f.leg_len && px >= cx - f.torso_hw &&
             px <= cx - f.torso_hw + 2.0 * f.leg_hw;
    }
    case Part::kLegRight: {
      const double top = f.torso_top + f.torso_h;
      return py > top && py <= top + f.leg_len && px <= cx + f.torso_hw &&
             px >= cx + f.torso_hw - 2.0 * f.leg_hw;
    }
  }
  return false;
}

template <typename T>
Image<T> render_rgb_view(const FigureSpec& f, Rng& rng, std::size_t h, std::size_t w) {
  const double dx = rng.uniform(-2.0, 2.0);
  const double dy = rng.uniform(-1.0, 1.0);
  const double bg = std::clamp(f.bg_base + rng.uniform(-0.05, 0.05), 0.0, 1.0);
  const double brightness = rng.uniform(0.85, 1.15);
  const double cx = static_cast<double>(w) / 2.0;

  Image<T> img(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double* color = nullptr;
      const double yy = static_cast<double>(y), xx = static_cast<double>(x);
      if (inside_part(f, Part::kHead, cx, dx, dy, yy, xx)) color = f.head_color;
      else if (inside_part(f, Part::kTorso, cx, dx, dy, yy, xx)) color = f.torso_color;
      else if (inside_part(f, Part::kLegLeft, cx, dx, dy, yy, xx) ||
               inside_part(f, Part::kLegRight, cx, dx, dy, yy, xx))
        color = f.leg_color;
      for (std::size_t c = 0; c < 3; ++c)
        img.at(y, x, c) =
            static_cast<T>(color ? std::clamp(color[c] * brightness, 0.0, 1.0) : bg);
    }
  return img;
}

// Outline sketch: per part, pixels inside the part that have a neighbour
// outside it within the stroke radius. Artist index sets stroke width and the
// probability of dropping individual outline pixels.
template <typename T>
Image<T> render_sketch_view(const FigureSpec& f, Rng& rng, std::size_t h, std::size_t w,
                            int artist) {
  const double dx = rng.uniform(-1.0, 1.0);
  const double dy = rng.uniform(-1.0, 1.0);
  const double ink = rng.uniform(0.02, 0.28);
  const int stroke = 1 + artist % 3;
  const double dropout = 0.05 + 0.06 * static_cast<double>(artist % 3);
  const double cx = static_cast<double>(w) / 2.0;

  Image<T> img(h, w);
  img.fill(T(1));
  const Part parts[] = {Part::kHead, Part::kTorso, Part::kLegLeft, Part::kLegRight};
  for (Part part : parts) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double yy = static_cast<double>(y), xx = static_cast<double>(x);
        if (!inside_part(f, part, cx, dx, dy, yy, xx)) continue;
        bool edge = false;
        for (int ny = -stroke; ny <= stroke && !edge; ++ny)
          for (int nx = -stroke; nx <= stroke && !edge; ++nx)
            if (!inside_part(f, part, cx, dx, dy, yy + ny, xx + nx)) edge = true;
        if (!edge) continue;
        if (rng.bernoulli(dropout)) continue;
        for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<T>(ink);
      }
  }
  return img;
}

}  // namespace detail

// Writes a procedural RGB + sketch corpus and its manifest. Identities are
// split into a meta-train pool and an episode pool; episode RGB views
// alternate between support and gallery, episode sketch views become queries.
// Same spec and seed produce byte-identical output.
template <typename T>
DatasetManifest generate_synthetic(const SyntheticSpec& spec,
                                   const std::filesystem::path& out_dir) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "rgb", ec);
  std::filesystem::create_directories(out_dir / "sketch", ec);
  if (!std::filesystem::exists(out_dir / "rgb") || !std::filesystem::exists(out_dir / "sketch"))
    throw std::runtime_error("generate_synthetic: cannot create output directories under " +
                             out_dir.string());

  const int n_episode = spec.resolved_episode_identities();
  const int first_episode_id = spec.n_identities - n_episode;

  DatasetManifest m;
  m.root = out_dir;
  char name[64];
  for (int id = 0; id < spec.n_identities; ++id) {
    Rng id_rng(mix_seed(spec.seed, static_cast<std::uint64_t>(id)));
    const detail::FigureSpec fig = detail::sample_figure(id_rng, spec.height, spec.width);
    const bool episode = id >= first_episode_id;

    for (int v = 0; v < spec.images_per_identity_per_modality; ++v) {
      Rng view_rng(mix_seed(spec.seed, 1000003ull * static_cast<std::uint64_t>(id) +
                                           2ull * static_cast<std::uint64_t>(v)));
      Image<T> img = detail::render_rgb_view<T>(fig, view_rng, spec.height, spec.width);
      std::snprintf(name, sizeof name, "rgb/id%04d_v%02d.ppm", id, v);
      save_ppm(img, out_dir / name);
      ManifestRecord r;
      r.path = name;
      r.identity = id;
      r.modality = Modality::kRgb;
      r.split = episode ? (v % 2 == 0 ? "support" : "gallery") : "meta_train";
      m.records.push_back(r);
    }
    for (int v = 0; v < spec.images_per_identity_per_modality; ++v) {
      Rng view_rng(mix_seed(spec.seed, 1000003ull * static_cast<std::uint64_t>(id) +
                                           2ull * static_cast<std::uint64_t>(v) + 1ull));
      Image<T> img = detail::render_sketch_view<T>(fig, view_rng, spec.height, spec.width,
                                                   v % spec.n_artists);
      std::snprintf(name, sizeof name, "sketch/id%04d_v%02d.ppm", id, v);
      save_ppm(img, out_dir / name);
      ManifestRecord r;
      r.path = name;
      r.identity = id;
      r.modality = Modality::kSketch;
      r.split = episode ? "query" : "meta_train";
      m.records.push_back(r);
    }
  }
  save_manifest(m, out_dir / "manifest.csv");
  return m;
}

}  // namespace ktcaa
