#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "ktcaa/data.hpp"

using namespace ktcaa;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("ktcaa_data_" + tag + "_" +
                                                  std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST(Synthetic, GenerationIsByteDeterministic) {
  SyntheticSpec spec;
  spec.n_identities = 8;
  spec.images_per_identity_per_modality = 2;
  spec.height = 32;
  spec.width = 16;
  spec.seed = 0;
  const auto d1 = temp_dir("det1"), d2 = temp_dir("det2");
  const auto m1 = generate_synthetic<float>(spec, d1);
  const auto m2 = generate_synthetic<float>(spec, d2);
  ASSERT_EQ(m1.records.size(), m2.records.size());
  EXPECT_EQ(slurp(d1 / "manifest.csv"), slurp(d2 / "manifest.csv"));
  for (const auto& r : m1.records) EXPECT_EQ(slurp(d1 / r.path), slurp(d2 / r.path));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(Synthetic, CountsMatchSpec) {
  SyntheticSpec spec;
  spec.n_identities = 50;
  spec.images_per_identity_per_modality = 4;
  spec.height = 32;
  spec.width = 16;
  const auto dir = temp_dir("count");
  const auto m = generate_synthetic<float>(spec, dir);
  EXPECT_EQ(m.records.size(), 400u);
  std::size_t on_disk = 0;
  for (const auto& r : m.records)
    if (fs::exists(dir / r.path)) ++on_disk;
  EXPECT_EQ(on_disk, 400u);
  fs::remove_all(dir);
}

TEST(Synthetic, DecodedImagesAreInUnitRange) {
  SyntheticSpec spec;
  spec.n_identities = 7;
  spec.images_per_identity_per_modality = 2;
  spec.height = 32;
  spec.width = 16;
  const auto dir = temp_dir("unit");
  const auto m = generate_synthetic<float>(spec, dir);
  for (const std::string split : {"meta_train", "support", "query", "gallery"})
    for (const auto& s : load_split_samples<float>(m, split)) {
      EXPECT_TRUE(image_in_unit_range(s.image));
      EXPECT_TRUE(image_finite(s.image));
    }
  fs::remove_all(dir);
}

TEST(Synthetic, NearestCentroidOnRawPixelsSeparatesIdentities) {
  SyntheticSpec spec;
  spec.n_identities = 20;
  spec.images_per_identity_per_modality = 4;
  const auto dir = temp_dir("centroid");
  const auto m = generate_synthetic<float>(spec, dir);
  // all RGB images regardless of split
  std::map<int, std::vector<std::vector<float>>> by_id;
  for (const auto& r : m.records) {
    if (r.modality != Modality::kRgb) continue;
    const auto img = load_ppm<float>(dir / r.path);
    by_id[r.identity].push_back(img.data);
  }
  ASSERT_EQ(by_id.size(), 20u);
  int correct = 0, total = 0;
  for (const auto& [id, imgs] : by_id) {
    for (std::size_t leave = 0; leave < imgs.size(); ++leave) {
      double best = 1e300;
      int best_id = -1;
      for (const auto& [cid, cimgs] : by_id) {
        std::vector<double> centroid(cimgs[0].size(), 0.0);
        int n = 0;
        for (std::size_t k = 0; k < cimgs.size(); ++k) {
          if (cid == id && k == leave) continue;  // leave-one-out
          for (std::size_t j = 0; j < centroid.size(); ++j) centroid[j] += cimgs[k][j];
          ++n;
        }
        for (auto& v : centroid) v /= n;
        double d = 0;
        for (std::size_t j = 0; j < centroid.size(); ++j) {
          const double diff = centroid[j] - imgs[leave][j];
          d += diff * diff;
        }
        if (d < best) {
          best = d;
          best_id = cid;
        }
      }
      correct += (best_id == id);
      ++total;
    }
  }
  EXPECT_GT(static_cast<double>(correct) / total, 0.8);
  fs::remove_all(dir);
}

TEST(Manifest, CleanSyntheticHasZeroViolations) {
  SyntheticSpec spec;
  spec.n_identities = 8;
  spec.images_per_identity_per_modality = 2;
  spec.height = 32;
  spec.width = 16;
  const auto dir = temp_dir("clean");
  generate_synthetic<float>(spec, dir);
  const auto m = load_manifest(dir / "manifest.csv");
  EXPECT_TRUE(validate(m).empty());
  // splits are assigned as documented
  std::set<std::string> splits;
  for (const auto& r : m.records) splits.insert(r.split);
  EXPECT_TRUE(splits.count("meta_train"));
  EXPECT_TRUE(splits.count("support"));
  EXPECT_TRUE(splits.count("query"));
  EXPECT_TRUE(splits.count("gallery"));
  fs::remove_all(dir);
}

TEST(Manifest, LeakageViolationNamesIdentity) {
  SyntheticSpec spec;
  spec.n_identities = 8;
  spec.images_per_identity_per_modality = 2;
  spec.height = 32;
  spec.width = 16;
  const auto dir = temp_dir("leak");
  auto m = generate_synthetic<float>(spec, dir);
  // duplicate a meta_train record into the query split
  ManifestRecord bad;
  for (const auto& r : m.records)
    if (r.split == "meta_train") { bad = r; break; }
  bad.split = "query";
  m.records.push_back(bad);
  const auto violations = validate(m);
  std::size_t leaks = 0;
  for (const auto& v : violations)
    if (v.find("leakage") != std::string::npos) {
      ++leaks;
      EXPECT_NE(v.find(std::to_string(bad.identity)), std::string::npos) << v;
    }
  EXPECT_EQ(leaks, 1u);
  fs::remove_all(dir);
}

TEST(Manifest, MissingFileViolationNamesPath) {
  SyntheticSpec spec;
  spec.n_identities = 7;
  spec.images_per_identity_per_modality = 2;
  spec.height = 32;
  spec.width = 16;
  const auto dir = temp_dir("missing");
  const auto m = generate_synthetic<float>(spec, dir);
  const std::string victim = m.records[3].path;
  fs::remove(dir / victim);
  const auto violations = validate(m);
  ASSERT_EQ(violations.size(), 1u);
  EXPECT_NE(violations[0].find("missing file"), std::string::npos);
  EXPECT_NE(violations[0].find(victim), std::string::npos);
  fs::remove_all(dir);
}

TEST(Manifest, NonDenseLabelsFlagged) {
  DatasetManifest m;
  m.root = ".";
  m.records.push_back({"a.ppm", 0, Modality::kRgb, "meta_train"});
  m.records.push_back({"b.ppm", 2, Modality::kRgb, "meta_train"});  // gap at 1
  const auto violations = validate(m);
  bool found = false;
  for (const auto& v : violations)
    if (v.find("non-dense") != std::string::npos) found = true;
  EXPECT_TRUE(found);
}

TEST(Manifest, ParseErrorsCarryLineNumbers) {
  const auto dir = temp_dir("parse");
  {
    std::ofstream f(dir / "bad.csv");
    f << "path,identity,modality,split\n";
    f << "x.ppm,0,rgb,meta_train\n";
    f << "y.ppm,not_a_number,rgb,query\n";
  }
  try {
    load_manifest(dir / "bad.csv");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find(":3"), std::string::npos) << e.what();
  }
  {
    std::ofstream f(dir / "bad2.csv");
    f << "path,identity,modality,split\n";
    f << "x.ppm,0,rgb,bogus_split\n";
  }
  EXPECT_THROW(load_manifest(dir / "bad2.csv"), ValidationError);
  fs::remove_all(dir);
}

TEST(Manifest, ChecksumMismatchDetected) {
  const auto dir = temp_dir("cksum");
  {
    std::ofstream f(dir / "m.csv");
    f << "path,identity,modality,split\n";
    f << "x.ppm,0,rgb,meta_train\n";
    f << "#checksum,0123456789abcdef\n";
  }
  try {
    load_manifest(dir / "m.csv");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Manifest, SaveLoadRoundTrip) {
  const auto dir = temp_dir("roundtrip");
  DatasetManifest m;
  m.root = dir;
  m.records.push_back({"rgb/a.ppm", 3, Modality::kRgb, "meta_train"});
  m.records.push_back({"sketch/b.ppm", 7, Modality::kSketch, "query"});
  save_manifest(m, dir / "m.csv");
  const auto loaded = load_manifest(dir / "m.csv");
  ASSERT_EQ(loaded.records.size(), 2u);
  EXPECT_EQ(loaded.records[0].path, "rgb/a.ppm");
  EXPECT_EQ(loaded.records[0].identity, 3);
  EXPECT_EQ(loaded.records[1].modality, Modality::kSketch);
  EXPECT_EQ(loaded.records[1].split, "query");
  fs::remove_all(dir);
}

TEST(Synthetic, SpecValidation) {
  SyntheticSpec spec;
  spec.n_identities = 6;
  EXPECT_THROW(spec.validate(), ValidationError);
  spec.n_identities = 70;
  EXPECT_EQ(spec.resolved_episode_identities(), 20);
  spec.n_identities = 7;
  EXPECT_EQ(spec.resolved_episode_identities(), 5);
  spec.images_per_identity_per_modality = 1;
  EXPECT_THROW(spec.validate(), ValidationError);
}

TEST(Ppm, RoundTripIsByteStable) {
  const auto dir = temp_dir("ppm");
  Rng rng(3);
  Image<float> img(16, 12);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  save_ppm(img, dir / "a.ppm");
  const auto back = load_ppm<float>(dir / "a.ppm");
  save_ppm(back, dir / "b.ppm");
  EXPECT_EQ(slurp(dir / "a.ppm"), slurp(dir / "b.ppm"));
  // quantization error bounded by half a level
  for (std::size_t i = 0; i < img.size(); ++i)
    EXPECT_NEAR(back.data[i], img.data[i], 0.5 / 255 + 1e-6);
  fs::remove_all(dir);
}
