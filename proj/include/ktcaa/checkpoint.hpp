#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ktcaa/config.hpp"
#include "ktcaa/encoder.hpp"
#include "ktcaa/ktc.hpp"
#include "ktcaa/tensor.hpp"

namespace ktcaa {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts are unsupported");

inline constexpr const char* kCheckpointFormat = "ktcaa.checkpoint.v1";

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename T>
void write_f32_blob(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open blob for writing: " + path.string());
  std::vector<float> buf(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) buf[i] = static_cast<float>(t.data[i]);
  f.write(reinterpret_cast<const char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!f) throw CheckpointError("blob write failed: " + path.string());
}

template <typename T>
void read_f32_blob(const std::filesystem::path& path, Tensor<T>& t) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("missing tensor blob: " + path.string());
  std::vector<float> buf(t.size());
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (f.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(float)))
    throw CheckpointError("truncated tensor blob: " + path.string());
  for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = static_cast<T>(buf[i]);
}

}  // namespace detail

// Extra run state stored alongside the model so training can resume exactly:
// outer-optimizer tensors, the sampling RNG, counters, the label mapping.
template <typename T>
struct CheckpointExtras {
  std::map<std::string, const Tensor<T>*> extra_tensors;
  std::string rng_state;
  long step = 0;
  long cycle = 0;
  std::vector<int> label_map;  // dense -> original identity
};

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const EncoderParams<T>& params,
                     const PerturbationState<T>& perturb, const TrainConfig& cfg,
                     const CheckpointExtras<T>& extras = {}) {
  std::filesystem::create_directories(dir / "tensors");
  std::ofstream f(dir / "manifest.txt");
  if (!f) throw CheckpointError("cannot write checkpoint manifest in " + dir.string());

  f << "format " << kCheckpointFormat << "\n";
  const EncoderProfile& pr = params.profile;
  f << "profile " << pr.name << " " << pr.stem1 << " " << pr.stem2 << " " << pr.trunk1 << " "
    << pr.trunk2 << " " << pr.embed_dim << " " << pr.n_classes << "\n";

  auto emit = [&](const std::string& name, const Tensor<T>& t) {
    f << "tensor " << name << " " << t.shape.size();
    for (auto d : t.shape) f << " " << d;
    f << "\n";
    detail::write_f32_blob(dir / "tensors" / (name + ".bin"), t);
  };
  for (auto& [name, t] : params.tensors()) emit(name, *t);

  Tensor<T> pv({perturb.perturbation.height, perturb.perturbation.width, 3});
  pv.data = perturb.perturbation.data;
  Tensor<T> pm({perturb.momentum.height, perturb.momentum.width, 3});
  pm.data = perturb.momentum.data;
  emit("perturbation.values", pv);
  emit("perturbation.momentum", pm);
  for (auto& [name, t] : extras.extra_tensors) emit(name, *t);

  std::ostringstream ps;
  ps.precision(17);
  ps << static_cast<double>(perturb.bound) << " " << static_cast<double>(perturb.step_size)
     << " " << static_cast<double>(perturb.momentum_coef);
  f << "perturb " << ps.str() << " " << phase_name(perturb.phase) << " " << perturb.iteration
    << " " << (perturb.zero_grad_flagged ? 1 : 0) << "\n";
  f << "counters " << extras.step << " " << extras.cycle << "\n";
  f << "labels " << extras.label_map.size();
  for (int id : extras.label_map) f << " " << id;
  f << "\n";
  if (!extras.rng_state.empty()) f << "rng " << extras.rng_state << "\n";
  f << "config " << train_config_to_json(cfg).dump() << "\n";
  if (!f) throw CheckpointError("checkpoint manifest write failed in " + dir.string());
}

template <typename T>
struct LoadedCheckpoint {
  std::filesystem::path dir;
  EncoderProfile profile;
  std::map<std::string, Tensor<T>> tensors;
  TrainConfig config;
  std::string rng_state;
  long step = 0;
  long cycle = 0;
  std::vector<int> label_map;

  double perturb_bound = 0, perturb_step = 0, perturb_momentum = 0;
  std::string perturb_phase = "meta_train";
  long perturb_iteration = 0;
  bool perturb_warned = false;

  // Copies the stored tensors into a parameter set of the given profile,
  // verifying shapes. Reports the first offending tensor.
  EncoderParams<T> make_params(const EncoderProfile& target) const {
    EncoderParams<T> p = make_encoder_params<T>(target);
    for (auto& [name, t] : p.tensors()) {
      auto it = tensors.find(name);
      if (it == tensors.end())
        throw CheckpointError("checkpoint is missing tensor '" + name + "'");
      if (it->second.shape != t->shape)
        throw CheckpointError("shape mismatch for tensor '" + name + "': expected " +
                              shape_string(*t) + ", found " + shape_string(it->second));
      t->data = it->second.data;
    }
    return p;
  }

  EncoderParams<T> make_params() const { return make_params(profile); }

  PerturbationState<T> make_perturbation() const {
    auto itv = tensors.find("perturbation.values");
    auto itm = tensors.find("perturbation.momentum");
    if (itv == tensors.end() || itm == tensors.end())
      throw CheckpointError("checkpoint is missing perturbation tensors");
    const auto& shape = itv->second.shape;
    if (shape.size() != 3 || shape[2] != 3)
      throw CheckpointError("perturbation tensor must be HxWx3");
    PerturbationState<T> s = PerturbationState<T>::make(
        shape[0], shape[1], static_cast<T>(perturb_bound), static_cast<T>(perturb_step),
        static_cast<T>(perturb_momentum));
    s.perturbation.data = itv->second.data;
    s.momentum.data = itm->second.data;
    s.phase = perturb_phase == "meta_test" ? PerturbPhase::kMetaTest : PerturbPhase::kMetaTrain;
    s.iteration = perturb_iteration;
    s.zero_grad_flagged = perturb_warned;
    return s;
  }
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.txt");
  if (!f)
    throw CheckpointError("cannot open checkpoint manifest: " + (dir / "manifest.txt").string());
  LoadedCheckpoint<T> ck;
  ck.dir = dir;

  std::string line;
  if (!std::getline(f, line) || line != std::string("format ") + kCheckpointFormat)
    throw CheckpointError("checkpoint version mismatch in " + dir.string() + ": expected '" +
                          kCheckpointFormat + "', found '" +
                          (line.size() > 7 ? line.substr(7) : line) + "'");

  bool have_profile = false, have_config = false;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string key;
    is >> key;
    if (key == "profile") {
      is >> ck.profile.name >> ck.profile.stem1 >> ck.profile.stem2 >> ck.profile.trunk1 >>
          ck.profile.trunk2 >> ck.profile.embed_dim >> ck.profile.n_classes;
      if (is.fail()) throw CheckpointError("malformed profile line in checkpoint manifest");
      have_profile = true;
    } else if (key == "tensor") {
      std::string name;
      std::size_t rank = 0;
      is >> name >> rank;
      std::vector<std::size_t> shape(rank);
      for (auto& d : shape) is >> d;
      if (is.fail()) throw CheckpointError("malformed tensor line in checkpoint manifest");
      Tensor<T> t(shape);
      detail::read_f32_blob(dir / "tensors" / (name + ".bin"), t);
      ck.tensors.emplace(name, std::move(t));
    } else if (key == "perturb") {
      int warned = 0;
      is >> ck.perturb_bound >> ck.perturb_step >> ck.perturb_momentum >> ck.perturb_phase >>
          ck.perturb_iteration >> warned;
      if (is.fail()) throw CheckpointError("malformed perturb line in checkpoint manifest");
      ck.perturb_warned = warned != 0;
    } else if (key == "counters") {
      is >> ck.step >> ck.cycle;
      if (is.fail()) throw CheckpointError("malformed counters line in checkpoint manifest");
    } else if (key == "labels") {
      std::size_t n = 0;
      is >> n;
      ck.label_map.resize(n);
      for (auto& id : ck.label_map) is >> id;
      if (is.fail()) throw CheckpointError("malformed labels line in checkpoint manifest");
    } else if (key == "rng") {
      std::string rest;
      std::getline(is, rest);
      if (!rest.empty() && rest.front() == ' ') rest.erase(rest.begin());
      ck.rng_state = rest;
    } else if (key == "config") {
      std::string rest;
      std::getline(is, rest);
      try {
        ck.config = train_config_from_json(nlohmann::json::parse(rest));
      } catch (const std::exception& e) {
        throw CheckpointError(std::string("bad config echo in checkpoint manifest: ") +
                              e.what());
      }
      have_config = true;
    } else {
      throw CheckpointError("unknown checkpoint manifest line: '" + line + "'");
    }
  }
  if (!have_profile) throw CheckpointError("checkpoint manifest has no profile line");
  if (!have_config) throw CheckpointError("checkpoint manifest has no config line");
  return ck;
}

}  // namespace ktcaa
