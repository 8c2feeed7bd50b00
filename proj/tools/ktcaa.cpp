// Command-line surface for the KTCAA desk-scale pipeline: synthetic data
// generation, episodic training, retrieval evaluation, augmentation and
// perturbation inspection, and diagnostics.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ktcaa/aa.hpp"
#include "ktcaa/checkpoint.hpp"
#include "ktcaa/config.hpp"
#include "ktcaa/data.hpp"
#include "ktcaa/encoder.hpp"
#include "ktcaa/eval.hpp"
#include "ktcaa/ktc.hpp"
#include "ktcaa/metaloop.hpp"
#include "ktcaa/plot.hpp"

namespace fs = std::filesystem;
using Scalar = float;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
};

void require_out_dir(const std::string& out) {
  if (out.empty()) throw ktcaa::ValidationError("--out is required");
  fs::create_directories(out);
  if (!fs::exists(out))
    throw ktcaa::ValidationError("cannot create output directory: " + out);
}

ktcaa::DatasetManifest load_and_check_manifest(const std::string& path) {
  if (!fs::exists(path))
    throw ktcaa::ValidationError("manifest not found: " + path);
  ktcaa::DatasetManifest m = ktcaa::load_manifest(path);
  const auto violations = ktcaa::validate(m);
  if (!violations.empty()) {
    std::string msg = "manifest validation failed:\n";
    for (const auto& v : violations) msg += "  " + v + "\n";
    throw ktcaa::ValidationError(msg);
  }
  return m;
}

ktcaa::LoadedCheckpoint<Scalar> load_checkpoint_checked(const std::string& path) {
  if (!fs::exists(fs::path(path) / "manifest.txt"))
    throw ktcaa::ValidationError("checkpoint not found: " + path);
  return ktcaa::load_checkpoint<Scalar>(path);
}

int cmd_gen_data(const ktcaa::SyntheticSpec& spec, const std::string& out) {
  require_out_dir(out);
  const auto manifest = ktcaa::generate_synthetic<Scalar>(spec, out);
  std::printf("generated %zu images for %d identities into %s\n", manifest.records.size(),
              spec.n_identities, out.c_str());
  return 0;
}

void plot_metrics_log(const fs::path& log_path, const fs::path& svg_path) {
  std::ifstream f(log_path);
  ktcaa::PlotSeries train{"meta_train total", {}, {}}, test{"meta_test total", {}, {}};
  std::string line;
  while (std::getline(f, line)) {
    double step = 0, total = 0;
    char phase[32] = {0};
    if (std::sscanf(line.c_str(), "step=%lf cycle=%*d phase=%31s", &step, phase) < 2) continue;
    const char* t = std::strstr(line.c_str(), "total=");
    if (!t) continue;
    std::sscanf(t, "total=%lf", &total);
    if (std::string(phase) == "meta_train") {
      train.x.push_back(step);
      train.y.push_back(total);
    } else if (std::string(phase) == "meta_test") {
      test.x.push_back(step);
      test.y.push_back(total);
    }
  }
  ktcaa::write_line_chart(svg_path, "loss curves", {train, test});
}

int cmd_train(const ktcaa::TrainConfig& cfg, const std::string& out,
              const std::string& resume, bool plot) {
  require_out_dir(out);
  if (cfg.train_manifest.empty())
    throw ktcaa::ValidationError("config field 'data.train_manifest' is required for train");
  const auto manifest = load_and_check_manifest(cfg.train_manifest);
  const auto data = ktcaa::load_train_data<Scalar>(manifest);

  {
    std::ofstream echo(fs::path(out) / "config.json");
    echo << ktcaa::train_config_to_json(cfg).dump(2) << "\n";
  }

  std::ofstream log(fs::path(out) / "metrics.log");
  if (!log) throw std::runtime_error("cannot open metrics log in " + out);
  ktcaa::MetricsSink sink = [&log](const std::string& line) { log << line << "\n"; };

  ktcaa::ThreadPool pool(cfg.threads);
  ktcaa::MetaState<Scalar> resumed;
  const ktcaa::MetaState<Scalar>* resume_ptr = nullptr;
  if (!resume.empty()) {
    const auto ck = load_checkpoint_checked(resume);
    resumed = ktcaa::restore_run_state(ck, cfg, data);
    resume_ptr = &resumed;
    std::printf("resuming from %s at cycle %ld\n", resume.c_str(), resumed.cycle);
  }
  const auto state = ktcaa::run_training(cfg, data, out, sink, pool, resume_ptr);
  log.flush();
  if (plot) plot_metrics_log(fs::path(out) / "metrics.log", fs::path(out) / "loss_curves.svg");
  std::printf("trained %ld cycles (%ld steps); final checkpoint in %s/checkpoint_final\n",
              state.cycle, state.step, out.c_str());
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest_path,
             int adaptation_steps, const std::string& out, bool plot) {
  const auto ck = load_checkpoint_checked(checkpoint);
  ktcaa::TrainConfig cfg = ck.config;
  const auto manifest = load_and_check_manifest(
      manifest_path.empty() ? cfg.eval_manifest : manifest_path);
  auto support = ktcaa::load_split_samples<Scalar>(manifest, "support");
  auto query = ktcaa::load_split_samples<Scalar>(manifest, "query");
  auto gallery = ktcaa::load_split_samples<Scalar>(manifest, "gallery");
  if (query.empty() || gallery.empty())
    throw ktcaa::ValidationError("eval manifest needs non-empty query and gallery splits");

  ktcaa::ThreadPool pool(cfg.threads);
  auto params = ck.make_params();
  const auto perturb = ck.make_perturbation();
  if (adaptation_steps > 0 && !support.empty())
    params = ktcaa::adapt_for_eval(params, support, adaptation_steps, perturb, cfg, pool);

  const ktcaa::EncoderFlags flags{cfg.augmented_through_rgb_stem};
  const auto report = ktcaa::evaluate_retrieval(params, query, gallery, flags, pool);
  char line[256];
  std::snprintf(line, sizeof line,
                "rank_1=%.6g rank_5=%.6g rank_10=%.6g map=%.6g n_queries=%zu n_gallery=%zu "
                "adaptation_steps=%d",
                report.rank_k.at(1), report.rank_k.at(5), report.rank_k.at(10), report.map,
                report.n_queries, report.n_gallery, adaptation_steps);
  std::printf("%s\n", line);
  if (!out.empty()) {
    require_out_dir(out);
    std::ofstream f(fs::path(out) / "metrics_report.txt");
    f << line << "\n";
    if (plot) {
      ktcaa::PlotSeries s{"CMC", {}, {}};
      for (const auto& [k, v] : report.rank_k) {
        s.x.push_back(k);
        s.y.push_back(v);
      }
      ktcaa::write_line_chart(fs::path(out) / "cmc.svg", "CMC", {s});
    }
  }
  return 0;
}

int cmd_augment(const std::string& in_dir, const std::string& out, std::uint64_t seed,
                double sigma, double guard) {
  if (!fs::is_directory(in_dir))
    throw ktcaa::ValidationError("--in must be an existing directory: " + in_dir);
  require_out_dir(out);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(in_dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ktcaa::ValidationError("no .ppm images in " + in_dir);

  ktcaa::Rng rng(seed);
  const ktcaa::SketchParams sp{sigma, guard};
  std::ofstream rec(fs::path(out) / "records.txt");
  for (const auto& file : files) {
    const auto img = ktcaa::load_ppm<Scalar>(file);
    const auto sketch = ktcaa::sketch_transform(img, sp);
    const auto rect = ktcaa::sample_rect(rng, img.height, img.width);
    const auto replaced = ktcaa::local_sketch_replace(img, sketch, rect);
    const auto mask = ktcaa::mask_from_rect(rect, img.height, img.width);
    const auto [global_norm, local_norm] = ktcaa::delta_norms(img, sketch, mask);
    const std::string stem = file.stem().string();
    ktcaa::save_ppm(sketch, fs::path(out) / (stem + "_sketch.ppm"));
    ktcaa::save_ppm(replaced, fs::path(out) / (stem + "_ls.ppm"));
    char line[256];
    std::snprintf(line, sizeof line, "file=%s rect=%zu,%zu,%zu,%zu global=%.9g local=%.9g",
                  file.filename().string().c_str(), rect.top, rect.left, rect.height,
                  rect.width, global_norm, local_norm);
    rec << line << "\n";
  }
  std::printf("augmented %zu images into %s\n", files.size(), out.c_str());
  return 0;
}

int cmd_perturb(const std::string& checkpoint, const std::string& data_dir,
                const std::string& out, const std::string& split, int limit) {
  const auto ck = load_checkpoint_checked(checkpoint);
  ktcaa::TrainConfig cfg = ck.config;
  const fs::path manifest_path = fs::path(data_dir) / "manifest.csv";
  const auto manifest = load_and_check_manifest(manifest_path.string());
  auto all = ktcaa::load_split_samples<Scalar>(manifest, split);
  std::vector<ktcaa::Sample<Scalar>> batch;
  for (auto& s : all) {
    if (s.modality != ktcaa::Modality::kRgb) continue;
    batch.push_back(std::move(s));
    if (limit > 0 && static_cast<int>(batch.size()) >= limit) break;
  }
  if (batch.empty())
    throw ktcaa::ValidationError("no RGB images in split '" + split + "' of " + data_dir);
  require_out_dir(out);

  ktcaa::ThreadPool pool(cfg.threads);
  const auto params = ck.make_params();
  auto state = ck.make_perturbation();
  const Scalar final_loss =
      ktcaa::optimize_perturbation(params, batch, batch, state, cfg, pool);

  ktcaa::Tensor<Scalar> eta(
      {state.perturbation.height, state.perturbation.width, std::size_t(3)});
  eta.data = state.perturbation.data;
  ktcaa::detail::write_f32_blob(fs::path(out) / "eta.bin", eta);
  double linf = 0, l2 = 0;
  for (Scalar v : state.perturbation.data) {
    linf = std::max(linf, std::abs(static_cast<double>(v)));
    l2 += static_cast<double>(v) * static_cast<double>(v);
  }
  char line[256];
  std::snprintf(line, sizeof line,
                "final_loss=%.9g eta_linf=%.9g eta_l2=%.9g iterations=%ld n_images=%zu",
                static_cast<double>(final_loss), linf, std::sqrt(l2), state.iteration,
                batch.size());
  std::ofstream f(fs::path(out) / "summary.txt");
  f << line << "\n";
  std::printf("%s\n", line);
  return 0;
}

int cmd_diagnose(const std::string& checkpoint, const std::string& manifest_path,
                 const std::string& out, int n_samples) {
  const auto ck = load_checkpoint_checked(checkpoint);
  ktcaa::TrainConfig cfg = ck.config;
  const auto manifest = load_and_check_manifest(
      manifest_path.empty() ? cfg.eval_manifest : manifest_path);
  auto rgb = ktcaa::load_split_samples<Scalar>(manifest, "gallery");
  {
    auto sup = ktcaa::load_split_samples<Scalar>(manifest, "support");
    for (auto& s : sup) rgb.push_back(std::move(s));
  }
  auto sketch = ktcaa::load_split_samples<Scalar>(manifest, "query");
  if (rgb.empty() || sketch.empty())
    throw ktcaa::ValidationError("diagnose needs RGB (support/gallery) and sketch (query) samples");

  ktcaa::ThreadPool pool(cfg.threads);
  const auto params = ck.make_params();
  const ktcaa::EncoderFlags flags{cfg.augmented_through_rgb_stem};
  ktcaa::Rng rng(ktcaa::mix_seed(cfg.seed, 0xD1A6));

  ktcaa::DiagnosticsReport rep;
  std::vector<ktcaa::Image<Scalar>> rgb_images;
  for (const auto& s : rgb) rgb_images.push_back(s.image);
  const auto model = ktcaa::encoder_feature_model(params, ktcaa::Modality::kRgb, flags, pool);
  const auto [gh, gah] = ktcaa::estimate_gamma(
      model, rgb_images, cfg.epsilon(), static_cast<std::size_t>(n_samples), rng);
  rep.gamma_hat = gh;
  rep.gamma_adv_hat = gah;

  const auto emb_rgb = ktcaa::encode(params, rgb, flags, pool);
  const auto emb_sketch = ktcaa::encode(params, sketch, flags, pool);
  double lip = 0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t i = rng.uniform_index(rgb.size());
    const std::size_t j = rng.uniform_index(rgb.size());
    if (i == j) continue;
    const double dx = ktcaa::image_l2_distance(rgb[i].image, rgb[j].image);
    if (dx < 1e-9) continue;
    double df = 0;
    for (std::size_t c = 0; c < emb_rgb[i].size(); ++c) {
      const double dd = static_cast<double>(emb_rgb[i][c]) - static_cast<double>(emb_rgb[j][c]);
      df += dd * dd;
    }
    lip = std::max(lip, std::sqrt(df) / dx);
  }
  rep.lipschitz_ratio = lip;

  const ktcaa::SketchParams sp{cfg.sketch_blur_sigma, cfg.sketch_dodge_guard};
  double g_sum = 0, l_sum = 0;
  const std::size_t n_delta = std::min<std::size_t>(rgb.size(), 16);
  for (std::size_t i = 0; i < n_delta; ++i) {
    const auto sk = ktcaa::sketch_transform(rgb[i].image, sp);
    const auto rect = ktcaa::sample_rect(rng, rgb[i].image.height, rgb[i].image.width);
    const auto mask = ktcaa::mask_from_rect(rect, rgb[i].image.height, rgb[i].image.width);
    const auto [g, l] = ktcaa::delta_norms(rgb[i].image, sk, mask);
    g_sum += g;
    l_sum += l;
  }
  rep.delta_global_mean = g_sum / static_cast<double>(n_delta);
  rep.delta_local_mean = l_sum / static_cast<double>(n_delta);
  rep.discrepancy_proxy = ktcaa::discrepancy_proxy(emb_rgb, emb_sketch, rng);

  char line[320];
  std::snprintf(line, sizeof line,
                "gamma_hat=%.9g gamma_adv_hat=%.9g lipschitz_ratio=%.9g "
                "delta_global_mean=%.9g delta_local_mean=%.9g discrepancy_proxy=%.9g",
                rep.gamma_hat, rep.gamma_adv_hat, rep.lipschitz_ratio, rep.delta_global_mean,
                rep.delta_local_mean, rep.discrepancy_proxy);
  std::printf("%s\n", line);
  if (!out.empty()) {
    require_out_dir(out);
    std::ofstream f(fs::path(out) / "diagnostics.txt");
    f << line << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"KTCAA: few-shot sketch re-identification, desk scale"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic RGB+sketch corpus");
  ktcaa::SyntheticSpec spec;
  std::string gen_out;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", spec.seed, "generator seed");
  gen->add_option("--ids", spec.n_identities, "total identities (default 70)");
  gen->add_option("--images-per-id", spec.images_per_identity_per_modality,
                  "images per identity per modality (default 4)");
  gen->add_option("--height", spec.height, "image height (default 64)");
  gen->add_option("--width", spec.width, "image width (default 32)");
  gen->add_option("--artists", spec.n_artists, "sketch style variants (default 3)");
  gen->add_option("--episode-ids", spec.episode_identities,
                  "episode identities (0 = auto rule)");

  // train
  auto* train = app.add_subcommand("train", "run the episodic training loop");
  std::string train_config, train_out, train_resume;
  bool train_plot = false;
  long long train_seed = -1;
  int train_cycles = -1;
  std::string train_manifest_flag;
  train->add_option("--config", train_config, "run config JSON")->required();
  train->add_option("--out", train_out, "run output directory")->required();
  train->add_option("--resume", train_resume, "checkpoint directory to resume from");
  train->add_option("--seed", train_seed, "override train.seed");
  train->add_option("--cycles", train_cycles, "override train.cycles");
  train->add_option("--train-manifest", train_manifest_flag, "override data.train_manifest");
  train->add_flag("--plot", train_plot, "write loss_curves.svg");

  // eval
  auto* eval = app.add_subcommand("eval", "retrieval metrics from a checkpoint");
  std::string eval_ckpt, eval_manifest, eval_out;
  int eval_adapt = 1;
  bool eval_plot = false;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint directory")->required();
  eval->add_option("--manifest", eval_manifest, "eval manifest (default: config echo)");
  eval->add_option("--adaptation-steps", eval_adapt,
                   "support-set adaptation steps before embedding (default 1)");
  eval->add_option("--out", eval_out, "directory for metrics_report.txt");
  eval->add_flag("--plot", eval_plot, "write cmc.svg (requires --out)");

  // augment
  auto* aug = app.add_subcommand("augment", "sketch + locally-replaced versions per image");
  std::string aug_in, aug_out;
  std::uint64_t aug_seed = 0;
  double aug_sigma = 2.0, aug_guard = 1e-4;
  aug->add_option("--in", aug_in, "input directory of .ppm images")->required();
  aug->add_option("--out", aug_out, "output directory")->required();
  aug->add_option("--seed", aug_seed, "rect sampling seed");
  aug->add_option("--sigma", aug_sigma, "sketch blur sigma");
  aug->add_option("--guard", aug_guard, "dodge denominator guard");

  // perturb
  auto* pert = app.add_subcommand("perturb", "optimize the universal perturbation on a dataset");
  std::string pert_ckpt, pert_data, pert_out, pert_split = "meta_train";
  int pert_limit = 64;
  pert->add_option("--checkpoint", pert_ckpt, "checkpoint directory")->required();
  pert->add_option("--data", pert_data, "dataset directory (contains manifest.csv)")->required();
  pert->add_option("--out", pert_out, "output directory")->required();
  pert->add_option("--split", pert_split, "manifest split to draw RGB images from");
  pert->add_option("--limit", pert_limit, "max images (default 64)");

  // diagnose
  auto* diag = app.add_subcommand("diagnose", "sensitivity and discrepancy diagnostics");
  std::string diag_ckpt, diag_manifest, diag_out;
  int diag_n = 16;
  diag->add_option("--checkpoint", diag_ckpt, "checkpoint directory")->required();
  diag->add_option("--manifest", diag_manifest, "dataset manifest (default: config echo)");
  diag->add_option("--out", diag_out, "directory for diagnostics.txt");
  diag->add_option("--samples", diag_n, "samples for the gamma estimate (default 16)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      spec.validate();
      return cmd_gen_data(spec, gen_out);
    }
    if (train->parsed()) {
      ktcaa::TrainConfig cfg = ktcaa::load_train_config(train_config);
      if (train_seed >= 0) cfg.seed = static_cast<std::uint64_t>(train_seed);
      if (train_cycles >= 0) cfg.cycles = train_cycles;
      if (!train_manifest_flag.empty()) cfg.train_manifest = train_manifest_flag;
      cfg.validate();
      return cmd_train(cfg, train_out, train_resume, train_plot);
    }
    if (eval->parsed()) return cmd_eval(eval_ckpt, eval_manifest, eval_adapt, eval_out, eval_plot);
    if (aug->parsed()) return cmd_augment(aug_in, aug_out, aug_seed, aug_sigma, aug_guard);
    if (pert->parsed()) return cmd_perturb(pert_ckpt, pert_data, pert_out, pert_split, pert_limit);
    if (diag->parsed()) return cmd_diagnose(diag_ckpt, diag_manifest, diag_out, diag_n);
  } catch (const ktcaa::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
