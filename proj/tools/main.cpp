// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end. Exit codes: 0 success, 1 config error, 2 partial
// sweep failure, 3 fatal.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include "oneshot_ldm/oneshot_ldm.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace oneshot;

namespace {

constexpr int kConfigError = 1;
constexpr int kFatal = 3;

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string(), e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// "kind=beta" -> spec
RegularizerSpec parse_reg_flag(const std::string& s) {
  const auto eq = s.find('=');
  json j = {{"kind", s.substr(0, eq)}};
  if (eq != std::string::npos) {
    try {
      j["beta"] = std::stod(s.substr(eq + 1));
    } catch (const std::exception&) {
      throw ConfigError("bad regularizer flag '" + s + "' (expected kind=beta)");
    }
  }
  return regularizer_from_json(j);
}

struct DataArgs {
  std::string root;
  std::string name = "omniglot";
  CLI::Option* add(CLI::App* app) {
    app->add_option("--dataset", name, "quickdraw-fs or omniglot");
    return app->add_option("--data,--data-root", root, "Dataset root (manifest.json + category dirs)");
  }
  DatasetSplit load(SplitName split) const {
    if (root.empty()) throw ConfigError("--data-root is required");
    return load_dataset(root, parse_dataset_name(name), split);
  }
};

void print_epoch(const EpochStats& s) {
  std::fprintf(stderr, "epoch %lld  loss %.6g  recon %.6g  reg %.6g  lr %.3g\n", static_cast<long long>(s.epoch),
               s.total, s.recon, s.reg, s.learning_rate);
}

// A samples dir is either one model's tree (<category>/sample_k.png) or a
// directory of such trees keyed by model id.
std::map<std::string, std::vector<TaggedSamples>> read_sample_trees(const fs::path& dir) {
  std::map<std::string, std::vector<TaggedSamples>> out;
  bool nested = false;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_directory()) continue;
    const auto name = e.path().filename().string();
    if (name.find_first_not_of("0123456789") != std::string::npos) nested = true;
  }
  if (!nested) {
    out[dir.filename().string()] = read_samples(dir);
    return out;
  }
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) out[e.path().filename().string()] = read_samples(e.path());
  }
  return out;
}

// Rebuilds a report from report.csv plus the experiment config that names each sweep's swept regularizer.
EvalReport report_from_csv(const fs::path& csv, const ExperimentConfig& config) {
  std::ifstream in(csv);
  if (!in) throw IoError("cannot open " + csv.string());
  std::map<std::string, std::string> swept_kind;
  for (const auto& s : config.sweeps) {
    if (s.swept) swept_kind[s.name] = to_string(s.swept->kind);
  }
  std::vector<ModelPoint> points;
  std::vector<std::string> sweeps;
  std::vector<double> betas;
  double human_o = 0.0, human_r = 0.0;
  bool have_human = false;
  std::string line;
  std::getline(in, line);
  for (int row = 2; std::getline(in, line); ++row) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() < 7) throw ParseError(csv.string(), "row " + std::to_string(row) + " has too few columns");
    if (f[0] == "human") {
      human_r = std::stod(f[3]);
      human_o = std::stod(f[4]);
      have_human = true;
      continue;
    }
    ModelPoint p;
    p.model_id = f[0];
    std::stringstream bm(f[2]);
    for (std::string kv; std::getline(bm, kv, ';');) {
      const auto eq = kv.find('=');
      if (eq != std::string::npos) p.beta_map[kv.substr(0, eq)] = std::stod(kv.substr(eq + 1));
    }
    p.recognizability = std::stod(f[3]);
    p.originality_raw = std::stod(f[4]);
    double beta = std::numeric_limits<double>::quiet_NaN();
    if (auto it = swept_kind.find(f[1]); it != swept_kind.end() && p.beta_map.count(it->second)) {
      beta = p.beta_map[it->second];
    }
    points.push_back(p);
    sweeps.push_back(f[1]);
    betas.push_back(beta);
  }
  if (!have_human) throw ParseError(csv.string(), "no human row");
  return assemble_report(std::move(points), std::move(sweeps), betas, human_o, human_r);
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"One-shot latent diffusion toolkit"};
  app.require_subcommand(1);

  // make-synthetic
  auto* synth = app.add_subcommand("make-synthetic", "Write a procedural stroke-glyph dataset");
  std::string synth_out, synth_name = "omniglot";
  SyntheticOptions synth_opts;
  synth->add_option("--out", synth_out)->required();
  synth->add_option("--dataset", synth_name);
  synth->add_option("--train", synth_opts.train_categories);
  synth->add_option("--test", synth_opts.test_categories);
  synth->add_option("--samples", synth_opts.samples_per_category);
  synth->add_option("--groups", synth_opts.groups);
  synth->add_option("--seed", synth_opts.seed);

  // import-omniglot
  auto* imp = app.add_subcommand("import-omniglot", "Convert Omniglot alphabet trees to the dataset layout");
  std::vector<std::string> imp_src;
  std::string imp_out;
  uint64_t imp_seed = 0;
  size_t imp_held = 3;
  imp->add_option("--src", imp_src, "images_background / images_evaluation dirs")->required();
  imp->add_option("--out", imp_out)->required();
  imp->add_option("--seed", imp_seed);
  imp->add_option("--held-out-per-alphabet", imp_held);

  // train-rae
  auto* trae = app.add_subcommand("train-rae", "Train a regularized autoencoder");
  DataArgs trae_data;
  std::string trae_config, trae_out;
  std::vector<std::string> trae_regs;
  uint64_t trae_seed = 0;
  bool trae_resume = false;
  int64_t trae_every = 10;
  trae_data.add(trae)->required();
  trae->add_option("--config", trae_config, "JSON with optional 'rae' and 'regularizers'");
  trae->add_option("--reg", trae_regs, "kind=beta, repeatable");
  trae->add_option("--out", trae_out)->required();
  trae->add_option("--seed", trae_seed);
  trae->add_option("--checkpoint-every", trae_every);
  trae->add_flag("--resume", trae_resume, "Continue from --out");

  // train-ldm
  auto* tldm = app.add_subcommand("train-ldm", "Train the latent noise predictor on a frozen autoencoder");
  DataArgs tldm_data;
  std::string tldm_rae, tldm_config, tldm_out;
  uint64_t tldm_seed = 0;
  bool tldm_resume = false;
  int64_t tldm_every = 10;
  tldm_data.add(tldm)->required();
  tldm->add_option("--rae,--rae-ckpt", tldm_rae)->required();
  tldm->add_option("--config", tldm_config, "JSON with optional 'ldm'");
  tldm->add_option("--out", tldm_out)->required();
  tldm->add_option("--seed", tldm_seed);
  tldm->add_option("--checkpoint-every", tldm_every);
  tldm->add_flag("--resume", tldm_resume);

  // sample
  auto* samp = app.add_subcommand("sample", "Generate variations for every category of a split");
  DataArgs samp_data;
  std::string samp_model, samp_out, samp_split = "test", samp_grids, samp_exemplar;
  int64_t samp_n = 10;
  uint64_t samp_seed = 0;
  double samp_gamma = std::numeric_limits<double>::quiet_NaN();
  samp_data.add(samp);
  samp->add_option("--model,--ldm-ckpt", samp_model)->required();
  samp->add_option("--exemplar", samp_exemplar, "Single exemplar PNG; --out is then the grid PNG");
  samp->add_option("--out", samp_out, "Sample tree directory, or grid PNG with --exemplar")->required();
  samp->add_option("--split", samp_split);
  samp->add_option("--n", samp_n);
  samp->add_option("--seed", samp_seed);
  samp->add_option("--gamma", samp_gamma, "Guidance scale (default: the model's)");
  samp->add_option("--grids", samp_grids, "Also render one grid PNG per category here");

  // attribute
  auto* attr = app.add_subcommand("attribute", "Importance maps for test exemplars");
  DataArgs attr_data;
  std::string attr_model, attr_out, attr_overlays, attr_exemplar;
  int64_t attr_variations = 1, attr_categories = 0;
  uint64_t attr_seed = 0;
  attr_data.add(attr);
  attr->add_option("--model,--ldm-ckpt", attr_model)->required();
  attr->add_option("--exemplar", attr_exemplar, "Single exemplar PNG instead of the test split");
  attr->add_option("--out", attr_out, "Writes <category>.npy (exemplar.npy with --exemplar)")->required();
  attr->add_option("--overlays", attr_overlays, "Also render overlays here");
  attr->add_option("--n,--variations", attr_variations, "Trajectories averaged per map");
  attr->add_option("--categories", attr_categories, "0: all");
  attr->add_option("--seed", attr_seed);

  // train-critics
  auto* tcrit = app.add_subcommand("train-critics", "Train the evaluation critics on the train split");
  DataArgs tcrit_data;
  std::string tcrit_config, tcrit_out;
  uint64_t tcrit_seed = 0;
  tcrit_data.add(tcrit)->required();
  tcrit->add_option("--config", tcrit_config, "JSON with optional 'critics'");
  tcrit->add_option("--out", tcrit_out)->required();
  tcrit->add_option("--seed", tcrit_seed);

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Originality / recognizability of generated samples");
  DataArgs eval_data;
  std::string eval_critics, eval_samples, eval_out;
  int64_t eval_n_way = 0;
  uint64_t eval_seed = 0;
  eval_data.add(eval)->required();
  eval->add_option("--critics", eval_critics)->required();
  eval->add_option("--samples", eval_samples)->required();
  eval->add_option("--out", eval_out)->required();
  eval->add_option("--n-way", eval_n_way);
  eval->add_option("--seed", eval_seed);

  // stats
  auto* stats = app.add_subcommand("stats", "Importance-map statistics against human maps");
  std::string stats_model, stats_human, stats_out;
  int64_t stats_resamples = 1000;
  uint64_t stats_seed = 0;
  stats->add_option("--maps-model", stats_model)->required();
  stats->add_option("--maps-human", stats_human)->required();
  stats->add_option("--out", stats_out)->required();
  stats->add_option("--resamples", stats_resamples);
  stats->add_option("--seed", stats_seed);

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Run a beta sweep from an experiment config");
  std::string sweep_config;
  RunOptions sweep_opts;
  sweep->add_option("--config", sweep_config)->required();
  sweep->add_option("--jobs", sweep_opts.jobs);
  sweep->add_option("--stop-after", sweep_opts.stop_after_points, "Stop after this many computed points");
  sweep->add_flag("--skip-disk-check", sweep_opts.skip_disk_check);

  // plot
  auto* plot = app.add_subcommand("plot", "Re-render fits.json and plot.svg from a sweep's report.csv");
  std::string plot_config, plot_out;
  plot->add_option("--config", plot_config)->required();
  plot->add_option("--out", plot_out, "Output directory (default: the config's output_dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kConfigError;
  }

  try {
    if (*synth) {
      const auto n = write_synthetic_dataset(synth_out, parse_dataset_name(synth_name), synth_opts);
      std::cout << "wrote " << n << " categories to " << synth_out << '\n';
    } else if (*imp) {
      std::vector<fs::path> src(imp_src.begin(), imp_src.end());
      const auto n = import_omniglot(src, imp_out, 48, imp_seed, imp_held);
      std::cout << "imported " << n << " categories to " << imp_out << '\n';
    } else if (*trae) {
      RAEConfig cfg;
      std::vector<RegularizerSpec> specs;
      if (!trae_config.empty()) {
        const auto j = read_json(trae_config);
        if (j.contains("rae")) cfg = rae_config_from_json(j["rae"]);
        if (j.contains("regularizers")) specs = regularizers_from_json(j["regularizers"]);
      }
      for (const auto& r : trae_regs) {
        auto s = parse_reg_flag(r);
        if (s.kind != RegKind::None) specs.push_back(s);
      }
      TrainOptions opts;
      opts.checkpoint = trae_out;
      opts.checkpoint_every = trae_every;
      if (trae_resume && fs::exists(trae_out)) opts.resume = trae_out;
      opts.on_epoch = print_epoch;
      train_rae(trae_data.load(SplitName::Train), cfg, specs, trae_seed, opts);
    } else if (*tldm) {
      const auto rae_ckpt = Checkpoint::load(tldm_rae);
      auto rae = load_rae(rae_ckpt);
      json j = tldm_config.empty() ? json::object() : read_json(tldm_config);
      const auto cfg = ldm_config_from_json(j.value("ldm", json::object()), rae->config().latent_dim);
      auto frozen = rae_ckpt.section("rae");
      frozen.optimizer.clear();
      frozen.rng_state.clear();
      LDMTrainOptions opts;
      opts.checkpoint = tldm_out;
      opts.checkpoint_every = tldm_every;
      opts.extra_sections.push_back(frozen);
      if (tldm_resume && fs::exists(tldm_out)) opts.resume = tldm_out;
      opts.on_epoch = [](int64_t e, double loss) {
        std::fprintf(stderr, "epoch %lld  loss %.6g\n", static_cast<long long>(e), loss);
      };
      train_ldm(encode_split(rae, tldm_data.load(SplitName::Train)), cfg, tldm_seed, opts);
    } else if (*samp) {
      const auto ckpt = Checkpoint::load(samp_model);
      auto rae = load_rae(ckpt);
      auto ldm = load_ldm(ckpt);
      if (!std::isnan(samp_gamma)) ldm.config.guidance.gamma = samp_gamma;
      if (!samp_exemplar.empty()) {
        const auto exemplar = read_png_gray(samp_exemplar);
        Rng rng(samp_seed);
        torch::NoGradGuard guard;
        const auto imgs = generate_variations(rae, as_predictor(ldm.model), ldm.config.unet.latent_dim, exemplar,
                                              samp_n, ldm.config.guidance.gamma, ldm.config.schedule(), rng);
        std::vector<torch::Tensor> list;
        for (int64_t k = 0; k < imgs.size(0); ++k) list.push_back(imgs[k]);
        render_grid(samp_out, list, exemplar);
        return 0;
      }
      const auto split = samp_data.load(parse_split_name(samp_split));
      Rng rng(samp_seed);
      torch::NoGradGuard guard;
      const auto samples = sample_split(rae, ldm.model, ldm.config, split, samp_n, rng);
      write_samples(samp_out, samples);
      if (!samp_grids.empty()) {
        fs::create_directories(samp_grids);
        for (size_t i = 0; i < samples.size(); ++i) {
          std::vector<torch::Tensor> imgs;
          for (int64_t k = 0; k < samples[i].images.size(0); ++k) imgs.push_back(samples[i].images[k]);
          render_grid(fs::path(samp_grids) / (std::to_string(samples[i].category_id) + ".png"), imgs,
                      split.episodes[i].exemplar);
        }
      }
    } else if (*attr) {
      const auto ckpt = Checkpoint::load(attr_model);
      auto rae = load_rae(ckpt);
      auto ldm = load_ldm(ckpt);
      ldm.model->eval();
      const auto predictor = as_predictor(ldm.model);
      const auto schedule = ldm.config.schedule();
      Rng rng(attr_seed);
      fs::create_directories(attr_out);
      if (!attr_overlays.empty()) fs::create_directories(attr_overlays);
      if (!attr_exemplar.empty()) {
        const auto exemplar = read_png_gray(attr_exemplar);
        const auto m = category_importance(rae, predictor, exemplar, attr_variations, schedule,
                                           ldm.config.guidance.gamma, rng);
        write_npy(fs::path(attr_out) / "exemplar.npy", m.values);
        render_overlay(fs::path(attr_out) / "exemplar_overlay.png", m, exemplar);
        return 0;
      }
      const auto split = attr_data.load(SplitName::Test);
      const auto n = attr_categories > 0 ? std::min<size_t>(attr_categories, split.episodes.size())
                                         : split.episodes.size();
      for (size_t i = 0; i < n; ++i) {
        const auto& e = split.episodes[i];
        const auto m = category_importance(rae, predictor, e.exemplar, attr_variations, schedule,
                                           ldm.config.guidance.gamma, rng);
        if (m.flagged) std::fprintf(stderr, "category %lld: vq autoencoder, map taken at the quantized code\n",
                                    static_cast<long long>(e.category_id));
        write_npy(fs::path(attr_out) / (std::to_string(e.category_id) + ".npy"), m.values);
        if (!attr_overlays.empty()) {
          render_overlay(fs::path(attr_overlays) / (std::to_string(e.category_id) + ".png"), m, e.exemplar);
        }
      }
    } else if (*tcrit) {
      CriticConfig cfg;
      if (!tcrit_config.empty()) {
        const auto j = read_json(tcrit_config);
        cfg = critic_config_from_json(j.value("critics", j));
      }
      const auto critics = train_critics(tcrit_data.load(SplitName::Train), cfg, tcrit_seed);
      save_critics(critics, tcrit_out);
      std::cout << "gate accuracy " << critics.report.gate_accuracy << " (" << critics.report.gate_n_way
                << "-way)\n";
    } else if (*eval) {
      const auto critics = load_critics(eval_critics);
      const auto test = eval_data.load(SplitName::Test);
      const auto exemplars = exemplar_set(test);
      std::vector<ModelPoint> points;
      std::vector<std::string> sweeps;
      std::vector<double> betas;
      Rng rng(eval_seed);
      Rng* r = eval_n_way > 0 ? &rng : nullptr;
      for (const auto& [id, samples] : read_sample_trees(eval_samples)) {
        ModelPoint p;
        p.model_id = id;
        p.recognizability = recognizability(samples, exemplars, critics.classifier.embedder(), eval_n_way, r);
        p.originality_raw = originality_raw(samples, exemplars, critics.embedder.embedder());
        points.push_back(p);
        sweeps.emplace_back();
        betas.push_back(std::numeric_limits<double>::quiet_NaN());
      }
      const auto human = split_samples(test);
      const double hr = recognizability(human, exemplars, critics.classifier.embedder(), eval_n_way, r);
      const double ho = originality_raw(human, exemplars, critics.embedder.embedder());
      write_report_csv(eval_out, assemble_report(points, sweeps, betas, ho, hr));
    } else if (*stats) {
      write_json(stats_out, map_statistics(stats_model, stats_human, stats_resamples, stats_seed));
    } else if (*sweep) {
      const auto cfg = load_experiment(sweep_config);
      const auto outcome = run_sweep(cfg, sweep_opts);
      std::cout << "computed " << outcome.computed << ", skipped " << outcome.skipped << ", failed "
                << outcome.failed << (outcome.stopped_early ? " (stopped early)" : "") << '\n';
      for (const auto& e : outcome.entries) {
        if (e.status == "failed") std::cerr << e.model_id << ": " << e.error << '\n';
      }
      return outcome.exit_code;
    } else if (*plot) {
      const auto cfg = load_experiment(plot_config);
      const fs::path out = plot_out.empty() ? cfg.output_dir : fs::path(plot_out);
      const auto report = report_from_csv(cfg.output_dir / "report.csv", cfg);
      write_fits_json(out / "fits.json", report);
      write_plot_svg(out / "plot.svg", report);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFatal;
  }
  return 0;
}
