// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#include "oneshot_ldm/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

#include "oneshot_ldm/attribution.hpp"
#include "oneshot_ldm/checkpoint.hpp"
#include "oneshot_ldm/errors.hpp"
#include "oneshot_ldm/image_io.hpp"
#include "oneshot_ldm/render.hpp"
#include "oneshot_ldm/statistics.hpp"

namespace oneshot {

namespace fs = std::filesystem;
using nlohmann::json;

Stage parse_stage(const std::string& s) {
  if (s == "rae") return Stage::RAE;
  if (s == "ldm") return Stage::LDM;
  if (s == "sample") return Stage::Sample;
  if (s == "attribute") return Stage::Attribute;
  if (s == "evaluate") return Stage::Evaluate;
  throw ConfigError("unknown stage '" + s + "' (expected rae, ldm, sample, attribute or evaluate)");
}

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::RAE: return "rae";
    case Stage::LDM: return "ldm";
    case Stage::Sample: return "sample";
    case Stage::Attribute: return "attribute";
    case Stage::Evaluate: return "evaluate";
  }
  return "?";
}

std::vector<double> expand_beta_grid(const json& grid) {
  std::vector<double> out;
  auto add_range = [&](const json& r) {
    if (!r.is_object()) throw ConfigError("beta grid entries must be numbers or range objects");
    const double from = r.at("from").get<double>(), to = r.at("to").get<double>();
    if (!(to >= from)) throw ConfigError("beta range needs to >= from");
    const double slack = 1e-9 * std::max(std::abs(from), std::abs(to));
    if (r.contains("factor")) {
      const double f = r["factor"].get<double>();
      if (!(from > 0.0) || !(f > 1.0)) throw ConfigError("geometric beta range needs from > 0 and factor > 1");
      for (int k = 0;; ++k) {
        const double v = from * std::pow(f, k);
        if (v > to + slack) break;
        out.push_back(v);
      }
    } else if (r.contains("step")) {
      const double s = r["step"].get<double>();
      if (!(s > 0.0)) throw ConfigError("arithmetic beta range needs step > 0");
      for (int k = 0;; ++k) {
        const double v = from + s * k;
        if (v > to + slack) break;
        out.push_back(v);
      }
    } else {
      throw ConfigError("beta range needs 'factor' or 'step'");
    }
  };
  try {
    if (grid.is_number()) {
      out.push_back(grid.get<double>());
    } else if (grid.is_array()) {
      for (const auto& e : grid) {
        if (e.is_number()) {
          out.push_back(e.get<double>());
        } else {
          add_range(e);
        }
      }
    } else {
      add_range(grid);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("beta grid: ") + e.what());
  }
  for (double b : out) {
    if (!std::isfinite(b) || b < 0.0) throw ConfigError("betas must be finite and >= 0");
  }
  return out;
}

void ExperimentConfig::validate() const {
  if (schema_version != kExperimentSchemaVersion) {
    throw ConfigError("unsupported experiment schema_version " + std::to_string(schema_version));
  }
  rae.validate();
  ldm.validate();
  critics.validate();
  if (ldm.unet.latent_dim != rae.latent_dim) throw ConfigError("ldm latent_dim differs from the autoencoder's");
  if (sweeps.empty()) throw ConfigError("experiment needs at least one sweep");
  std::set<std::string> names;
  for (const auto& s : sweeps) {
    if (s.name.empty()) throw ConfigError("every sweep needs a name");
    if (!names.insert(s.name).second) throw ConfigError("sweep name '" + s.name + "' used twice");
    if (s.swept && s.betas.empty()) throw ConfigError("sweep '" + s.name + "' has an empty beta grid");
    if (!s.swept && !s.betas.empty()) throw ConfigError("sweep '" + s.name + "' lists betas but no swept regularizer");
    std::set<RegKind> kinds;
    for (const auto& f : s.fixed) {
      if (!kinds.insert(f.kind).second) throw ConfigError("sweep '" + s.name + "' lists a regularizer twice");
    }
    if (s.swept && !kinds.insert(s.swept->kind).second) {
      throw ConfigError("sweep '" + s.name + "' sweeps a regularizer it also fixes");
    }
  }
  if (replicates < 1) throw ConfigError("replicates must be >= 1");
  if (samples_per_category < 1) throw ConfigError("samples_per_category must be >= 1");
  if (n_way < 0 || n_way == 1) throw ConfigError("n_way must be 0 or >= 2");
  if (attribution_categories < 0 || attribution_variations < 1) throw ConfigError("invalid attribution settings");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
  if (stages.empty()) throw ConfigError("no stages selected");
}

namespace {

json spec_json(const RegularizerSpec& s) { return to_json(s); }

json specs_json(const std::vector<RegularizerSpec>& specs) {
  json out = json::array();
  for (const auto& s : specs) out.push_back(to_json(s));
  return out;
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  json sweeps = json::array();
  for (const auto& s : c.sweeps) {
    json f = json::array();
    for (const auto& r : s.fixed) f.push_back(spec_json(r));
    json e = {{"name", s.name}, {"fixed", f}};
    if (s.swept) {
      e["swept"] = spec_json(*s.swept);
      e["betas"] = s.betas;
    }
    sweeps.push_back(e);
  }
  json stages = json::array();
  for (auto st : c.stages) stages.push_back(to_string(st));
  json dataset = {{"root", c.dataset.root.string()},
                  {"name", to_string(c.dataset.name)},
                  {"groups", c.dataset.load.groups},
                  {"max_groups", c.dataset.load.max_groups},
                  {"exemplar_in_variations", c.dataset.load.exemplar_in_variations}};
  if (c.dataset.synthetic) {
    const auto& s = *c.dataset.synthetic;
    dataset["synthetic"] = {{"train_categories", s.train_categories}, {"test_categories", s.test_categories},
                            {"samples_per_category", s.samples_per_category}, {"jitter", s.jitter},
                            {"stroke_width", s.stroke_width}, {"groups", s.groups}, {"seed", s.seed}};
  }
  json j = {{"schema_version", c.schema_version},
            {"dataset", dataset},
            {"rae", to_json(c.rae)},
            {"ldm", to_json(c.ldm)},
            {"critics", to_json(c.critics)},
            {"sweeps", sweeps},
            {"seed", c.seed},
            {"replicates", c.replicates},
            {"samples_per_category", c.samples_per_category},
            {"n_way", c.n_way},
            {"attribution_categories", c.attribution_categories},
            {"attribution_variations", c.attribution_variations},
            {"checkpoint_every", c.checkpoint_every},
            {"output_dir", c.output_dir.string()},
            {"stages", stages}};
  if (c.critics_path) j["critics_path"] = c.critics_path->string();
  return j;
}

ExperimentConfig experiment_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  if (!j.contains("schema_version")) throw ConfigError("experiment config lacks schema_version");
  ExperimentConfig c;
  try {
    c.schema_version = j.at("schema_version").get<int>();
    if (c.schema_version != kExperimentSchemaVersion) {
      throw ConfigError("unsupported experiment schema_version " + std::to_string(c.schema_version));
    }
    const auto& d = j.at("dataset");
    c.dataset.root = d.at("root").get<std::string>();
    c.dataset.name = parse_dataset_name(d.value("name", std::string("omniglot")));
    c.dataset.load.groups = d.value("groups", std::vector<std::string>{});
    c.dataset.load.max_groups = d.value("max_groups", size_t{0});
    c.dataset.load.exemplar_in_variations = d.value("exemplar_in_variations", false);
    if (d.contains("synthetic")) {
      const auto& s = d["synthetic"];
      SyntheticOptions o;
      o.train_categories = s.value("train_categories", o.train_categories);
      o.test_categories = s.value("test_categories", o.test_categories);
      o.samples_per_category = s.value("samples_per_category", o.samples_per_category);
      o.jitter = s.value("jitter", o.jitter);
      o.stroke_width = s.value("stroke_width", o.stroke_width);
      o.groups = s.value("groups", o.groups);
      o.seed = s.value("seed", o.seed);
      c.dataset.synthetic = o;
    }
    if (j.contains("rae")) c.rae = rae_config_from_json(j["rae"]);
    c.ldm = ldm_config_from_json(j.value("ldm", json::object()), c.rae.latent_dim);
    if (j.contains("critics")) c.critics = critic_config_from_json(j["critics"]);
    if (j.contains("critics_path")) c.critics_path = j["critics_path"].get<std::string>();
    for (const auto& s : j.at("sweeps")) {
      SweepSpec sw;
      sw.name = s.at("name").get<std::string>();
      if (s.contains("fixed")) sw.fixed = regularizers_from_json(s["fixed"]);
      if (s.contains("swept")) {
        auto spec = regularizer_from_json(s["swept"]);
        if (spec.kind == RegKind::None) throw ConfigError("cannot sweep the 'none' regularizer");
        sw.swept = spec;
        sw.betas = expand_beta_grid(s.at("betas"));
      }
      c.sweeps.push_back(std::move(sw));
    }
    c.seed = j.value("seed", c.seed);
    c.replicates = j.value("replicates", c.replicates);
    c.samples_per_category = j.value("samples_per_category", c.samples_per_category);
    c.n_way = j.value("n_way", c.n_way);
    c.attribution_categories = j.value("attribution_categories", c.attribution_categories);
    c.attribution_variations = j.value("attribution_variations", c.attribution_variations);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.output_dir = j.value("output_dir", c.output_dir.string());
    if (j.contains("stages")) {
      c.stages.clear();
      for (const auto& s : j["stages"]) c.stages.insert(parse_stage(s.get<std::string>()));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open experiment config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string(), e.what());
  }
  return experiment_from_json(j);
}

fs::path cache_root(const ExperimentConfig& config) {
  if (const char* env = std::getenv("ONESHOT_LDM_CACHE"); env && *env) return env;
  return config.output_dir / "checkpoints";
}

namespace {

std::string format_beta(double b) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", b);
  return buf;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::vector<SweepPoint> expand_sweeps(const ExperimentConfig& config) {
  std::vector<SweepPoint> out;
  std::set<std::string> ids;
  for (const auto& sw : config.sweeps) {
    std::vector<double> betas = sw.swept ? sw.betas : std::vector<double>{std::numeric_limits<double>::quiet_NaN()};
    for (double beta : betas) {
      for (int64_t r = 0; r < config.replicates; ++r) {
        SweepPoint p;
        p.sweep = sw.name;
        p.specs = sw.fixed;
        p.swept_beta = beta;
        p.replicate = r;
        std::string id = sw.name;
        std::string tag = sw.name;
        for (const auto& f : sw.fixed) {
          p.beta_map[to_string(f.kind)] = f.beta;
          tag += "/" + to_string(f.kind);
        }
        if (sw.swept) {
          auto s = *sw.swept;
          s.beta = beta;
          p.specs.push_back(s);
          p.beta_map[to_string(s.kind)] = beta;
          id += "_" + to_string(s.kind) + "-" + format_beta(beta);
          tag += "/" + to_string(s.kind);
        }
        if (config.replicates > 1) id += "_r" + std::to_string(r);
        tag += "/" + std::to_string(r);
        p.model_id = id;
        p.seed = derive_seed(config.seed, sw.swept ? beta : 0.0, tag);
        if (!ids.insert(id).second) throw ConfigError("sweep points collide on model id '" + id + "'");
        out.push_back(std::move(p));
      }
    }
  }
  return out;
}

json to_json(const LedgerEntry& e) {
  json j = {{"model_id", e.model_id}, {"sweep", e.sweep},   {"beta_map", e.beta_map},
            {"seed", e.seed},         {"status", e.status}, {"stages", e.stages},
            {"checkpoint", e.checkpoint}, {"wall_seconds", e.wall_seconds}};
  if (e.recognizability) j["recognizability"] = *e.recognizability;
  if (e.originality_raw) j["originality_raw"] = *e.originality_raw;
  if (!e.error.empty()) j["error"] = e.error;
  return j;
}

LedgerEntry ledger_entry_from_json(const json& j) {
  LedgerEntry e;
  e.model_id = j.at("model_id").get<std::string>();
  e.sweep = j.value("sweep", std::string());
  e.beta_map = j.value("beta_map", std::map<std::string, double>{});
  e.seed = j.value("seed", uint64_t{0});
  e.status = j.at("status").get<std::string>();
  e.stages = j.value("stages", std::vector<std::string>{});
  e.checkpoint = j.value("checkpoint", std::string());
  if (j.contains("recognizability")) e.recognizability = j["recognizability"].get<double>();
  if (j.contains("originality_raw")) e.originality_raw = j["originality_raw"].get<double>();
  e.wall_seconds = j.value("wall_seconds", 0.0);
  e.error = j.value("error", std::string());
  return e;
}

RunLedger::RunLedger(fs::path path) : path_(std::move(path)) {
  if (!fs::exists(path_)) return;
  std::ifstream in(path_);
  if (!in) throw IoError("cannot read run ledger " + path_.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) lines.push_back(line);
  }
  for (size_t i = 0; i < lines.size(); ++i) {
    try {
      entries_.push_back(ledger_entry_from_json(json::parse(lines[i])));
    } catch (const json::exception& e) {
      if (i + 1 == lines.size()) break;  // torn final write
      throw ParseError(path_.string(), "ledger line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
}

void RunLedger::append(const LedgerEntry& entry) {
  std::lock_guard<std::mutex> lock(mutex_);
  if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
  std::ofstream out(path_, std::ios::app);
  if (!out) throw IoError("cannot append to run ledger " + path_.string());
  out << to_json(entry).dump() << '\n';
  out.flush();
  if (!out) throw IoError("write to run ledger " + path_.string() + " failed");
  entries_.push_back(entry);
}

std::vector<LedgerEntry> RunLedger::entries() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return entries_;
}

std::optional<LedgerEntry> RunLedger::latest(const std::string& model_id) const {
  std::lock_guard<std::mutex> lock(mutex_);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->model_id == model_id) return *it;
  }
  return std::nullopt;
}

void write_samples(const fs::path& dir, const std::vector<TaggedSamples>& samples) {
  for (const auto& s : samples) {
    const auto cat = dir / std::to_string(s.category_id);
    fs::create_directories(cat);
    for (int64_t k = 0; k < s.images.size(0); ++k) {
      write_png_gray(cat / ("sample_" + std::to_string(k) + ".png"), s.images[k]);
    }
  }
}

std::vector<TaggedSamples> read_samples(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("sample directory " + dir.string() + " does not exist");
  std::map<int64_t, fs::path> cats;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_directory()) continue;
    const auto name = e.path().filename().string();
    try {
      size_t used = 0;
      const auto id = std::stoll(name, &used);
      if (used == name.size()) cats[id] = e.path();
    } catch (const std::exception&) {
    }
  }
  std::vector<TaggedSamples> out;
  for (const auto& [id, path] : cats) {
    std::map<int64_t, fs::path> files;
    for (const auto& f : fs::directory_iterator(path)) {
      const auto name = f.path().filename().string();
      if (name.rfind("sample_", 0) != 0 || f.path().extension() != ".png") continue;
      files[std::stoll(name.substr(7))] = f.path();
    }
    if (files.empty()) continue;
    std::vector<torch::Tensor> imgs;
    for (const auto& [k, p] : files) imgs.push_back(read_png_gray(p));
    out.push_back({id, torch::stack(imgs)});
  }
  if (out.empty()) throw ValidationError("no samples found under " + dir.string());
  return out;
}

std::vector<TaggedSamples> sample_split(RAE& rae, UNet& unet, const LDMConfig& config, const DatasetSplit& split,
                                        int64_t n, Rng& rng) {
  const auto schedule = config.schedule();
  auto predictor = as_predictor(unet);
  unet->eval();
  rae->eval();
  std::vector<TaggedSamples> out;
  for (const auto& e : split.episodes) {
    auto imgs = generate_variations(rae, predictor, config.unet.latent_dim, e.exemplar, n, config.guidance.gamma,
                                    schedule, rng);
    out.push_back({e.category_id, imgs});
  }
  return out;
}

EvalReport assemble_report(std::vector<ModelPoint> points, std::vector<std::string> sweeps,
                           const std::vector<double>& swept_betas, double human_originality_raw,
                           double human_recognizability) {
  if (points.size() != sweeps.size() || points.size() != swept_betas.size()) {
    throw ValidationError("assemble_report: points, sweeps and betas differ in length");
  }
  EvalReport r;
  r.human.originality_raw = human_originality_raw;
  r.human.recognizability = human_recognizability;
  r.human.originality = normalize_originality(points, human_originality_raw);
  double best = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < points.size(); ++i) {
    const double d = distance_to_human(points[i], r.human.originality, r.human.recognizability);
    r.distances.push_back(d);
    if (d < best) {
      best = d;
      r.nearest = static_cast<int64_t>(i);
    }
  }
  std::map<std::string, std::vector<size_t>> by_sweep;
  for (size_t i = 0; i < points.size(); ++i) {
    if (!std::isnan(swept_betas[i]) && swept_betas[i] > 0.0) by_sweep[sweeps[i]].push_back(i);
  }
  for (const auto& [name, idx] : by_sweep) {
    std::vector<double> b, o, rc;
    for (auto i : idx) {
      b.push_back(swept_betas[i]);
      o.push_back(points[i].originality);
      rc.push_back(points[i].recognizability);
    }
    if (std::set<double>(b.begin(), b.end()).size() >= 3) r.fits[name] = fit_sweep(b, o, rc);
  }
  r.points = std::move(points);
  r.sweeps = std::move(sweeps);
  return r;
}

namespace {

std::string beta_map_string(const std::map<std::string, double>& m) {
  std::string s;
  for (const auto& [k, v] : m) {
    if (!s.empty()) s += ";";
    s += k + "=" + format_number(v);
  }
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out.flush()) throw IoError("write to " + tmp.string() + " failed");
  }
  fs::rename(tmp, path);
}

}  // namespace

void write_report_csv(const fs::path& path, const EvalReport& r) {
  std::ostringstream s;
  s << "model_id,sweep,beta_map,recognizability,originality_raw,originality,distance_to_human\n";
  for (size_t i = 0; i < r.points.size(); ++i) {
    const auto& p = r.points[i];
    s << p.model_id << ',' << r.sweeps[i] << ',' << beta_map_string(p.beta_map) << ','
      << format_number(p.recognizability) << ',' << format_number(p.originality_raw) << ','
      << format_number(p.originality) << ',' << format_number(r.distances[i]) << '\n';
  }
  s << "human,,," << format_number(r.human.recognizability) << ',' << format_number(r.human.originality_raw) << ','
    << format_number(r.human.originality) << ",0\n";
  write_text(path, s.str());
}

void write_fits_json(const fs::path& path, const EvalReport& r) {
  json fits = json::object();
  for (const auto& [name, f] : r.fits) {
    fits[name] = {{"abscissa", "log10(beta)"},
                  {"beta_order", f.beta_order},
                  {"originality", f.originality},
                  {"recognizability", f.recognizability}};
  }
  json j = {{"schema_version", kExperimentSchemaVersion},
            {"human",
             {{"originality_raw", r.human.originality_raw},
              {"originality", r.human.originality},
              {"recognizability", r.human.recognizability}}},
            {"fits", fits}};
  if (r.nearest >= 0) {
    const auto i = static_cast<size_t>(r.nearest);
    j["nearest_to_human"] = {{"model_id", r.points[i].model_id}, {"distance", r.distances[i]}};
  } else {
    j["nearest_to_human"] = nullptr;
  }
  write_text(path, j.dump(2) + "\n");
}

void write_plot_svg(const fs::path& path, const EvalReport& r) {
  constexpr double kSize = 480, kMargin = 50, kSpan = kSize - 2 * kMargin;
  static const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"};
  auto px = [&](double o) { return kMargin + std::clamp(o, -0.1, 1.1) * kSpan; };
  auto py = [&](double rc) { return kSize - kMargin - std::clamp(rc, -0.1, 1.1) * kSpan; };
  auto f = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return std::string(buf);
  };
  std::map<std::string, size_t> colour;
  for (const auto& s : r.sweeps) colour.emplace(s, colour.size());

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSize << "\" height=\"" << kSize << "\">\n"
    << "<defs><marker id=\"arrow\" viewBox=\"0 0 10 10\" refX=\"9\" refY=\"5\" markerWidth=\"6\" markerHeight=\"6\""
    << " orient=\"auto\"><path d=\"M0,0 L10,5 L0,10 z\"/></marker></defs>\n"
    << "<rect x=\"" << kMargin << "\" y=\"" << kMargin << "\" width=\"" << kSpan << "\" height=\"" << kSpan
    << "\" fill=\"none\" stroke=\"#444\"/>\n"
    << "<text x=\"" << kSize / 2 << "\" y=\"" << kSize - 12 << "\" text-anchor=\"middle\">originality</text>\n"
    << "<text x=\"14\" y=\"" << kSize / 2 << "\" transform=\"rotate(-90 14 " << kSize / 2
    << ")\" text-anchor=\"middle\">recognizability</text>\n";
  for (const auto& [name, fit] : r.fits) {
    const double lo = std::log10(fit.beta_order.front()), hi = std::log10(fit.beta_order.back());
    s << "<polyline class=\"fit\" data-sweep=\"" << name << "\" fill=\"none\" stroke=\""
      << kPalette[colour[name] % 7] << "\" marker-end=\"url(#arrow)\" points=\"";
    constexpr int kSteps = 48;
    for (int k = 0; k <= kSteps; ++k) {
      const double x = lo + (hi - lo) * k / kSteps;
      s << (k ? " " : "") << f(px(eval_quadratic(fit.originality, x))) << ','
        << f(py(eval_quadratic(fit.recognizability, x)));
    }
    s << "\"/>\n";
  }
  for (size_t i = 0; i < r.points.size(); ++i) {
    const auto& p = r.points[i];
    s << "<circle class=\"model\" data-model-id=\"" << p.model_id << "\" cx=\"" << f(px(p.originality))
      << "\" cy=\"" << f(py(p.recognizability)) << "\" r=\"4\" fill=\"" << kPalette[colour[r.sweeps[i]] % 7]
      << "\"/>\n";
  }
  if (r.nearest >= 0) {
    const auto& p = r.points[static_cast<size_t>(r.nearest)];
    s << "<circle id=\"nearest\" data-model-id=\"" << p.model_id << "\" cx=\"" << f(px(p.originality)) << "\" cy=\""
      << f(py(p.recognizability)) << "\" r=\"9\" fill=\"none\" stroke=\"#000\" stroke-width=\"2\"/>\n";
  }
  s << "<rect id=\"human\" x=\"" << f(px(r.human.originality) - 5) << "\" y=\"" << f(py(r.human.recognizability) - 5)
    << "\" width=\"10\" height=\"10\" fill=\"#000\"/>\n";
  s << "</svg>\n";
  write_text(path, s.str());
}

uint64_t estimate_sweep_bytes(const ExperimentConfig& config, int64_t n_test_categories) {
  const auto points = static_cast<uint64_t>(expand_sweeps(config).size());
  uint64_t per_point = 0;
  const bool trains = config.stages.count(Stage::RAE) || config.stages.count(Stage::LDM);
  if (trains) {
    torch::NoGradGuard guard;
    Rng rng(0);
    std::vector<RegularizerSpec> specs;
    const auto rae = make_rae(config.rae, specs, 2, rng);
    const UNet unet(config.ldm.unet);
    const auto rae_params = static_cast<uint64_t>(parameter_count(*rae));
    const auto unet_params = static_cast<uint64_t>(parameter_count(*unet));
    // rae.ckpt with Adam moments, model.ckpt with the ldm's moments plus a bare autoencoder copy.
    per_point += 4 * (3 * rae_params + 3 * unet_params + rae_params);
  }
  const auto images = static_cast<uint64_t>(n_test_categories * config.samples_per_category);
  per_point += images * 2500;
  if (config.stages.count(Stage::Attribute)) per_point += static_cast<uint64_t>(n_test_categories) * 30000;
  return points * per_point;
}

namespace {

struct PointPaths {
  fs::path dir, rae_ckpt, model_ckpt, samples, maps, overlays, grids;
};

// Checkpoints are keyed by everything that determines their bytes, so a
// changed config never picks up stale weights.
PointPaths point_paths(const ExperimentConfig& config, const SweepPoint& p) {
  json key = {{"rae", to_json(config.rae)},
              {"ldm", to_json(config.ldm)},
              {"specs", specs_json(p.specs)},
              {"seed", p.seed},
              {"dataset", config.dataset.root.string()},
              {"dataset_name", to_string(config.dataset.name)},
              {"groups", config.dataset.load.groups},
              {"max_groups", config.dataset.load.max_groups}};
  const auto hash = hex64(derive_seed(0, 0.0, key.dump())).substr(0, 10);
  PointPaths out;
  out.dir = cache_root(config) / (p.model_id + "-" + hash);
  out.rae_ckpt = out.dir / "rae.ckpt";
  out.model_ckpt = out.dir / "model.ckpt";
  out.samples = config.output_dir / "samples" / p.model_id;
  out.maps = config.output_dir / "maps" / p.model_id;
  out.overlays = config.output_dir / "overlays" / p.model_id;
  out.grids = config.output_dir / "grids" / p.model_id;
  return out;
}

int64_t checkpoint_epoch(const fs::path& path, const std::string& tag) {
  if (!fs::exists(path)) return -1;
  return Checkpoint::load(path).section(tag).epoch;
}

struct SharedState {
  const ExperimentConfig& config;
  const DatasetSplit& train;
  const DatasetSplit& test;
  RunLedger& ledger;
  std::mutex critics_mutex;
  std::optional<Critics> critics;
  std::string critics_error;
};

const Critics& ensure_critics(SharedState& st) {
  std::lock_guard<std::mutex> lock(st.critics_mutex);
  if (st.critics) return *st.critics;
  if (!st.critics_error.empty()) throw TrainingError(st.critics_error);
  const auto& c = st.config;
  fs::path path;
  if (c.critics_path) {
    path = *c.critics_path;
  } else {
    json key = {{"critics", to_json(c.critics)},
                {"seed", c.seed},
                {"dataset", c.dataset.root.string()},
                {"groups", c.dataset.load.groups},
                {"max_groups", c.dataset.load.max_groups}};
    path = cache_root(c) / ("critics-" + hex64(derive_seed(0, 0.0, key.dump())).substr(0, 10) + ".ckpt");
  }
  try {
    if (fs::exists(path)) {
      st.critics = load_critics(path);
    } else {
      if (c.critics_path) throw IoError("critics checkpoint " + path.string() + " does not exist");
      st.critics = train_critics(st.train, c.critics, derive_seed(c.seed, 0.0, "critics"));
      save_critics(*st.critics, path);
    }
  } catch (const Error& e) {
    st.critics_error = e.what();
    throw;
  }
  return *st.critics;
}

std::vector<std::string> stage_names(const std::set<Stage>& stages) {
  std::vector<std::string> out;
  for (auto s : stages) out.push_back(to_string(s));
  return out;
}

bool covers(const LedgerEntry& e, const std::set<Stage>& stages) {
  for (auto s : stages) {
    if (std::find(e.stages.begin(), e.stages.end(), to_string(s)) == e.stages.end()) return false;
  }
  return true;
}

// Runs the selected stages of one point; fills metrics and the checkpoint path.
void run_point(SharedState& st, const SweepPoint& p, LedgerEntry& entry) {
  const auto& c = st.config;
  const auto paths = point_paths(c, p);
  fs::create_directories(paths.dir);
  const bool want_rae = c.stages.count(Stage::RAE) > 0;
  const bool want_ldm = c.stages.count(Stage::LDM) > 0;
  const bool want_sample = c.stages.count(Stage::Sample) > 0;
  const bool want_attr = c.stages.count(Stage::Attribute) > 0;
  const bool want_eval = c.stages.count(Stage::Evaluate) > 0;

  if (want_rae) {
    const auto done = checkpoint_epoch(paths.rae_ckpt, "rae");
    if (done < c.rae.epochs) {
      TrainOptions opts;
      opts.checkpoint = paths.rae_ckpt;
      opts.checkpoint_every = c.checkpoint_every;
      if (done >= 0) opts.resume = paths.rae_ckpt;
      train_rae(st.train, c.rae, p.specs, derive_seed(p.seed, 0.0, "rae"), opts);
    }
    entry.checkpoint = paths.rae_ckpt.string();
  }
  if (want_ldm) {
    if (!fs::exists(paths.rae_ckpt)) {
      throw ConfigError("ldm stage needs " + paths.rae_ckpt.string() + "; schedule the rae stage");
    }
    const auto done = checkpoint_epoch(paths.model_ckpt, "ldm");
    if (done < c.ldm.epochs) {
      const auto rae_ckpt = Checkpoint::load(paths.rae_ckpt);
      auto rae = load_rae(rae_ckpt);
      auto frozen = rae_ckpt.section("rae");
      frozen.optimizer.clear();
      frozen.rng_state.clear();
      const auto latents = encode_split(rae, st.train);
      LDMTrainOptions opts;
      opts.checkpoint = paths.model_ckpt;
      opts.checkpoint_every = c.checkpoint_every;
      opts.extra_sections.push_back(frozen);
      if (done >= 0) opts.resume = paths.model_ckpt;
      train_ldm(latents, c.ldm, derive_seed(p.seed, 0.0, "ldm"), opts);
    }
    entry.checkpoint = paths.model_ckpt.string();
  }

  std::optional<Checkpoint> model_ckpt;
  auto model = [&]() -> const Checkpoint& {
    if (!model_ckpt) {
      if (!fs::exists(paths.model_ckpt)) {
        throw ConfigError("missing trained model " + paths.model_ckpt.string() + "; schedule the rae and ldm stages");
      }
      model_ckpt = Checkpoint::load(paths.model_ckpt);
    }
    return *model_ckpt;
  };

  const bool have_samples = fs::is_directory(paths.samples) && !fs::is_empty(paths.samples);
  if (want_sample || (want_eval && !have_samples)) {
    auto rae = load_rae(model());
    auto ldm = load_ldm(model());
    Rng rng(derive_seed(p.seed, 0.0, "sample"));
    torch::NoGradGuard guard;
    auto samples = sample_split(rae, ldm.model, ldm.config, st.test, c.samples_per_category, rng);
    fs::remove_all(paths.samples);
    write_samples(paths.samples, samples);
    fs::create_directories(paths.grids);
    for (size_t i = 0; i < samples.size(); ++i) {
      std::vector<torch::Tensor> imgs;
      for (int64_t k = 0; k < samples[i].images.size(0); ++k) imgs.push_back(samples[i].images[k]);
      render_grid(paths.grids / (std::to_string(samples[i].category_id) + ".png"), imgs,
                  st.test.episodes[i].exemplar);
    }
    entry.checkpoint = paths.model_ckpt.string();
  }
  if (want_attr) {
    auto rae = load_rae(model());
    auto ldm = load_ldm(model());
    ldm.model->eval();
    const auto predictor = as_predictor(ldm.model);
    const auto schedule = ldm.config.schedule();
    Rng rng(derive_seed(p.seed, 0.0, "attribute"));
    fs::create_directories(paths.maps);
    fs::create_directories(paths.overlays);
    const auto n = c.attribution_categories > 0
                       ? std::min<size_t>(static_cast<size_t>(c.attribution_categories), st.test.episodes.size())
                       : st.test.episodes.size();
    for (size_t i = 0; i < n; ++i) {
      const auto& e = st.test.episodes[i];
      const auto m = category_importance(rae, predictor, e.exemplar, c.attribution_variations, schedule,
                                         ldm.config.guidance.gamma, rng);
      write_npy(paths.maps / (std::to_string(e.category_id) + ".npy"), m.values);
      render_overlay(paths.overlays / (std::to_string(e.category_id) + ".png"), m, e.exemplar);
    }
    entry.checkpoint = paths.model_ckpt.string();
  }
  if (want_eval) {
    const auto& critics = ensure_critics(st);
    const auto samples = read_samples(paths.samples);
    const auto exemplars = exemplar_set(st.test);
    Rng rng(derive_seed(p.seed, 0.0, "evaluate"));
    entry.recognizability =
        recognizability(samples, exemplars, critics.classifier.embedder(), c.n_way, c.n_way > 0 ? &rng : nullptr);
    entry.originality_raw = originality_raw(samples, exemplars, critics.embedder.embedder());
    if (entry.checkpoint.empty() && fs::exists(paths.model_ckpt)) entry.checkpoint = paths.model_ckpt.string();
  }
}

}  // namespace

SweepOutcome run_sweep(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const auto& ds = config.dataset;
  if (ds.synthetic && !fs::exists(ds.root / "manifest.json")) {
    write_synthetic_dataset(ds.root, ds.name, *ds.synthetic);
  }
  auto load_opts = ds.load;
  load_opts.image_size = config.rae.image_size;
  const auto train = load_dataset(ds.root, ds.name, SplitName::Train, load_opts);
  const auto test = load_dataset(ds.root, ds.name, SplitName::Test, load_opts);
  const auto points = expand_sweeps(config);

  fs::create_directories(config.output_dir);
  fs::create_directories(cache_root(config));
  if (!options.skip_disk_check) {
    const auto need = estimate_sweep_bytes(config, static_cast<int64_t>(test.episodes.size()));
    const auto avail = fs::space(config.output_dir).available;
    if (need > avail) {
      throw IoError("sweep needs about " + std::to_string(need >> 20) + " MiB but only " +
                    std::to_string(avail >> 20) + " MiB are free under " + config.output_dir.string());
    }
  }
  write_text(config.output_dir / "config.json", to_json(config).dump(2) + "\n");

  RunLedger ledger(config.output_dir / "ledger.jsonl");
  SharedState st{config, train, test, ledger, {}, {}, {}};
  SweepOutcome out;
  out.entries.resize(points.size());

  std::atomic<size_t> next{0};
  std::atomic<int64_t> computed{0}, skipped{0}, failed{0};
  std::atomic<bool> stop{false};
  auto worker = [&]() {
    for (;;) {
      if (stop.load()) return;
      const size_t i = next.fetch_add(1);
      if (i >= points.size()) return;
      const auto& p = points[i];
      if (auto prev = ledger.latest(p.model_id);
          prev && prev->status == "complete" && covers(*prev, config.stages) &&
          (prev->checkpoint.empty() || fs::exists(prev->checkpoint)) &&
          (!config.stages.count(Stage::Evaluate) || (prev->recognizability && prev->originality_raw))) {
        out.entries[i] = *prev;
        ++skipped;
        continue;
      }
      LedgerEntry e;
      e.model_id = p.model_id;
      e.sweep = p.sweep;
      e.beta_map = p.beta_map;
      e.seed = p.seed;
      e.stages = stage_names(config.stages);
      const auto t0 = std::chrono::steady_clock::now();
      try {
        run_point(st, p, e);
        e.status = "complete";
      } catch (const std::exception& ex) {
        e.status = "failed";
        e.error = ex.what();
        e.recognizability.reset();
        e.originality_raw.reset();
        ++failed;
      }
      e.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      ledger.append(e);
      out.entries[i] = e;
      if (++computed == options.stop_after_points) stop = true;
    }
  };
  const auto jobs = std::max<int64_t>(1, options.jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int64_t k = 0; k < jobs; ++k) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  out.computed = computed;
  out.skipped = skipped;
  out.failed = failed;
  out.stopped_early = std::any_of(out.entries.begin(), out.entries.end(),
                                  [](const LedgerEntry& e) { return e.model_id.empty(); });
  if (out.stopped_early) {
    out.exit_code = out.failed ? 2 : 0;
    return out;
  }
  if (config.stages.count(Stage::Evaluate)) {
    std::vector<ModelPoint> mp;
    std::vector<std::string> sweeps;
    std::vector<double> betas;
    for (size_t i = 0; i < points.size(); ++i) {
      const auto& e = out.entries[i];
      if (e.status != "complete" || !e.recognizability || !e.originality_raw) continue;
      ModelPoint m;
      m.model_id = e.model_id;
      m.beta_map = e.beta_map;
      m.recognizability = *e.recognizability;
      m.originality_raw = *e.originality_raw;
      mp.push_back(m);
      sweeps.push_back(points[i].sweep);
      betas.push_back(points[i].swept_beta);
    }
    if (!mp.empty()) {
      try {
        const auto& critics = ensure_critics(st);
        const auto human = split_samples(test);
        const auto exemplars = exemplar_set(test);
        Rng rng(derive_seed(config.seed, 0.0, "human"));
        const double hr = recognizability(human, exemplars, critics.classifier.embedder(), config.n_way,
                                          config.n_way > 0 ? &rng : nullptr);
        const double ho = originality_raw(human, exemplars, critics.embedder.embedder());
        out.report = assemble_report(std::move(mp), std::move(sweeps), betas, ho, hr);
        write_report_csv(config.output_dir / "report.csv", *out.report);
        write_fits_json(config.output_dir / "fits.json", *out.report);
        write_plot_svg(config.output_dir / "plot.svg", *out.report);
      } catch (const Error& e) {
        ++out.failed;
        std::fprintf(stderr, "report: %s\n", e.what());
      }
    }
  }
  bool any_failed = out.failed > 0;
  for (const auto& e : out.entries) any_failed = any_failed || e.status != "complete";
  out.exit_code = any_failed ? 2 : 0;
  return out;
}

nlohmann::json map_statistics(const fs::path& model_dir, const fs::path& human_dir, int64_t n_resamples,
                              uint64_t seed) {
  auto category_of = [](const fs::path& p) { return p.stem().string(); };
  if (!fs::is_directory(human_dir)) throw IoError("human map directory " + human_dir.string() + " does not exist");
  if (!fs::is_directory(model_dir)) throw IoError("model map directory " + model_dir.string() + " does not exist");

  std::map<std::string, std::vector<torch::Tensor>> human;
  for (const auto& cat : fs::directory_iterator(human_dir)) {
    if (!cat.is_directory()) continue;
    std::map<std::string, torch::Tensor> maps;  // sorted by participant
    for (const auto& f : fs::directory_iterator(cat.path())) {
      if (f.path().extension() == ".npy") maps[f.path().stem().string()] = read_npy(f.path()).to(torch::kFloat64);
    }
    auto& v = human[cat.path().filename().string()];
    for (auto& [k, m] : maps) v.push_back(m);
  }
  std::map<std::string, torch::Tensor> human_mean;
  for (const auto& [cat, maps] : human) {
    if (maps.empty()) continue;
    human_mean[cat] = torch::stack(maps).mean(0);
  }

  std::map<std::string, std::map<std::string, double>> rho;
  for (const auto& m : fs::directory_iterator(model_dir)) {
    if (!m.is_directory()) continue;
    auto& per_cat = rho[m.path().filename().string()];
    for (const auto& f : fs::directory_iterator(m.path())) {
      if (f.path().extension() != ".npy") continue;
      auto it = human_mean.find(category_of(f.path()));
      if (it == human_mean.end()) continue;
      const auto map = read_npy(f.path()).to(torch::kFloat64);
      if (map.numel() != it->second.numel()) {
        throw ValidationError("map " + f.path().string() + " differs in size from the human maps");
      }
      try {
        per_cat[it->first] = spearman_rank(map.flatten(), it->second.flatten());
      } catch (const DegenerateError&) {
        // Constant maps have no rank correlation; the category is left out.
      }
    }
  }

  json out;
  Rng rng(seed);
  std::map<std::string, std::vector<torch::Tensor>> bootstrap_maps;
  for (const auto& [cat, maps] : human) {
    if (maps.size() >= 2) bootstrap_maps[cat] = maps;
  }
  out["human_consistency"] =
      bootstrap_maps.empty() ? json(nullptr) : json(bootstrap_consistency(bootstrap_maps, n_resamples, rng));
  out["n_resamples"] = n_resamples;
  json models = json::object();
  for (const auto& [id, per_cat] : rho) {
    double sum = 0.0;
    for (const auto& [cat, r] : per_cat) sum += r;
    models[id] = {{"per_category", per_cat},
                  {"mean_rho", per_cat.empty() ? json(nullptr) : json(sum / static_cast<double>(per_cat.size()))}};
  }
  out["models"] = models;
  json tests = json::array();
  for (const auto& [a, ra] : rho) {
    for (const auto& [b, rb] : rho) {
      if (a == b) continue;
      std::vector<double> va, vb;
      for (const auto& [cat, r] : ra) {
        if (auto it = rb.find(cat); it != rb.end()) {
          va.push_back(r);
          vb.push_back(it->second);
        }
      }
      json t = {{"a", a}, {"b", b}, {"alternative", "greater"}, {"n_categories", va.size()}};
      try {
        if (va.empty()) throw DegenerateError("no shared categories");
        const auto w = wilcoxon_signed_rank(va, vb, Alternative::Greater);
        t["statistic"] = w.statistic;
        t["p_value"] = w.p_value;
        t["exact"] = w.exact;
      } catch (const DegenerateError& e) {
        t["p_value"] = nullptr;
        t["note"] = e.what();
      }
      tests.push_back(t);
    }
  }
  out["wilcoxon"] = tests;
  return out;
}

}  // namespace oneshot
