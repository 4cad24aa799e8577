// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#include "oneshot_ldm/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "oneshot_ldm/checkpoint.hpp"
#include "oneshot_ldm/errors.hpp"
#include "oneshot_ldm/regularizers.hpp"

namespace oneshot {

void CriticConfig::validate() const {
  if (widths.size() != 4) throw ConfigError("critic widths must list 4 channel counts");
  for (auto w : widths) {
    if (w < 1) throw ConfigError("critic widths must be positive");
  }
  if (embedding_dim < 1 || projection_dim < 1) throw ConfigError("critic dimensions must be positive");
  if (classifier_epochs < 0 || embedder_epochs < 0) throw ConfigError("critic epochs must be >= 0");
  if (batch_size < 2) throw ConfigError("critic batch_size must be >= 2");
  if (!(learning_rate > 0.0)) throw ConfigError("critic learning_rate must be positive");
  if (!(temperature > 0.0)) throw ConfigError("critic temperature must be positive");
  if (!(gate_accuracy >= 0.0 && gate_accuracy <= 1.0)) throw ConfigError("gate_accuracy must lie in [0, 1]");
  if (gate_n_way < 0 || gate_n_way == 1) throw ConfigError("gate_n_way must be 0 or >= 2");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw ConfigError("holdout_fraction must lie in (0, 1)");
  augmentation.validate();
}

nlohmann::json to_json(const CriticConfig& c) {
  return {{"widths", c.widths},
          {"embedding_dim", c.embedding_dim},
          {"classifier_epochs", c.classifier_epochs},
          {"embedder_epochs", c.embedder_epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"temperature", c.temperature},
          {"projection_dim", c.projection_dim},
          {"augmentation", to_json(c.augmentation)},
          {"gate_accuracy", c.gate_accuracy},
          {"gate_n_way", c.gate_n_way},
          {"holdout_fraction", c.holdout_fraction}};
}

CriticConfig critic_config_from_json(const nlohmann::json& j) {
  CriticConfig c;
  try {
    c.widths = j.value("widths", c.widths);
    c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
    c.classifier_epochs = j.value("classifier_epochs", c.classifier_epochs);
    c.embedder_epochs = j.value("embedder_epochs", c.embedder_epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.temperature = j.value("temperature", c.temperature);
    c.projection_dim = j.value("projection_dim", c.projection_dim);
    if (j.contains("augmentation")) c.augmentation = augmentation_from_json(j["augmentation"]);
    c.gate_accuracy = j.value("gate_accuracy", c.gate_accuracy);
    c.gate_n_way = j.value("gate_n_way", c.gate_n_way);
    c.holdout_fraction = j.value("holdout_fraction", c.holdout_fraction);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("critic config: ") + e.what());
  }
  c.validate();
  return c;
}

torch::Tensor Critic::embed(const torch::Tensor& images) const {
  check_image_batch(images, 48);
  torch::NoGradGuard guard;
  auto* m = net.ptr().get();
  if (m->is_training()) m->eval();
  std::vector<torch::Tensor> out;
  constexpr int64_t kChunk = 256;
  for (int64_t i = 0; i < images.size(0); i += kChunk) {
    out.push_back(m->forward(images.narrow(0, i, std::min(kChunk, images.size(0) - i)).to(torch::kFloat32)));
  }
  if (out.empty()) return torch::zeros({0, m->fc->options.out_features()});
  return torch::cat(out);
}

Embedder Critic::embedder() const {
  return [c = *this](const torch::Tensor& x) { return c.embed(x); };
}

double one_shot_accuracy(const Embedder& embed, const torch::Tensor& queries, const torch::Tensor& labels,
                         const torch::Tensor& exemplars, int64_t n_way, Rng* rng) {
  const int64_t Q = queries.size(0), N = exemplars.size(0);
  if (Q == 0) throw ValidationError("one_shot_accuracy: no queries");
  if (labels.dim() != 1 || labels.size(0) != Q) throw ValidationError("one_shot_accuracy: labels must be [Q]");
  auto eq = embed(queries).to(torch::kFloat64);
  auto ee = embed(exemplars).to(torch::kFloat64);
  auto dist = (eq.unsqueeze(1) - ee.unsqueeze(0)).pow(2).sum(-1);  // [Q, N]
  auto lab = labels.to(torch::kInt64).contiguous();
  const auto* L = lab.data_ptr<int64_t>();
  int64_t correct = 0;
  if (n_way == 0 || n_way >= N) {
    auto pred = dist.argmin(1).contiguous();
    const auto* P = pred.data_ptr<int64_t>();
    for (int64_t i = 0; i < Q; ++i) correct += P[i] == L[i];
  } else {
    if (n_way < 2) throw ValidationError("n_way must be >= 2");
    if (!rng) throw ValidationError("episodic n-way evaluation needs an rng");
    auto D = dist.accessor<double, 2>();
    for (int64_t i = 0; i < Q; ++i) {
      std::vector<int64_t> others;
      for (int64_t k : rng->permutation(N)) {
        if (k != L[i]) others.push_back(k);
        if (static_cast<int64_t>(others.size()) == n_way - 1) break;
      }
      others.push_back(L[i]);
      std::sort(others.begin(), others.end());
      int64_t best = others.front();
      for (int64_t k : others) {
        if (D[i][k] < D[i][best]) best = k;
      }
      correct += best == L[i];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(Q);
}

namespace {

DatasetSplit subset(const DatasetSplit& split, const std::vector<size_t>& keep) {
  DatasetSplit out;
  out.split = split.split;
  out.height = split.height;
  out.width = split.width;
  for (auto k : keep) out.episodes.push_back(split.episodes[k]);
  return out;
}

std::string curve(const std::vector<double>& v) {
  std::ostringstream s;
  for (size_t i = 0; i < v.size(); ++i) s << (i ? ", " : "") << v[i];
  return s.str();
}

}  // namespace

Critics train_critics(const DatasetSplit& train, const CriticConfig& config, uint64_t seed) {
  config.validate();
  const auto n = train.episodes.size();
  const auto n_hold = std::max<size_t>(2, static_cast<size_t>(std::lround(config.holdout_fraction * n)));
  if (n < n_hold + 2) throw ValidationError("train_critics needs at least " + std::to_string(n_hold + 2) + " categories");
  Rng rng(seed);
  std::vector<size_t> order;
  for (auto k : rng.permutation(static_cast<int64_t>(n))) order.push_back(static_cast<size_t>(k));
  std::vector<size_t> held(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::vector<size_t> fit(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());
  std::sort(held.begin(), held.end());
  std::sort(fit.begin(), fit.end());
  const auto fit_split = subset(train, fit);
  const auto val_split = subset(train, held);

  Critics out;
  out.classifier.kind = "classifier";
  out.classifier.net = ConvEncoder(config.widths, config.embedding_dim);
  seeded_init(*out.classifier.net, rng);
  {
    auto& net = out.classifier.net;
    torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(config.learning_rate));
    const auto B = std::min<int64_t>(config.batch_size, static_cast<int64_t>(fit_split.num_variations()));
    net->train();
    for (int64_t e = 0; e < config.classifier_epochs; ++e) {
      BatchSampler sampler(fit_split, B, rng.fork());
      double sum = 0.0;
      int64_t steps = 0;
      while (auto b = sampler.next()) {
        opt.zero_grad();
        auto loss = prototype_nll(net->forward(b->images), net->forward(b->exemplars), b->labels);
        loss.backward();
        opt.step();
        sum += loss.item<double>();
        ++steps;
      }
      out.report.classifier_loss.push_back(sum / static_cast<double>(std::max<int64_t>(1, steps)));
    }
  }
  {
    std::vector<torch::Tensor> q;
    std::vector<int64_t> lab;
    for (size_t e = 0; e < val_split.episodes.size(); ++e) {
      for (const auto& v : val_split.episodes[e].variations) {
        q.push_back(v);
        lab.push_back(static_cast<int64_t>(e));
      }
    }
    out.report.gate_n_way = config.gate_n_way == 0 ? static_cast<int64_t>(val_split.episodes.size()) : config.gate_n_way;
    out.report.gate_accuracy = one_shot_accuracy(out.classifier.embedder(), torch::stack(q), torch::tensor(lab),
                                                 val_split.exemplar_batch(), config.gate_n_way, &rng);
    if (out.report.gate_accuracy < config.gate_accuracy) {
      throw TrainingError("critic classifier reached " + std::to_string(out.report.gate_accuracy) +
                          " one-shot accuracy on held-out train categories (" +
                          std::to_string(out.report.gate_n_way) + "-way), below the " +
                          std::to_string(config.gate_accuracy) + " gate; loss curve: [" +
                          curve(out.report.classifier_loss) + "]");
    }
  }

  out.embedder.kind = "embedder";
  out.embedder.net = ConvEncoder(config.widths, config.embedding_dim);
  torch::nn::Linear proj(torch::nn::LinearOptions(config.embedding_dim, config.projection_dim).bias(false));
  seeded_init(*out.embedder.net, rng);
  seeded_init(*proj, rng);
  {
    auto& net = out.embedder.net;
    auto params = net->parameters();
    for (auto& p : proj->parameters()) params.push_back(p);
    torch::optim::Adam opt(params, torch::optim::AdamOptions(config.learning_rate));
    const auto B = std::min<int64_t>(config.batch_size, static_cast<int64_t>(train.num_variations()));
    net->train();
    for (int64_t e = 0; e < config.embedder_epochs; ++e) {
      BatchSampler sampler(train, B, rng.fork());
      double sum = 0.0;
      int64_t steps = 0;
      while (auto b = sampler.next()) {
        if (b->images.size(0) < 2) continue;
        auto xa = augment_batch(b->images, config.augmentation, rng);
        auto xb = augment_batch(b->images, config.augmentation, rng);
        opt.zero_grad();
        auto loss = info_nce(proj->forward(net->forward(xa)), proj->forward(net->forward(xb)), config.temperature);
        loss.backward();
        opt.step();
        sum += loss.item<double>();
        ++steps;
      }
      out.report.embedder_loss.push_back(sum / static_cast<double>(std::max<int64_t>(1, steps)));
    }
  }
  out.classifier.net->eval();
  out.embedder.net->eval();
  return out;
}

void save_critics(const Critics& critics, const std::filesystem::path& path) {
  Checkpoint ckpt;
  for (const Critic* c : {&critics.classifier, &critics.embedder}) {
    auto& sec = ckpt.add("critic-" + c->kind);
    sec.config = {{"widths", c->net->widths},
                  {"embedding_dim", c->net->fc->options.out_features()},
                  {"gate_accuracy", critics.report.gate_accuracy},
                  {"gate_n_way", critics.report.gate_n_way},
                  {"loss", c->kind == "classifier" ? critics.report.classifier_loss : critics.report.embedder_loss}};
    sec.parameters = module_state(*c->net);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  ckpt.save(path);
}

Critics load_critics(const std::filesystem::path& path) {
  const auto ckpt = Checkpoint::load(path);
  Critics out;
  for (auto* c : {&out.classifier, &out.embedder}) {
    c->kind = c == &out.classifier ? "classifier" : "embedder";
    const auto& sec = ckpt.section("critic-" + c->kind);
    c->net = ConvEncoder(sec.config.at("widths").get<std::vector<int64_t>>(),
                         sec.config.at("embedding_dim").get<int64_t>());
    load_module_state(*c->net, sec.parameters);
    c->net->eval();
    auto loss = sec.config.value("loss", std::vector<double>{});
    (c == &out.classifier ? out.report.classifier_loss : out.report.embedder_loss) = loss;
    out.report.gate_accuracy = sec.config.value("gate_accuracy", 0.0);
    out.report.gate_n_way = sec.config.value("gate_n_way", int64_t{0});
  }
  return out;
}

ExemplarSet exemplar_set(const DatasetSplit& split) {
  ExemplarSet out;
  for (const auto& e : split.episodes) out[e.category_id] = e.exemplar;
  return out;
}

std::vector<TaggedSamples> split_samples(const DatasetSplit& split) {
  std::vector<TaggedSamples> out;
  for (const auto& e : split.episodes) out.push_back({e.category_id, torch::stack(e.variations)});
  return out;
}

namespace {

struct Flattened {
  torch::Tensor images;
  torch::Tensor labels;     // column into the exemplar matrix
  torch::Tensor exemplars;  // sorted by category id
};

Flattened flatten(const std::vector<TaggedSamples>& samples, const ExemplarSet& exemplars) {
  std::map<int64_t, int64_t> column;
  std::vector<torch::Tensor> ex;
  for (const auto& [id, img] : exemplars) {
    column[id] = static_cast<int64_t>(ex.size());
    ex.push_back(img);
  }
  std::vector<torch::Tensor> imgs;
  std::vector<int64_t> labels;
  for (const auto& s : samples) {
    auto it = column.find(s.category_id);
    if (it == column.end()) {
      throw ValidationError("sample tagged with category " + std::to_string(s.category_id) +
                            " which is not in the exemplar set");
    }
    auto batch = s.images.dim() == 3 ? s.images.unsqueeze(0) : s.images;
    for (int64_t i = 0; i < batch.size(0); ++i) {
      imgs.push_back(batch[i]);
      labels.push_back(it->second);
    }
  }
  if (imgs.empty()) throw ValidationError("no samples to evaluate");
  return {torch::stack(imgs), torch::tensor(labels, torch::kInt64), torch::stack(ex)};
}

}  // namespace

double recognizability(const std::vector<TaggedSamples>& samples, const ExemplarSet& exemplars, const Embedder& critic,
                       int64_t n_way, Rng* rng) {
  const auto f = flatten(samples, exemplars);
  return one_shot_accuracy(critic, f.images, f.labels, f.exemplars, n_way, rng);
}

double originality_raw(const std::vector<TaggedSamples>& samples, const ExemplarSet& exemplars,
                       const Embedder& embedder) {
  const auto f = flatten(samples, exemplars);
  auto es = embedder(f.images).to(torch::kFloat64);
  auto ee = embedder(f.exemplars).to(torch::kFloat64).index_select(0, f.labels);
  return (es - ee).pow(2).sum(1).sqrt().mean().item<double>();
}

double normalize_originality(std::vector<ModelPoint>& points, double human_raw) {
  double lo = human_raw, hi = human_raw;
  for (const auto& p : points) {
    lo = std::min(lo, p.originality_raw);
    hi = std::max(hi, p.originality_raw);
  }
  if (!(hi > lo)) throw DegenerateError("originality normalization needs at least 2 distinct raw values");
  for (auto& p : points) p.originality = (p.originality_raw - lo) / (hi - lo);
  return (human_raw - lo) / (hi - lo);
}

double distance_to_human(const ModelPoint& point, double human_originality, double human_recognizability) {
  return std::hypot(point.originality - human_originality, point.recognizability - human_recognizability);
}

std::pair<double, double> FitCurve::at(double beta) const {
  const double x = std::log10(beta);
  return {eval_quadratic(originality, x), eval_quadratic(recognizability, x)};
}

FitCurve fit_sweep(const std::vector<double>& betas, const std::vector<double>& originality,
                   const std::vector<double>& recognizability) {
  if (betas.size() != originality.size() || betas.size() != recognizability.size()) {
    throw ValidationError("fit_sweep: betas and metrics differ in length");
  }
  struct Acc {
    double o = 0.0, r = 0.0;
    int n = 0;
  };
  std::map<double, Acc> grouped;
  for (size_t i = 0; i < betas.size(); ++i) {
    if (!(betas[i] > 0.0) || !std::isfinite(betas[i])) throw ValidationError("fit_sweep needs positive finite betas");
    auto& a = grouped[betas[i]];
    a.o += originality[i];
    a.r += recognizability[i];
    ++a.n;
  }
  if (grouped.size() < 3) throw ValidationError("fit_sweep needs at least 3 distinct betas");
  std::vector<double> x, yo, yr;
  FitCurve c;
  for (const auto& [b, a] : grouped) {
    c.beta_order.push_back(b);
    x.push_back(std::log10(b));
    yo.push_back(a.o / a.n);
    yr.push_back(a.r / a.n);
  }
  c.originality = fit_quadratic(x, yo);
  c.recognizability = fit_quadratic(x, yr);
  return c;
}

}  // namespace oneshot
