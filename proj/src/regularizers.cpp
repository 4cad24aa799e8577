// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#include "oneshot_ldm/regularizers.hpp"

#include <cmath>
#include <limits>
#include <set>

#include "oneshot_ldm/errors.hpp"

namespace oneshot {

RegKind parse_reg_kind(const std::string& s) {
  if (s == "none") return RegKind::None;
  if (s == "kl") return RegKind::KL;
  if (s == "vq") return RegKind::VQ;
  if (s == "classification" || s == "cl") return RegKind::Classification;
  if (s == "prototype" || s == "pr") return RegKind::Prototype;
  if (s == "simclr") return RegKind::SimCLR;
  if (s == "barlow") return RegKind::Barlow;
  throw ConfigError("unknown regularizer kind '" + s + "'");
}

std::string to_string(RegKind kind) {
  switch (kind) {
    case RegKind::None: return "none";
    case RegKind::KL: return "kl";
    case RegKind::VQ: return "vq";
    case RegKind::Classification: return "classification";
    case RegKind::Prototype: return "prototype";
    case RegKind::SimCLR: return "simclr";
    case RegKind::Barlow: return "barlow";
  }
  return "?";
}

namespace {

void require_2d(const torch::Tensor& t, const char* what) {
  if (!t.defined() || t.dim() != 2) throw ShapeError(std::string(what) + " must be a [B, d] tensor");
}

void require_same(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    throw ValidationError(std::string(what) + ": shape mismatch " + c10::str(a.sizes()) + " vs " +
                          c10::str(b.sizes()));
  }
}

}  // namespace

torch::Tensor GaussianLatent::reparametrize(const torch::Tensor& eps) const {
  return mean + torch::exp(0.5 * log_variance) * eps;
}

torch::Tensor kl_loss(const GaussianLatent& latent) {
  require_2d(latent.mean, "kl mean");
  require_same(latent.mean, latent.log_variance, "kl_loss");
  if (!torch::isfinite(latent.mean).all().item<bool>() || !torch::isfinite(latent.log_variance).all().item<bool>()) {
    throw NumericalError("kl_loss: non-finite mean or log-variance");
  }
  const auto& m = latent.mean;
  const auto& lv = latent.log_variance;
  return 0.5 * (m.pow(2) + lv.exp() - lv - 1.0).sum(1).mean();
}

Quantized quantize(const torch::Tensor& z, const torch::Tensor& codebook) {
  require_2d(z, "quantize input");
  if (codebook.dim() != 2 || codebook.size(0) < 1) throw ConfigError("codebook must be [K >= 1, s]");
  const int64_t B = z.size(0), d = z.size(1), s = codebook.size(1);
  if (s < 1 || d % s != 0) {
    throw ConfigError("latent size " + std::to_string(d) + " is not divisible by codeword width " +
                      std::to_string(s));
  }
  const int64_t n = d / s;
  auto chunks = z.detach().reshape({B, n, 1, s});
  auto dist = (chunks - codebook.detach().reshape({1, 1, -1, s})).pow(2).sum(-1);  // [B, n, K]
  auto idx = dist.argmin(-1);
  auto z_q = codebook.index_select(0, idx.reshape({-1})).reshape({B, d});
  return {z_q, idx};
}

torch::Tensor vq_loss(const torch::Tensor& z, const torch::Tensor& z_q) {
  require_same(z, z_q, "vq_loss");
  require_2d(z, "vq_loss input");
  const auto commit = (z_q.detach() - z).pow(2).sum(1);
  const auto codebook = (z_q - z.detach()).pow(2).sum(1);
  return (commit + codebook).mean();
}

torch::Tensor straight_through(const torch::Tensor& z, const torch::Tensor& z_q) {
  require_same(z, z_q, "straight_through");
  return z + (z_q - z).detach();
}

torch::Tensor label_cross_entropy(const torch::Tensor& logits, const torch::Tensor& labels) {
  require_2d(logits, "logits");
  if (labels.dim() != 1 || labels.size(0) != logits.size(0)) throw ValidationError("labels must be [B]");
  const int64_t n = logits.size(1);
  if (labels.numel() > 0 && (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() >= n)) {
    throw ValidationError("label out of range [0, " + std::to_string(n) + ")");
  }
  return -torch::log_softmax(logits, 1).gather(1, labels.to(torch::kInt64).unsqueeze(1)).mean();
}

namespace {

struct PrototypeColumns {
  torch::Tensor first_rows;  // one row per distinct label, in order of first appearance
  torch::Tensor target;      // column of each row's own prototype
};

PrototypeColumns prototype_columns(const torch::Tensor& embedded, const torch::Tensor& embedded_exemplars,
                                   const torch::Tensor& labels) {
  require_2d(embedded, "prototype embeddings");
  require_same(embedded, embedded_exemplars, "prototype_loss");
  const int64_t B = embedded.size(0);
  if (B == 0) throw ValidationError("prototype_loss: batch has no exemplars");
  if (labels.dim() != 1 || labels.size(0) != B) throw ValidationError("labels must be [B]");
  auto lab = labels.to(torch::kInt64).contiguous();
  const auto* L = lab.data_ptr<int64_t>();
  std::vector<int64_t> first_rows;
  std::map<int64_t, int64_t> column;
  std::vector<int64_t> target(static_cast<size_t>(B));
  for (int64_t i = 0; i < B; ++i) {
    auto [it, inserted] = column.emplace(L[i], static_cast<int64_t>(first_rows.size()));
    if (inserted) first_rows.push_back(i);
    target[static_cast<size_t>(i)] = it->second;
  }
  return {torch::tensor(first_rows, torch::kInt64), torch::tensor(target, torch::kInt64)};
}

torch::Tensor prototype_distances(const torch::Tensor& embedded, const torch::Tensor& embedded_exemplars,
                                  const torch::Tensor& first_rows) {
  auto protos = embedded_exemplars.index_select(0, first_rows);
  // Clamped so the square root stays differentiable at a zero distance.
  return (embedded.unsqueeze(1) - protos.unsqueeze(0)).pow(2).sum(-1).clamp_min(1e-20).sqrt();
}

}  // namespace

torch::Tensor prototype_probabilities(const torch::Tensor& embedded, const torch::Tensor& embedded_exemplars,
                                      const torch::Tensor& labels, torch::Tensor* prototype_index) {
  auto cols = prototype_columns(embedded, embedded_exemplars, labels);
  if (prototype_index) *prototype_index = cols.target;
  return torch::softmax(-prototype_distances(embedded, embedded_exemplars, cols.first_rows), 1);
}

torch::Tensor prototype_nll(const torch::Tensor& embedded, const torch::Tensor& embedded_exemplars,
                            const torch::Tensor& labels) {
  auto cols = prototype_columns(embedded, embedded_exemplars, labels);
  auto logp = torch::log_softmax(-prototype_distances(embedded, embedded_exemplars, cols.first_rows), 1);
  return -logp.gather(1, cols.target.unsqueeze(1)).mean();
}

torch::Tensor info_nce(const torch::Tensor& h_a, const torch::Tensor& h_b, double temperature) {
  require_2d(h_a, "simclr view A");
  require_same(h_a, h_b, "simclr_loss");
  const int64_t B = h_a.size(0);
  if (B < 2) throw ValidationError("simclr_loss needs B >= 2 (no negatives otherwise)");
  if (!(temperature > 0.0)) throw ConfigError("simclr temperature must be positive");
  auto na = h_a.norm(2, 1, true);
  auto nb = h_b.norm(2, 1, true);
  if ((na == 0).any().item<bool>() || (nb == 0).any().item<bool>()) {
    throw NumericalError("simclr_loss: zero-norm embedding");
  }
  auto sim = torch::matmul(h_a / na, (h_b / nb).t()) / temperature;  // [B, B]
  auto eye = torch::eye(B, torch::TensorOptions().dtype(torch::kBool));
  auto positives = sim.diagonal();
  auto negatives = torch::logsumexp(sim.masked_fill(eye, -std::numeric_limits<double>::infinity()), 1);
  return (negatives - positives).mean();
}

torch::Tensor cross_correlation(const torch::Tensor& h_a, const torch::Tensor& h_b) {
  require_2d(h_a, "barlow view A");
  require_same(h_a, h_b, "barlow_loss");
  const int64_t B = h_a.size(0);
  if (B < 2) throw ValidationError("barlow_loss needs B >= 2");
  auto standardize = [](const torch::Tensor& h) {
    auto centered = h - h.mean(0, true);
    auto sd = centered.pow(2).mean(0, true).sqrt();
    const double scale = 1.0 + h.detach().abs().max().item<double>();
    if ((sd.detach() <= 1e-12 * scale).any().item<bool>()) {
      throw NumericalError("barlow_loss: zero-variance feature");
    }
    return centered / sd;
  };
  return torch::matmul(standardize(h_a).t(), standardize(h_b)) / static_cast<double>(B);
}

torch::Tensor barlow_from_correlation(const torch::Tensor& c, double lambda) {
  if (c.dim() != 2 || c.size(0) != c.size(1)) throw ShapeError("correlation matrix must be square");
  auto diag = c.diagonal();
  auto on = (1.0 - diag).pow(2).sum();
  auto off = c.pow(2).sum() - diag.pow(2).sum();
  return on + lambda * off;
}

torch::Tensor barlow_from_embeddings(const torch::Tensor& h_a, const torch::Tensor& h_b, double lambda) {
  return barlow_from_correlation(cross_correlation(h_a, h_b), lambda);
}

ProjectionHeadImpl::ProjectionHeadImpl(RegKind k, int64_t in_dim, int64_t out_dim) : kind(k) {
  linear = register_module(
      "linear", torch::nn::Linear(torch::nn::LinearOptions(in_dim, out_dim).bias(k == RegKind::Classification)));
}

torch::Tensor ProjectionHeadImpl::forward(const torch::Tensor& z) { return linear->forward(z); }

torch::Tensor classification_loss(const torch::Tensor& z, const torch::Tensor& labels, ProjectionHead& head) {
  return label_cross_entropy(head->forward(z), labels);
}

torch::Tensor prototype_loss(const torch::Tensor& z, const torch::Tensor& z_y, const torch::Tensor& labels,
                             ProjectionHead& head) {
  require_same(z, z_y, "prototype_loss");
  return prototype_nll(head->forward(z), head->forward(z_y), labels);
}

torch::Tensor simclr_loss(const torch::Tensor& z_a, const torch::Tensor& z_b, ProjectionHead& head,
                          double temperature) {
  return info_nce(head->forward(z_a), head->forward(z_b), temperature);
}

torch::Tensor barlow_loss(const torch::Tensor& z_a, const torch::Tensor& z_b, ProjectionHead& head, double lambda) {
  return barlow_from_embeddings(head->forward(z_a), head->forward(z_b), lambda);
}

void RegularizerSpec::validate() const {
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("regularizer beta must be finite and >= 0");
  if (kind == RegKind::VQ && (codebook_size < 1 || codeword_dim < 1)) {
    throw ConfigError("vq needs codebook_size >= 1 and codeword_dim >= 1");
  }
  if (kind == RegKind::SimCLR && !(temperature > 0.0)) throw ConfigError("simclr temperature must be positive");
  if (kind == RegKind::Barlow && !(lambda >= 0.0)) throw ConfigError("barlow lambda must be >= 0");
  if (head_dim < 0) throw ConfigError("head_dim must be >= 0");
}

nlohmann::json to_json(const RegularizerSpec& s) {
  nlohmann::json j = {{"kind", to_string(s.kind)}, {"beta", s.beta}};
  switch (s.kind) {
    case RegKind::VQ:
      j["codebook_size"] = s.codebook_size;
      j["codeword_dim"] = s.codeword_dim;
      break;
    case RegKind::Barlow:
      j["lambda"] = s.lambda;
      j["head_dim"] = s.head_dim;
      break;
    case RegKind::SimCLR:
      j["temperature"] = s.temperature;
      j["head_dim"] = s.head_dim;
      break;
    case RegKind::Prototype:
      j["head_dim"] = s.head_dim;
      break;
    default:
      break;
  }
  return j;
}

RegularizerSpec regularizer_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("kind")) throw ConfigError("regularizer entry needs a 'kind'");
  RegularizerSpec s;
  try {
    s.kind = parse_reg_kind(j.at("kind").get<std::string>());
    s.beta = j.value("beta", 0.0);
    s.codebook_size = j.value("codebook_size", s.codebook_size);
    s.codeword_dim = j.value("codeword_dim", s.codeword_dim);
    s.lambda = j.value("lambda", s.lambda);
    s.temperature = j.value("temperature", s.temperature);
    s.head_dim = j.value("head_dim", s.head_dim);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("regularizer entry: ") + e.what());
  }
  s.validate();
  return s;
}

std::vector<RegularizerSpec> regularizers_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw ConfigError("'regularizers' must be a list");
  std::vector<RegularizerSpec> out;
  for (const auto& e : j) {
    auto s = regularizer_from_json(e);
    if (s.kind != RegKind::None) out.push_back(s);
  }
  return out;
}

RegularizerSetImpl::RegularizerSetImpl(std::vector<RegularizerSpec> specs_in, int64_t d, int64_t n_classes)
    : specs(std::move(specs_in)), latent_dim(d) {
  std::set<RegKind> seen;
  for (const auto& s : specs) {
    s.validate();
    if (s.kind == RegKind::None) throw ConfigError("'none' cannot be combined into a regularizer set");
    if (!seen.insert(s.kind).second) throw ConfigError("regularizer '" + to_string(s.kind) + "' listed twice");
    switch (s.kind) {
      case RegKind::VQ: {
        if (d % s.codeword_dim != 0) {
          throw ConfigError("latent size " + std::to_string(d) + " is not divisible by codeword_dim " +
                            std::to_string(s.codeword_dim));
        }
        const double r = 1.0 / static_cast<double>(s.codebook_size);
        codebook = register_parameter("codebook", torch::empty({s.codebook_size, s.codeword_dim}).uniform_(-r, r));
        break;
      }
      case RegKind::Classification: {
        const int64_t out = s.head_dim > 0 ? s.head_dim : n_classes;
        if (out < 2) throw ConfigError("classification head needs >= 2 classes");
        heads.emplace(s.kind, register_module("head_classification", ProjectionHead(s.kind, d, out)));
        break;
      }
      case RegKind::Prototype:
        heads.emplace(s.kind,
                      register_module("head_prototype", ProjectionHead(s.kind, d, s.head_dim > 0 ? s.head_dim : d)));
        break;
      case RegKind::SimCLR:
        heads.emplace(s.kind,
                      register_module("head_simclr", ProjectionHead(s.kind, d, s.head_dim > 0 ? s.head_dim : 128)));
        break;
      case RegKind::Barlow:
        heads.emplace(s.kind,
                      register_module("head_barlow", ProjectionHead(s.kind, d, s.head_dim > 0 ? s.head_dim : 128)));
        break;
      default:
        break;
    }
  }
}

bool RegularizerSetImpl::has(RegKind kind) const { return find(kind) != nullptr; }

const RegularizerSpec* RegularizerSetImpl::find(RegKind kind) const {
  for (const auto& s : specs) {
    if (s.kind == kind) return &s;
  }
  return nullptr;
}

namespace {

const torch::Tensor& need(const torch::Tensor& t, RegKind kind, const char* field) {
  if (!t.defined()) {
    throw ConfigError("regularizer '" + to_string(kind) + "' needs '" + field + "' in its context");
  }
  return t;
}

}  // namespace

torch::Tensor RegularizerSetImpl::term(const RegularizerSpec& s, const RegContext& ctx) {
  switch (s.kind) {
    case RegKind::KL:
      if (!ctx.gaussian) throw ConfigError("regularizer 'kl' needs a Gaussian latent in its context");
      return kl_loss(*ctx.gaussian);
    case RegKind::VQ:
      return vq_loss(need(ctx.z, s.kind, "z"), need(ctx.z_q, s.kind, "z_q"));
    case RegKind::Classification:
      return classification_loss(need(ctx.z, s.kind, "z"), need(ctx.labels, s.kind, "labels"), heads.at(s.kind));
    case RegKind::Prototype:
      return prototype_loss(need(ctx.z, s.kind, "z"), need(ctx.z_y, s.kind, "z_y"),
                            need(ctx.labels, s.kind, "labels"), heads.at(s.kind));
    case RegKind::SimCLR:
      return simclr_loss(need(ctx.z_a, s.kind, "z_a"), need(ctx.z_b, s.kind, "z_b"), heads.at(s.kind),
                         s.temperature);
    case RegKind::Barlow:
      return barlow_loss(need(ctx.z_a, s.kind, "z_a"), need(ctx.z_b, s.kind, "z_b"), heads.at(s.kind), s.lambda);
    case RegKind::None:
      break;
  }
  throw ConfigError("cannot evaluate regularizer 'none'");
}

torch::Tensor compose_regularizers(RegularizerSet& set, const RegContext& ctx) {
  torch::Tensor total;
  for (const auto& s : set->specs) {
    auto t = s.beta * set->term(s, ctx);
    total = total.defined() ? total + t : t;
  }
  if (!total.defined()) {
    auto ref = ctx.z.defined() ? ctx.z : ctx.z_a;
    return torch::zeros({}, ref.defined() ? ref.options() : torch::TensorOptions());
  }
  return total;
}

}  // namespace oneshot
