// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <nlohmann/json.hpp>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace oneshot {

enum class RegKind { None, KL, VQ, Classification, Prototype, SimCLR, Barlow };

RegKind parse_reg_kind(const std::string& s);
std::string to_string(RegKind kind);

/// Mean and log-variance of a diagonal Gaussian code, each [B, d].
struct GaussianLatent {
  torch::Tensor mean;
  torch::Tensor log_variance;

  /// mean + exp(log_variance / 2) * eps.
  torch::Tensor reparametrize(const torch::Tensor& eps) const;
};

/// Batch mean of KL(N(mean, diag var) || N(0, I)).
torch::Tensor kl_loss(const GaussianLatent& latent);

struct Quantized {
  torch::Tensor z_q;      // [B, d]
  torch::Tensor indices;  // [B, d / s], int64
};

/// Splits each row of z into d/s chunks and snaps every chunk to its nearest
/// codebook row ([K, s]). Ties go to the lowest row index. Gradients reach the
/// codebook through z_q, not z.
Quantized quantize(const torch::Tensor& z, const torch::Tensor& codebook);

/// ||sg[z_q] - z||^2 + ||z_q - sg[z]||^2, summed over features, batch mean.
torch::Tensor vq_loss(const torch::Tensor& z, const torch::Tensor& z_q);

/// z + sg[z_q - z]: forward value z_q, identity Jacobian w.r.t. z.
torch::Tensor straight_through(const torch::Tensor& z, const torch::Tensor& z_q);

/// Batch-mean cross entropy; labels must lie in [0, n_classes).
torch::Tensor label_cross_entropy(const torch::Tensor& logits, const torch::Tensor& labels);

/// Softmax over negated Euclidean distances between each embedding and the
/// batch's distinct prototypes (first occurrence of each label). Returns
/// [B, P] probabilities and, through `prototype_index`, each row's target column.
torch::Tensor prototype_probabilities(const torch::Tensor& embedded, const torch::Tensor& embedded_exemplars,
                                      const torch::Tensor& labels, torch::Tensor* prototype_index = nullptr);

/// Batch mean of -log p(own prototype) for already projected embeddings.
torch::Tensor prototype_nll(const torch::Tensor& embedded, const torch::Tensor& embedded_exemplars,
                            const torch::Tensor& labels);

/// Per-sample -sim(a_b, b_b)/tau + log sum_{b' != b} exp(sim(a_b, b_b')/tau),
/// cosine similarity, batch mean. Negatives come from the other view only.
torch::Tensor info_nce(const torch::Tensor& h_a, const torch::Tensor& h_b, double temperature = 1.0);

/// Correlation matrix between the features of two views, each feature
/// standardized over the batch. [B, k] x [B, k] -> [k, k].
torch::Tensor cross_correlation(const torch::Tensor& h_a, const torch::Tensor& h_b);

/// sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2.
torch::Tensor barlow_from_correlation(const torch::Tensor& c, double lambda);

torch::Tensor barlow_from_embeddings(const torch::Tensor& h_a, const torch::Tensor& h_b, double lambda);

/// Linear probe stacked on the latent code. Only the classification head has a bias.
struct ProjectionHeadImpl : torch::nn::Module {
  ProjectionHeadImpl(RegKind kind, int64_t in_dim, int64_t out_dim);
  torch::Tensor forward(const torch::Tensor& z);

  RegKind kind;
  torch::nn::Linear linear{nullptr};
};
TORCH_MODULE(ProjectionHead);

torch::Tensor classification_loss(const torch::Tensor& z, const torch::Tensor& labels, ProjectionHead& head);
torch::Tensor prototype_loss(const torch::Tensor& z, const torch::Tensor& z_y, const torch::Tensor& labels,
                             ProjectionHead& head);
torch::Tensor simclr_loss(const torch::Tensor& z_a, const torch::Tensor& z_b, ProjectionHead& head,
                          double temperature = 1.0);
torch::Tensor barlow_loss(const torch::Tensor& z_a, const torch::Tensor& z_b, ProjectionHead& head,
                          double lambda = 5e-3);

struct RegularizerSpec {
  RegKind kind = RegKind::None;
  double beta = 0.0;
  /// vq: codebook rows and codeword width.
  int64_t codebook_size = 512;
  int64_t codeword_dim = 8;
  /// barlow off-diagonal weight.
  double lambda = 5e-3;
  /// simclr softmax temperature.
  double temperature = 1.0;
  /// Projection width; 0 picks the kind's default (classes, d, or 128).
  int64_t head_dim = 0;

  void validate() const;
};

nlohmann::json to_json(const RegularizerSpec& spec);
RegularizerSpec regularizer_from_json(const nlohmann::json& j);
std::vector<RegularizerSpec> regularizers_from_json(const nlohmann::json& j);

/// Whatever a batch can offer the regularizers. Fields an active spec needs
/// must be defined; compose_regularizers raises ConfigError otherwise.
struct RegContext {
  /// Continuous code before quantization (view A for contrastive specs).
  torch::Tensor z;
  std::optional<GaussianLatent> gaussian;
  torch::Tensor z_q;
  torch::Tensor labels;
  /// Encoded exemplars aligned with labels.
  torch::Tensor z_y;
  torch::Tensor z_a;
  torch::Tensor z_b;
};

/// The trainable side of a spec list: heads and an optional codebook.
struct RegularizerSetImpl : torch::nn::Module {
  /// `n_classes` sizes the classification head.
  RegularizerSetImpl(std::vector<RegularizerSpec> specs, int64_t latent_dim, int64_t n_classes = 0);

  bool has(RegKind kind) const;
  const RegularizerSpec* find(RegKind kind) const;
  bool needs_views() const { return has(RegKind::SimCLR) || has(RegKind::Barlow); }

  /// Unweighted loss of one active spec.
  torch::Tensor term(const RegularizerSpec& spec, const RegContext& ctx);

  std::vector<RegularizerSpec> specs;
  int64_t latent_dim;
  torch::Tensor codebook;
  std::map<RegKind, ProjectionHead> heads;
};
TORCH_MODULE(RegularizerSet);

/// Sum of beta_k * L_k over the set's specs; zero for an empty set.
torch::Tensor compose_regularizers(RegularizerSet& set, const RegContext& ctx);

}  // namespace oneshot
