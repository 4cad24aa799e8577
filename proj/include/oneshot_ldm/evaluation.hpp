// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "oneshot_ldm/augment.hpp"
#include "oneshot_ldm/dataset.hpp"
#include "oneshot_ldm/rae.hpp"
#include "oneshot_ldm/rng.hpp"
#include "oneshot_ldm/statistics.hpp"

namespace oneshot {

struct CriticConfig {
  std::vector<int64_t> widths{16, 32, 64, 128};
  int64_t embedding_dim = 64;
  int64_t classifier_epochs = 30;
  int64_t embedder_epochs = 30;
  int64_t batch_size = 64;
  double learning_rate = 1e-3;
  /// InfoNCE temperature of the embedder's training objective.
  double temperature = 0.5;
  int64_t projection_dim = 128;
  AugmentationConfig augmentation;
  /// One-shot accuracy the classifier must reach on held-out train categories.
  double gate_accuracy = 0.9;
  /// Ways per gate episode (0: all held-out categories at once).
  int64_t gate_n_way = 0;
  /// Fraction of train categories kept out of classifier training for the gate.
  double holdout_fraction = 0.2;

  void validate() const;
};

nlohmann::json to_json(const CriticConfig& config);
CriticConfig critic_config_from_json(const nlohmann::json& j);

/// A frozen embedding network.
struct Critic {
  ConvEncoder net{nullptr};
  std::string kind;

  /// [N, 1, 48, 48] -> [N, k], evaluation mode, no gradient.
  torch::Tensor embed(const torch::Tensor& images) const;
  Embedder embedder() const;
};

struct CriticReport {
  std::vector<double> classifier_loss;
  std::vector<double> embedder_loss;
  double gate_accuracy = 0.0;
  int64_t gate_n_way = 0;
};

struct Critics {
  /// Prototype-trained; classifies by nearest exemplar embedding.
  Critic classifier;
  /// Contrastively trained; defines the originality feature space.
  Critic embedder;
  CriticReport report;
};

/// Trains both critics on the train split only. Raises TrainingError (with
/// the loss curves in the message) if the classifier misses the gate.
Critics train_critics(const DatasetSplit& train, const CriticConfig& config, uint64_t seed);

/// One-shot accuracy of nearest-exemplar classification over `queries`
/// (labels index `exemplars`). n_way = 0 uses every exemplar.
double one_shot_accuracy(const Embedder& embed, const torch::Tensor& queries, const torch::Tensor& labels,
                         const torch::Tensor& exemplars, int64_t n_way = 0, Rng* rng = nullptr);

void save_critics(const Critics& critics, const std::filesystem::path& path);
Critics load_critics(const std::filesystem::path& path);

/// Generated (or human) images tagged with their conditioning category.
struct TaggedSamples {
  int64_t category_id = 0;
  torch::Tensor images;  // [n, 1, H, W]
};

using ExemplarSet = std::map<int64_t, torch::Tensor>;

ExemplarSet exemplar_set(const DatasetSplit& split);
/// The split's own variations as tagged samples (the human reference point).
std::vector<TaggedSamples> split_samples(const DatasetSplit& split);

/// Fraction of samples whose nearest exemplar (in the critic's space) is
/// their own. n_way > 0 draws episodes of the own exemplar plus n_way - 1 others.
double recognizability(const std::vector<TaggedSamples>& samples, const ExemplarSet& exemplars, const Embedder& critic,
                       int64_t n_way = 0, Rng* rng = nullptr);

/// Mean Euclidean feature distance between each sample and its exemplar.
double originality_raw(const std::vector<TaggedSamples>& samples, const ExemplarSet& exemplars,
                       const Embedder& embedder);

struct ModelPoint {
  std::string model_id;
  std::map<std::string, double> beta_map;
  double recognizability = 0.0;
  double originality_raw = 0.0;
  double originality = std::numeric_limits<double>::quiet_NaN();
};

/// Min-max rescales raw originality over the models and the human value.
/// Returns the human's normalized originality.
double normalize_originality(std::vector<ModelPoint>& points, double human_raw);

double distance_to_human(const ModelPoint& point, double human_originality, double human_recognizability);

struct FitCurve {
  Quadratic originality{};
  Quadratic recognizability{};
  /// Distinct betas, ascending; the curve runs in this direction.
  std::vector<double> beta_order;

  std::pair<double, double> at(double beta) const;
};

/// Degree-2 least-squares fits of originality and recognizability against
/// log10(beta), after averaging points that share a beta.
FitCurve fit_sweep(const std::vector<double>& betas, const std::vector<double>& originality,
                   const std::vector<double>& recognizability);

}  // namespace oneshot
