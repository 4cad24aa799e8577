// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <vector>

#include "oneshot_ldm/checkpoint.hpp"
#include "oneshot_ldm/dataset.hpp"
#include "oneshot_ldm/rae.hpp"
#include "oneshot_ldm/rng.hpp"
#include "oneshot_ldm/schedule.hpp"
#include "oneshot_ldm/unet.hpp"

namespace oneshot {

/// eps(z_t, z_y, t) with z_t, z_y [B, d] and t a [B] int64 step tensor.
using Predictor = std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&, const torch::Tensor&)>;

Predictor as_predictor(UNet& net);

struct GuidanceConfig {
  double gamma = 1.0;
  double cond_dropout_prob = 0.1;
};

/// The non-informative conditioning signal: zeros shaped like z_y.
torch::Tensor null_token_like(const torch::Tensor& z_y);

/// Batch mean of ||eps_hat - eps||^2 (summed over features) at uniformly drawn
/// steps, with z_y replaced by the null token with probability cond_dropout_prob.
torch::Tensor ddpm_loss(const Predictor& predictor, const torch::Tensor& z0, const torch::Tensor& z_y,
                        const DiffusionSchedule& schedule, const GuidanceConfig& guidance, Rng& rng);

/// (1 + gamma) eps(z_t, z_y, t) - gamma eps(z_t, null, t). The unconditional
/// pass is skipped at gamma = 0.
torch::Tensor guided_eps(const Predictor& predictor, const torch::Tensor& z_t, const torch::Tensor& z_y,
                         const torch::Tensor& t, double gamma);

/// (z_t - (1 - alpha_t) / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t).
torch::Tensor posterior_mean(const torch::Tensor& z_t, const torch::Tensor& eps_hat, int64_t t,
                             const DiffusionSchedule& schedule);

/// (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t).
torch::Tensor predict_z0(const torch::Tensor& z_t, const torch::Tensor& eps_hat, int64_t t,
                         const DiffusionSchedule& schedule);

/// One ancestral step t -> t-1 with sigma_t = sqrt(beta_tilde_t); no noise at t = 1.
torch::Tensor reverse_step(const Predictor& predictor, const torch::Tensor& z_t, const torch::Tensor& z_y, int64_t t,
                           const DiffusionSchedule& schedule, double gamma, Rng& rng);

/// Same step with the noise draw supplied (scaled by sigma_t inside).
torch::Tensor reverse_step_with_noise(const Predictor& predictor, const torch::Tensor& z_t, const torch::Tensor& z_y,
                                      int64_t t, const DiffusionSchedule& schedule, double gamma,
                                      const torch::Tensor& noise);

/// Called at every visited state before stepping, with the guided eps used.
using StepVisitor = std::function<void(const torch::Tensor& z_t, int64_t t, const torch::Tensor& eps_hat)>;

/// n samples from z_T ~ N(0, I) down to z_0, conditioned on z_y ([d] or [1, d],
/// or [n, d] for per-sample conditioning).
torch::Tensor sample_latents(const Predictor& predictor, const torch::Tensor& z_y, const DiffusionSchedule& schedule,
                             double gamma, int64_t n, Rng& rng, const StepVisitor& visit = {});

/// Encodes the exemplar ([1, H, W] or [1, 1, H, W]), samples n latents and decodes them.
torch::Tensor generate_variations(RAE& rae, const Predictor& predictor, int64_t predictor_dim,
                                  const torch::Tensor& exemplar, int64_t n, double gamma,
                                  const DiffusionSchedule& schedule, Rng& rng);

struct LDMConfig {
  UNetConfig unet;
  int64_t steps = 1000;
  double beta_start = 1.5e-3;
  double beta_end = 1.95e-2;
  int64_t epochs = 1000;
  int64_t batch_size = 128;
  double learning_rate = 1e-4;
  double weight_decay = 1e-2;
  LrStep lr_step{200, 0.1};
  GuidanceConfig guidance;

  DiffusionSchedule schedule() const { return build_schedule(steps, beta_start, beta_end); }
  void validate() const;
};

nlohmann::json to_json(const LDMConfig& config);
LDMConfig ldm_config_from_json(const nlohmann::json& j, int64_t latent_dim);

/// Frozen-encoder codes of every variation and the matching exemplar codes.
struct LatentDataset {
  torch::Tensor z0;   // [N, d]
  torch::Tensor z_y;  // [N, d]
};

LatentDataset encode_split(RAE& rae, const DatasetSplit& split, int64_t chunk = 256);

struct LDMTrainResult {
  UNet model{nullptr};
  std::vector<double> epoch_loss;
};

struct LDMTrainOptions {
  std::optional<std::filesystem::path> checkpoint;
  int64_t checkpoint_every = 1;
  std::optional<std::filesystem::path> resume;
  int64_t max_epochs_this_call = 0;
  std::function<void(int64_t epoch, double loss)> on_epoch;
  /// Extra sections (such as the frozen autoencoder) copied into checkpoints.
  std::vector<CheckpointSection> extra_sections;
};

/// Trains the noise predictor on fixed latents. The autoencoder that produced
/// them is never touched.
LDMTrainResult train_ldm(const LatentDataset& data, const LDMConfig& config, uint64_t seed,
                         const LDMTrainOptions& options = {});

std::unique_ptr<torch::optim::AdamW> make_ldm_optimizer(UNet& model, const LDMConfig& config);

/// Section tag "ldm".
CheckpointSection& save_ldm(Checkpoint& ckpt, UNet& model, const LDMConfig& config,
                            torch::optim::Optimizer* optimizer = nullptr, const Rng* rng = nullptr, int64_t epoch = 0);

struct LoadedLDM {
  UNet model{nullptr};
  LDMConfig config;
};

LoadedLDM load_ldm(const Checkpoint& ckpt);

}  // namespace oneshot
