// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <utility>
#include <vector>

#include "oneshot_ldm/augment.hpp"
#include "oneshot_ldm/checkpoint.hpp"
#include "oneshot_ldm/dataset.hpp"
#include "oneshot_ldm/regularizers.hpp"
#include "oneshot_ldm/rng.hpp"

namespace oneshot {

/// Multiply the learning rate by `factor` every `every` epochs (0: constant).
struct LrStep {
  int64_t every = 0;
  double factor = 1.0;

  double at(double base, int64_t epoch) const;
};

struct RAEConfig {
  int64_t latent_dim = 128;
  int64_t image_size = 48;
  std::vector<int64_t> widths{16, 32, 64, 128};
  int64_t epochs = 200;
  int64_t batch_size = 128;
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  LrStep lr_step;
  /// View augmentations for the contrastive regularizers.
  AugmentationConfig augmentation;

  void validate() const;
};

nlohmann::json to_json(const RAEConfig& config);
RAEConfig rae_config_from_json(const nlohmann::json& j);

/// Four strided conv + batch-norm + ReLU blocks (48 -> 24 -> 12 -> 7 -> 3)
/// and a linear map to `out_dim`. The autoencoder's encoder and the critics'
/// backbone.
struct ConvEncoderImpl : torch::nn::Module {
  ConvEncoderImpl(const std::vector<int64_t>& widths, int64_t out_dim);
  torch::Tensor forward(const torch::Tensor& x);

  std::vector<int64_t> widths;
  torch::nn::Sequential conv{nullptr};
  torch::nn::Linear fc{nullptr};
};
TORCH_MODULE(ConvEncoder);

/// Throws ShapeError unless x is [B, 1, size, size].
void check_image_batch(const torch::Tensor& x, int64_t size);

/// Encoder output. `z` is the code handed downstream: a reparametrized
/// sample (training) or the mean (evaluation) in kl mode, the continuous
/// pre-quantization code in vq mode.
struct LatentBatch {
  torch::Tensor z;
  std::optional<GaussianLatent> gaussian;
  torch::Tensor z_q;
  torch::Tensor indices;
};

/// Convolutional autoencoder for 48x48 single-channel drawings, with its
/// regularizer heads and codebook attached as submodules.
class RAEImpl : public torch::nn::Module {
 public:
  RAEImpl(RAEConfig config, std::vector<RegularizerSpec> specs, int64_t n_classes = 0);

  /// `rng` drives the reparametrized sample in kl mode while training; without
  /// it (or in eval mode) the mean is used.
  LatentBatch encode(const torch::Tensor& x, Rng* rng = nullptr);
  /// Deterministic code: the mean in kl mode.
  torch::Tensor code(const torch::Tensor& x);
  /// Quantizes first in vq mode, then runs the decoder. Output in (0, 1).
  torch::Tensor decode(const torch::Tensor& z);
  /// The decoder network alone.
  torch::Tensor decoder_forward(const torch::Tensor& z);
  /// Decoder output and its directional derivative along `dz`, in forward
  /// mode with batch-norm running statistics (evaluation semantics). In vq
  /// mode the primal is taken at the quantized point and the tangent passes
  /// the quantizer unchanged.
  std::pair<torch::Tensor, torch::Tensor> decode_jvp(const torch::Tensor& z, const torch::Tensor& dz);

  const RAEConfig& config() const { return config_; }
  int64_t latent_dim() const { return config_.latent_dim; }
  bool gaussian() const { return regs->has(RegKind::KL); }
  bool quantized() const { return regs->has(RegKind::VQ); }
  int64_t n_classes() const { return n_classes_; }

  RegularizerSet regs{nullptr};

 private:
  std::pair<torch::Tensor, torch::Tensor> decoder_pass(const torch::Tensor& z, const torch::Tensor* dz,
                                                       bool running_stats);

  RAEConfig config_;
  int64_t n_classes_;
  ConvEncoder encoder{nullptr};
  std::vector<torch::nn::ConvTranspose2d> dec_up;
  std::vector<torch::nn::BatchNorm2d> dec_bn;
  torch::nn::Conv2d dec_out{nullptr};
};
TORCH_MODULE(RAE);

/// Re-draws every weight fan-in-scaled uniform from `rng` (biases use their
/// weight's fan-in; codebooks +-1/K). Norm layers keep their unit/zero init.
void seeded_init(torch::nn::Module& module, Rng& rng);

RAE make_rae(const RAEConfig& config, const std::vector<RegularizerSpec>& specs, int64_t n_classes, Rng& rng);

struct RAEStepResult {
  double total = 0.0;
  double recon = 0.0;
  double reg = 0.0;
};

/// Reconstruction MSE plus the weighted regularizers, without an update.
/// Returns (total, recon, reg) as graph-attached tensors.
std::tuple<torch::Tensor, torch::Tensor, torch::Tensor> rae_loss(RAE& model, const Batch& batch, Rng& rng);

/// One optimizer update on `batch`. Throws TrainingError on a non-finite loss.
RAEStepResult rae_step(RAE& model, const Batch& batch, torch::optim::Optimizer& optimizer, Rng& rng);

struct EpochStats {
  int64_t epoch = 0;
  double total = 0.0;
  double recon = 0.0;
  double reg = 0.0;
  double first_recon = 0.0;
  double last_recon = 0.0;
  double learning_rate = 0.0;
};

struct TrainOptions {
  /// Written at the end of every `checkpoint_every` epochs and at the end.
  std::optional<std::filesystem::path> checkpoint;
  int64_t checkpoint_every = 1;
  /// Continue from this checkpoint's epoch, optimizer and RNG state.
  std::optional<std::filesystem::path> resume;
  /// Stop after this many epochs in this call (0: run to config.epochs).
  int64_t max_epochs_this_call = 0;
  std::function<void(const EpochStats&)> on_epoch;
};

struct RAETrainResult {
  RAE model{nullptr};
  std::vector<EpochStats> log;
};

RAETrainResult train_rae(const DatasetSplit& train, const RAEConfig& config, const std::vector<RegularizerSpec>& specs,
                         uint64_t seed, const TrainOptions& options = {});

std::unique_ptr<torch::optim::Adam> make_rae_optimizer(RAE& model, const RAEConfig& config);

/// Section tag "rae".
CheckpointSection& save_rae(Checkpoint& ckpt, RAE& model, torch::optim::Optimizer* optimizer = nullptr,
                            const Rng* rng = nullptr, int64_t epoch = 0);
/// Rebuilds the model stored under "rae", in eval mode.
RAE load_rae(const Checkpoint& ckpt);

}  // namespace oneshot
