// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <nlohmann/json.hpp>
#include <vector>

namespace oneshot {

struct UNetConfig {
  int64_t latent_dim = 128;
  /// Level widths, widest first. Empty: {16d, 8d, 4d, 2d}.
  std::vector<int64_t> widths;
  int64_t time_dim = 128;
  /// Width of the q/k/v projections inside each attention residual.
  int64_t attn_dim = 128;

  std::vector<int64_t> resolved_widths() const;
  void validate() const;
};

nlohmann::json to_json(const UNetConfig& config);
UNetConfig unet_config_from_json(const nlohmann::json& j, int64_t latent_dim);

/// Linear -> GroupNorm -> optional (scale + 1, shift) -> SiLU.
struct BlockMLPImpl : torch::nn::Module {
  BlockMLPImpl(int64_t in, int64_t out);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& scale = {}, const torch::Tensor& shift = {});

  torch::nn::Linear proj{nullptr};
  torch::nn::GroupNorm norm{nullptr};
};
TORCH_MODULE(BlockMLP);

struct ResnetBlockImpl : torch::nn::Module {
  ResnetBlockImpl(int64_t in, int64_t out, int64_t time_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

  torch::nn::Linear time_proj{nullptr};
  BlockMLP block1{nullptr};
  BlockMLP block2{nullptr};
  torch::nn::Linear res{nullptr};
};
TORCH_MODULE(ResnetBlock);

/// x / ||x|| * sqrt(C) * g over the feature axis.
struct RMSNormImpl : torch::nn::Module {
  explicit RMSNormImpl(int64_t dim);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor g;
  double scale;
};
TORCH_MODULE(RMSNorm);

/// Single-head attention over the attn_dim scalar entries of the projected
/// feature vector, followed by an output projection and RMSNorm.
struct FeatureAttentionImpl : torch::nn::Module {
  FeatureAttentionImpl(int64_t dim, int64_t attn_dim);
  torch::Tensor forward(const torch::Tensor& x);

  int64_t attn_dim;
  torch::nn::Linear to_qkv{nullptr};
  torch::nn::Linear to_out{nullptr};
  RMSNorm out_norm{nullptr};
};
TORCH_MODULE(FeatureAttention);

/// x + attention(RMSNorm(x)).
struct AttnResidualImpl : torch::nn::Module {
  AttnResidualImpl(int64_t dim, int64_t attn_dim);
  torch::Tensor forward(const torch::Tensor& x);

  RMSNorm norm{nullptr};
  FeatureAttention attn{nullptr};
};
TORCH_MODULE(AttnResidual);

/// Two resnet blocks, an attention residual and a width-changing linear.
struct UNetLevelImpl : torch::nn::Module {
  /// `block_in` is the resnet input width (grown by the skip width on the way up).
  UNetLevelImpl(int64_t block_in, int64_t width, int64_t out, int64_t time_dim, int64_t attn_dim);

  ResnetBlock rb1{nullptr};
  ResnetBlock rb2{nullptr};
  AttnResidual attn{nullptr};
  torch::nn::Linear resize{nullptr};
};
TORCH_MODULE(UNetLevel);

torch::Tensor sinusoidal_embedding(const torch::Tensor& t, int64_t dim);

/// eps_psi(z_t, z_y, t): 1-D U-Net over latent vectors, conditioned by
/// concatenating z_y to z_t at the input and by scale-shift time embedding.
class UNetImpl : public torch::nn::Module {
 public:
  explicit UNetImpl(UNetConfig config);
  /// z_t, z_y: [B, d]; t: [B] steps (any numeric dtype).
  torch::Tensor forward(const torch::Tensor& z_t, const torch::Tensor& z_y, const torch::Tensor& t);

  const UNetConfig& config() const { return config_; }

  torch::nn::Sequential time_mlp{nullptr};
  torch::nn::Linear init{nullptr};
  std::vector<UNetLevel> downs;
  ResnetBlock mid1{nullptr};
  AttnResidual mid_attn{nullptr};
  ResnetBlock mid2{nullptr};
  std::vector<UNetLevel> ups;
  ResnetBlock final_block{nullptr};
  torch::nn::Linear final_proj{nullptr};

 private:
  UNetConfig config_;
};
TORCH_MODULE(UNet);

int64_t parameter_count(const torch::nn::Module& module);

}  // namespace oneshot
