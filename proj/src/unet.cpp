// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#include "oneshot_ldm/unet.hpp"

#include <cmath>
#include <numeric>

#include "oneshot_ldm/errors.hpp"

namespace oneshot {

namespace nn = torch::nn;

std::vector<int64_t> UNetConfig::resolved_widths() const {
  if (!widths.empty()) return widths;
  const int64_t d = latent_dim;
  return {16 * d, 8 * d, 4 * d, 2 * d};
}

void UNetConfig::validate() const {
  if (latent_dim < 1) throw ConfigError("unet latent_dim must be >= 1");
  const auto w = resolved_widths();
  if (w.size() < 2) throw ConfigError("unet needs at least 2 level widths");
  for (auto v : w) {
    if (v < 1) throw ConfigError("unet widths must be positive");
  }
  if (time_dim < 2 || time_dim % 2 != 0) throw ConfigError("unet time_dim must be even and >= 2");
  if (attn_dim < 1) throw ConfigError("unet attn_dim must be >= 1");
}

nlohmann::json to_json(const UNetConfig& c) {
  return {{"latent_dim", c.latent_dim}, {"widths", c.widths}, {"time_dim", c.time_dim}, {"attn_dim", c.attn_dim}};
}

UNetConfig unet_config_from_json(const nlohmann::json& j, int64_t latent_dim) {
  UNetConfig c;
  c.latent_dim = latent_dim;
  try {
    c.widths = j.value("widths", c.widths);
    c.time_dim = j.value("time_dim", c.time_dim);
    c.attn_dim = j.value("attn_dim", c.attn_dim);
    if (j.contains("latent_dim") && j["latent_dim"].get<int64_t>() != latent_dim) {
      throw ConfigError("unet latent_dim " + std::to_string(j["latent_dim"].get<int64_t>()) +
                        " does not match the autoencoder's " + std::to_string(latent_dim));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("unet config: ") + e.what());
  }
  c.validate();
  return c;
}

BlockMLPImpl::BlockMLPImpl(int64_t in, int64_t out) {
  proj = register_module("proj", nn::Linear(in, out));
  // Up to 8 groups, but never a single channel per group (that output would be constant).
  int64_t groups = std::gcd<int64_t>(8, out);
  while (groups > 1 && out / groups < 2) groups /= 2;
  norm = register_module("norm", nn::GroupNorm(nn::GroupNormOptions(groups, out)));
}

torch::Tensor BlockMLPImpl::forward(const torch::Tensor& x, const torch::Tensor& scale, const torch::Tensor& shift) {
  auto h = norm->forward(proj->forward(x));
  if (scale.defined()) h = h * (scale + 1.0) + shift;
  return torch::silu(h);
}

ResnetBlockImpl::ResnetBlockImpl(int64_t in, int64_t out, int64_t time_dim) {
  time_proj = register_module("time_proj", nn::Linear(time_dim, 2 * out));
  block1 = register_module("block1", BlockMLP(in, out));
  block2 = register_module("block2", BlockMLP(out, out));
  if (in != out) res = register_module("res", nn::Linear(in, out));
}

torch::Tensor ResnetBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto ss = time_proj->forward(torch::silu(temb)).chunk(2, 1);
  auto h = block1->forward(x, ss[0], ss[1]);
  h = block2->forward(h);
  return h + (res ? res->forward(x) : x);
}

RMSNormImpl::RMSNormImpl(int64_t dim) : scale(std::sqrt(static_cast<double>(dim))) {
  g = register_parameter("g", torch::ones({dim}));
}

torch::Tensor RMSNormImpl::forward(const torch::Tensor& x) {
  return torch::nn::functional::normalize(x, torch::nn::functional::NormalizeFuncOptions().dim(1)) * g * scale;
}

FeatureAttentionImpl::FeatureAttentionImpl(int64_t dim, int64_t h) : attn_dim(h) {
  to_qkv = register_module("to_qkv", nn::Linear(nn::LinearOptions(dim, 3 * h).bias(false)));
  to_out = register_module("to_out", nn::Linear(h, dim));
  out_norm = register_module("out_norm", RMSNorm(dim));
}

torch::Tensor FeatureAttentionImpl::forward(const torch::Tensor& x) {
  auto qkv = to_qkv->forward(x).chunk(3, 1);
  const double scale = 1.0 / std::sqrt(static_cast<double>(attn_dim));
  // Each of the attn_dim entries is a one-dimensional token.
  auto sim = qkv[0].unsqueeze(2) * qkv[1].unsqueeze(1) * scale;  // [B, h, h]
  auto out = torch::bmm(torch::softmax(sim, 2), qkv[2].unsqueeze(2)).squeeze(2);
  return out_norm->forward(to_out->forward(out));
}

AttnResidualImpl::AttnResidualImpl(int64_t dim, int64_t h) {
  norm = register_module("norm", RMSNorm(dim));
  attn = register_module("attn", FeatureAttention(dim, h));
}

torch::Tensor AttnResidualImpl::forward(const torch::Tensor& x) { return x + attn->forward(norm->forward(x)); }

UNetLevelImpl::UNetLevelImpl(int64_t block_in, int64_t width, int64_t out, int64_t time_dim, int64_t h) {
  rb1 = register_module("rb1", ResnetBlock(block_in, width, time_dim));
  rb2 = register_module("rb2", ResnetBlock(block_in, width, time_dim));
  attn = register_module("attn", AttnResidual(width, h));
  resize = register_module("resize", nn::Linear(width, out));
}

torch::Tensor sinusoidal_embedding(const torch::Tensor& t, int64_t dim) {
  const int64_t half = dim / 2;
  const double step = std::log(10000.0) / static_cast<double>(std::max<int64_t>(1, half - 1));
  auto freqs = torch::exp(torch::arange(half, torch::kFloat64) * -step);
  auto args = t.to(torch::kFloat64).reshape({-1, 1}) * freqs.unsqueeze(0);
  return torch::cat({args.sin(), args.cos()}, 1);
}

UNetImpl::UNetImpl(UNetConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto w = config_.resolved_widths();
  const int64_t d = config_.latent_dim, td = config_.time_dim, h = config_.attn_dim;
  time_mlp = register_module(
      "time_mlp", nn::Sequential(nn::Linear(td, td), nn::Functional(torch::gelu, "none"), nn::Linear(td, td)));
  init = register_module("init", nn::Linear(2 * d, w[0]));
  const size_t levels = w.size() - 1;
  for (size_t i = 0; i < levels; ++i) {
    downs.push_back(register_module("down" + std::to_string(i), UNetLevel(w[i], w[i], w[i + 1], td, h)));
  }
  const int64_t bottom = w.back();
  mid1 = register_module("mid1", ResnetBlock(bottom, bottom, td));
  mid_attn = register_module("mid_attn", AttnResidual(bottom, h));
  mid2 = register_module("mid2", ResnetBlock(bottom, bottom, td));
  for (size_t k = 0; k < levels; ++k) {
    const size_t i = levels - 1 - k;
    // Input width w[i+1] plus a skip of width w[i].
    ups.push_back(register_module("up" + std::to_string(k), UNetLevel(w[i + 1] + w[i], w[i + 1], w[i], td, h)));
  }
  final_block = register_module("final_block", ResnetBlock(2 * w[0], w[0], td));
  final_proj = register_module("final_proj", nn::Linear(w[0], d));
}

torch::Tensor UNetImpl::forward(const torch::Tensor& z_t, const torch::Tensor& z_y, const torch::Tensor& t) {
  const int64_t d = config_.latent_dim;
  if (z_t.dim() != 2 || z_t.size(1) != d || z_y.sizes() != z_t.sizes()) {
    throw ShapeError("unet expects z_t and z_y of shape [B, " + std::to_string(d) + "]");
  }
  auto temb = time_mlp->forward(sinusoidal_embedding(t, config_.time_dim).to(z_t.scalar_type()));
  auto x = init->forward(torch::cat({z_t, z_y}, 1));
  const auto r = x;
  std::vector<torch::Tensor> skips;
  for (auto& lvl : downs) {
    x = lvl->rb1->forward(x, temb);
    skips.push_back(x);
    x = lvl->rb2->forward(x, temb);
    skips.push_back(x);
    x = lvl->attn->forward(x);
    x = lvl->resize->forward(x);
  }
  x = mid1->forward(x, temb);
  x = mid_attn->forward(x);
  x = mid2->forward(x, temb);
  for (auto& lvl : ups) {
    x = lvl->rb1->forward(torch::cat({x, skips.back()}, 1), temb);
    skips.pop_back();
    x = lvl->rb2->forward(torch::cat({x, skips.back()}, 1), temb);
    skips.pop_back();
    x = lvl->attn->forward(x);
    x = lvl->resize->forward(x);
  }
  x = final_block->forward(torch::cat({x, r}, 1), temb);
  return final_proj->forward(x);
}

int64_t parameter_count(const torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters(true)) n += p.numel();
  return n;
}

}  // namespace oneshot
