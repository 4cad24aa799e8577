// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <functional>
#include <utility>

#include "oneshot_ldm/diffusion.hpp"
#include "oneshot_ldm/rae.hpp"
#include "oneshot_ldm/rng.hpp"
#include "oneshot_ldm/schedule.hpp"

namespace oneshot {

enum class MapNormalization { Raw, UnitMax };

struct ImportanceMap {
  torch::Tensor values;  // [1, H, W], >= 0
  int64_t category_id = -1;
  int64_t n_averaged = 1;
  MapNormalization normalization = MapNormalization::Raw;
  /// Set for vq autoencoders, whose maps are computed at the quantized point.
  bool flagged = false;
};

/// Copy scaled so the maximum is 1 (unchanged if identically zero).
ImportanceMap unit_max(const ImportanceMap& map);

/// Decoder value and directional derivative: (z [B, d], dz [B, d]) -> ([B, 1, H, W], [B, 1, H, W]).
using DecoderJvp = std::function<std::pair<torch::Tensor, torch::Tensor>(const torch::Tensor&, const torch::Tensor&)>;

DecoderJvp decoder_jvp(RAE& rae);
/// Stub decoder x = z reshaped to [1, H, W] (d = H * W).
DecoderJvp identity_decoder(int64_t height, int64_t width);
/// Stub decoder x = W z reshaped to [1, H, W], W of shape [H * W, d].
DecoderJvp linear_decoder(const torch::Tensor& weight, int64_t height, int64_t width);

/// Score -eps_hat / sqrt(1 - abar_t) at step t.
torch::Tensor score_from_eps(const torch::Tensor& eps_hat, int64_t t, const DiffusionSchedule& schedule);

/// |J_decode(z_t) s| with s the guided score at (z_t, t); z_t is [1, d] or [d].
torch::Tensor local_importance(const DecoderJvp& decoder, const Predictor& predictor, const torch::Tensor& z_t,
                               const torch::Tensor& z_y, int64_t t, const DiffusionSchedule& schedule,
                               double gamma = 1.0);

/// The same term for an explicit direction.
torch::Tensor local_importance_along(const DecoderJvp& decoder, const torch::Tensor& z_t,
                                     const torch::Tensor& direction);

/// Sum of local importance over every state of one guided reverse trajectory
/// conditioned on z_y, from t = T down to t = 1.
ImportanceMap importance_map(const DecoderJvp& decoder, const Predictor& predictor, const torch::Tensor& z_y,
                             const DiffusionSchedule& schedule, double gamma, Rng& rng);

/// Encodes the exemplar and runs importance_map.
ImportanceMap importance_map(RAE& rae, const Predictor& predictor, const torch::Tensor& exemplar,
                             const DiffusionSchedule& schedule, double gamma, Rng& rng);

/// Mean of n independent importance maps for one exemplar.
ImportanceMap category_importance(RAE& rae, const Predictor& predictor, const torch::Tensor& exemplar,
                                  int64_t n_variations, const DiffusionSchedule& schedule, double gamma, Rng& rng);

}  // namespace oneshot
