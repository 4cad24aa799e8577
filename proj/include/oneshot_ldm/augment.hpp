// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <array>
#include <nlohmann/json.hpp>

#include "oneshot_ldm/rng.hpp"

namespace oneshot {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Parameter ranges for the view augmentations used by the contrastive
/// regularizers and the embedding critic. Defaults are the training recipe.
struct AugmentationConfig {
  Interval crop_scale{0.1, 0.9};
  Interval crop_ratio{0.8, 1.2};
  Interval rotation_deg{-15.0, 15.0};
  Interval translate_px{-5.0, 5.0};
  Interval zoom_ratio{0.75, 1.25};
  Interval shear_deg{-10.0, 10.0};
  double perspective_distortion = 0.5;
  double perspective_prob = 0.5;

  /// Every transform collapsed to the identity.
  static AugmentationConfig identity();
  /// Throws ConfigError on empty intervals or out-of-range probabilities.
  void validate() const;
};

nlohmann::json to_json(const AugmentationConfig& config);
AugmentationConfig augmentation_from_json(const nlohmann::json& j);

enum class AugmentKind { ResizedCrop, Affine, Perspective };

/// Row-major 3x3 map from output pixel coordinates to source coordinates.
using Homography = std::array<double, 9>;

/// Samples `image` ([1, H, W] or [H, W]) at `map(p)` for every output pixel p,
/// bilinear, zero outside the source. Coordinates within 1e-9 of an integer
/// are snapped so the identity map reproduces the input exactly.
torch::Tensor warp(const torch::Tensor& image, const Homography& map);

/// Draws one transformation (uniformly among resized crop, affine and
/// perspective) and applies it. Output keeps the input shape and stays in [0, 1].
torch::Tensor augment(const torch::Tensor& image, const AugmentationConfig& config, Rng& rng);

/// Independently augments each image of a [B, 1, H, W] batch.
torch::Tensor augment_batch(const torch::Tensor& images, const AugmentationConfig& config, Rng& rng);

/// The map `augment` would use for a given kind; exposed for tests.
Homography sample_homography(AugmentKind kind, int64_t height, int64_t width,
                             const AugmentationConfig& config, Rng& rng);

}  // namespace oneshot
