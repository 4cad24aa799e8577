// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <vector>

#include "oneshot_ldm/attribution.hpp"

namespace oneshot {

struct GridLayout {
  /// 0 picks a near-square layout (cols = ceil(sqrt(n))).
  int64_t rows = 0;
  int64_t cols = 0;
  int64_t padding = 2;
};

/// Exemplar row on top inside a red frame, then the variations row-major.
/// Returns [3, H, W] uint8. All images must be [1, h, w] with one shared size.
torch::Tensor render_grid_image(const std::vector<torch::Tensor>& images, const torch::Tensor& exemplar,
                                GridLayout layout = {});
void render_grid(const std::filesystem::path& path, const std::vector<torch::Tensor>& images,
                 const torch::Tensor& exemplar, GridLayout layout = {});

/// Piecewise-linear cold-to-hot colormap on [0, 1]:
/// blue (0) -> cyan (1/3) -> yellow (2/3) -> red (1).
std::array<double, 3> heat_color(double t);

/// Unit-max map through heat_color, alpha-blended (alpha = 0.6) over the
/// grayscale exemplar. Returns [3, H, W] uint8.
torch::Tensor render_overlay_image(const ImportanceMap& map, const torch::Tensor& exemplar, double alpha = 0.6);
void render_overlay(const std::filesystem::path& path, const ImportanceMap& map, const torch::Tensor& exemplar,
                    double alpha = 0.6);

}  // namespace oneshot
