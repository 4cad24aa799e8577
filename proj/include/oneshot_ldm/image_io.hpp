// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <filesystem>

namespace oneshot {

/// Reads an 8-bit (or lower bit-depth) PNG as a [1, H, W] float32 tensor in [0, 1].
/// Colour images are converted to luminance. Missing files raise IoError,
/// undecodable ones ParseError.
torch::Tensor read_png_gray(const std::filesystem::path& path);

/// Writes a [1, H, W] or [H, W] image with values in [0, 1] as 8-bit grayscale.
void write_png_gray(const std::filesystem::path& path, const torch::Tensor& image);

/// Writes a [3, H, W] image (uint8, or float in [0, 1]) as 8-bit RGB.
void write_png_rgb(const std::filesystem::path& path, const torch::Tensor& image);

/// NumPy .npy (format 1.0, little-endian float32/float64, C order).
void write_npy(const std::filesystem::path& path, const torch::Tensor& array);
torch::Tensor read_npy(const std::filesystem::path& path);

}  // namespace oneshot
