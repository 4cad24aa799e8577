// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "oneshot_ldm/dataset.hpp"

namespace oneshot {

/// Procedural stroke glyphs: each category is a handful of Bezier strokes,
/// each sample a jittered, slightly transformed redraw of them. Small enough
/// to train on in seconds; used by the tests and the demo configs.
struct SyntheticOptions {
  int64_t train_categories = 20;
  int64_t test_categories = 5;
  int64_t samples_per_category = 12;
  int64_t image_size = 48;
  /// Control-point jitter as a fraction of the image size.
  double jitter = 0.04;
  double stroke_width = 1.6;
  /// If > 0, categories are dealt round-robin into this many named groups.
  int64_t groups = 0;
  uint64_t seed = 0;
};

std::vector<CategoryRecord> make_synthetic_categories(const SyntheticOptions& options);

/// Writes a synthetic dataset in the on-disk layout; returns the category count.
size_t write_synthetic_dataset(const std::filesystem::path& root, DatasetName name,
                               const SyntheticOptions& options);

}  // namespace oneshot
