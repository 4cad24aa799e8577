// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <gtest/gtest.h>
#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <string>

#include "oneshot_ldm/dataset.hpp"

namespace oneshot::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t");
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

/// Central-difference gradient of a scalar function of `x` (float64).
torch::Tensor numeric_gradient(const std::function<torch::Tensor(const torch::Tensor&)>& f, const torch::Tensor& x,
                               double h = 1e-6);

/// Analytic gradient of f at x via autograd.
torch::Tensor autograd_gradient(const std::function<torch::Tensor(const torch::Tensor&)>& f, const torch::Tensor& x);

/// max |a - b| / max(max |b|, floor).
double relative_error(const torch::Tensor& a, const torch::Tensor& b, double floor = 1e-12);

/// Byte contents of a file.
std::string read_file(const std::filesystem::path& path);

/// Random image batch [n, 1, size, size] in [0, 1].
torch::Tensor random_images(int64_t n, int64_t size, uint64_t seed);

/// In-memory split of synthetic stroke categories, exemplar chosen as on disk.
DatasetSplit synthetic_split(int64_t categories, int64_t samples, uint64_t seed);

}  // namespace oneshot::testing
