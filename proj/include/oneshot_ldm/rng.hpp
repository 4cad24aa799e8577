// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string_view>
#include <vector>

namespace oneshot {

/// Seeded random source. Wraps a CPU torch generator so tensor draws and
/// scalar draws come from one reproducible stream whose state can be saved.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0);
  // Copies clone the generator; torch::Generator alone would share state.
  Rng(const Rng& other);
  Rng& operator=(const Rng& other);
  Rng(Rng&&) noexcept = default;
  Rng& operator=(Rng&&) noexcept = default;

  uint64_t seed() const { return seed_; }
  torch::Generator& generator() { return gen_; }

  double uniform(double lo, double hi);
  /// Integer in [lo, hi] inclusive.
  int64_t randint(int64_t lo, int64_t hi);
  bool bernoulli(double p);

  torch::Tensor normal(at::IntArrayRef shape, torch::ScalarType dtype = torch::kFloat32);
  torch::Tensor uniform_tensor(at::IntArrayRef shape, torch::ScalarType dtype = torch::kFloat32);
  /// Integers uniform in [lo, hi] inclusive, int64.
  torch::Tensor randint_tensor(int64_t lo, int64_t hi, at::IntArrayRef shape);
  std::vector<int64_t> permutation(int64_t n);

  /// Independent child stream; the parent advances by one draw.
  Rng fork();

  std::vector<uint8_t> state() const;
  void set_state(const std::vector<uint8_t>& bytes);

 private:
  uint64_t seed_;
  torch::Generator gen_;
};

/// splitmix64 finalizer.
uint64_t mix64(uint64_t x);

/// Reproducible per-point seed from a base seed, a weight and a tag.
uint64_t derive_seed(uint64_t base, double value, std::string_view tag);

}  // namespace oneshot
