// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace oneshot {

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

/// One tagged block of a checkpoint file ("rae", "ldm", "critic-classifier", ...).
struct CheckpointSection {
  std::string tag;
  nlohmann::json config;
  int64_t epoch = 0;
  std::vector<uint8_t> rng_state;
  NamedTensors parameters;
  NamedTensors optimizer;

  const torch::Tensor& parameter(const std::string& name) const;
};

/// Versioned binary container:
///
///   "OSLDMCKP" | u32 version | u32 n_sections | section* | u32 crc32(all previous bytes)
///   section  = str tag | str config-json | i64 epoch | blob rng | tensors params | tensors optim
///   tensors  = u32 count | (str name | u8 dtype | u32 ndim | i64 dims[ndim] | raw LE data)*
///
/// Writing is byte-deterministic: the same sections always serialize to the
/// same bytes, so save -> load -> save round-trips exactly.
struct Checkpoint {
  static constexpr uint32_t kVersion = 1;

  std::vector<CheckpointSection> sections;

  CheckpointSection& add(std::string tag);
  const CheckpointSection& section(const std::string& tag) const;
  CheckpointSection& section(const std::string& tag);
  bool has(const std::string& tag) const;

  std::vector<uint8_t> serialize() const;
  static Checkpoint deserialize(const std::vector<uint8_t>& bytes, const std::string& origin = "<memory>");

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

/// Copies a module's parameters and buffers (in registration order).
NamedTensors module_state(const torch::nn::Module& module);
/// Restores what module_state captured; names and shapes must match.
void load_module_state(torch::nn::Module& module, const NamedTensors& state, const std::string& prefix = "");

/// Adam/AdamW moment buffers keyed by parameter name.
NamedTensors adam_state(torch::optim::Optimizer& optimizer, const torch::nn::Module& module);
void load_adam_state(torch::optim::Optimizer& optimizer, const torch::nn::Module& module,
                     const NamedTensors& state);

}  // namespace oneshot
