// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#include "oneshot_ldm/schedule.hpp"

#include <cmath>
#include <string>

#include "oneshot_ldm/errors.hpp"

namespace oneshot {

void DiffusionSchedule::check_step(int64_t t) const {
  if (t < 1 || t > T) {
    throw ValidationError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
  }
}

size_t DiffusionSchedule::idx(int64_t t) const {
  check_step(t);
  return static_cast<size_t>(t - 1);
}

DiffusionSchedule build_schedule(int64_t T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("schedule needs 0 < beta_start <= beta_end < 1");
  }
  DiffusionSchedule s;
  s.T = T;
  const auto n = static_cast<size_t>(T);
  s.beta.resize(n);
  s.alpha.resize(n);
  s.alpha_bar.resize(n);
  s.beta_tilde.resize(n);
  s.sigma.resize(n);
  s.sqrt_alpha_bar.resize(n);
  s.sqrt_one_minus_alpha_bar.resize(n);
  double abar = 1.0;
  for (size_t i = 0; i < n; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
    s.beta[i] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[i] = 1.0 - s.beta[i];
    const double prev = abar;
    abar *= s.alpha[i];
    s.alpha_bar[i] = abar;
    s.beta_tilde[i] = (1.0 - prev) / (1.0 - abar) * s.beta[i];
    s.sigma[i] = std::sqrt(s.beta_tilde[i]);
    s.sqrt_alpha_bar[i] = std::sqrt(abar);
    s.sqrt_one_minus_alpha_bar[i] = std::sqrt(1.0 - abar);
  }
  return s;
}

torch::Tensor coefficient(const std::vector<double>& values, const torch::Tensor& t, const torch::Tensor& like) {
  auto table = torch::tensor(values, torch::kFloat64);
  auto steps = t.to(torch::kInt64);
  if (steps.numel() > 0) {
    const auto lo = steps.min().item<int64_t>(), hi = steps.max().item<int64_t>();
    if (lo < 1 || hi > static_cast<int64_t>(values.size())) {
      throw ValidationError("diffusion step outside [1, " + std::to_string(values.size()) + "]");
    }
  }
  return table.index_select(0, steps - 1).to(like.scalar_type()).unsqueeze(1);
}

torch::Tensor noise_latents(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                            const DiffusionSchedule& schedule) {
  if (z0.sizes() != eps.sizes()) throw ValidationError("noise_latents: z0 and eps shapes differ");
  if (t.dim() != 1 || t.size(0) != z0.size(0)) throw ValidationError("noise_latents: t must be [B]");
  return coefficient(schedule.sqrt_alpha_bar, t, z0) * z0 + coefficient(schedule.sqrt_one_minus_alpha_bar, t, z0) * eps;
}

}  // namespace oneshot
