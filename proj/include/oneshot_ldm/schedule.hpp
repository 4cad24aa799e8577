// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

namespace oneshot {

/// Per-step DDPM coefficients, stored 0-based; the accessors take the
/// 1-based step t in [1, T].
struct DiffusionSchedule {
  int64_t T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  /// Posterior variance (1 - abar_{t-1}) / (1 - abar_t) * beta_t, zero at t = 1.
  std::vector<double> beta_tilde;
  /// sqrt(beta_tilde).
  std::vector<double> sigma;
  std::vector<double> sqrt_alpha_bar;
  std::vector<double> sqrt_one_minus_alpha_bar;

  double beta_at(int64_t t) const { return beta[idx(t)]; }
  double alpha_at(int64_t t) const { return alpha[idx(t)]; }
  double alpha_bar_at(int64_t t) const { return alpha_bar[idx(t)]; }
  /// abar_{t-1}, with abar_0 = 1.
  double alpha_bar_prev_at(int64_t t) const { return t == 1 ? 1.0 : alpha_bar[idx(t - 1)]; }
  double beta_tilde_at(int64_t t) const { return beta_tilde[idx(t)]; }
  double sigma_at(int64_t t) const { return sigma[idx(t)]; }

  /// Throws ValidationError unless 1 <= t <= T.
  void check_step(int64_t t) const;

 private:
  size_t idx(int64_t t) const;
};

/// Betas linearly spaced from beta_start to beta_end over T steps.
DiffusionSchedule build_schedule(int64_t T = 1000, double beta_start = 1.5e-3, double beta_end = 1.95e-2);

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, with t a [B] int64 tensor of steps.
torch::Tensor noise_latents(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                            const DiffusionSchedule& schedule);

/// Gathers a per-step coefficient for a [B] step tensor, as a [B, 1] column
/// of `like`'s dtype.
torch::Tensor coefficient(const std::vector<double>& values, const torch::Tensor& t, const torch::Tensor& like);

}  // namespace oneshot
