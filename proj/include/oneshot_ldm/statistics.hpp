// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <array>
#include <map>
#include <string>
#include <vector>

#include "oneshot_ldm/rng.hpp"

namespace oneshot {

/// 1-based ranks with ties sharing their average rank.
std::vector<double> average_ranks(const std::vector<double>& values);

double pearson(const std::vector<double>& a, const std::vector<double>& b);

/// Pearson correlation of average ranks. Throws DegenerateError when either
/// input is constant, ValidationError on length mismatch or fewer than 2 values.
double spearman_rank(const std::vector<double>& a, const std::vector<double>& b);
double spearman_rank(const torch::Tensor& a, const torch::Tensor& b);

enum class Alternative { Greater, Less, TwoSided };

struct WilcoxonResult {
  double statistic = 0.0;  // W+, sum of ranks of positive differences
  double p_value = 1.0;
  int64_t n = 0;           // non-zero differences
  bool exact = true;
};

/// Paired signed-rank test of a - b. Zero differences are dropped, tied
/// magnitudes share average ranks. Exact null distribution for n <= 25,
/// tie-corrected normal approximation above. All-zero differences raise
/// DegenerateError.
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                    Alternative alternative = Alternative::Greater);

/// Split-half agreement: per resample and category, participants are
/// randomly split in two halves, each half's maps are averaged and the two
/// averages compared with Spearman. Returns the mean over categories and resamples.
double bootstrap_consistency(const std::map<std::string, std::vector<torch::Tensor>>& per_participant_maps,
                             int64_t n_resamples, Rng& rng);

/// Coefficients (c0, c1, c2) of c0 + c1 x + c2 x^2.
using Quadratic = std::array<double, 3>;

/// Least-squares degree-2 fit; needs >= 3 distinct abscissae.
Quadratic fit_quadratic(const std::vector<double>& x, const std::vector<double>& y);
double eval_quadratic(const Quadratic& q, double x);

}  // namespace oneshot
