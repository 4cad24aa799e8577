// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#include "oneshot_ldm/statistics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "oneshot_ldm/errors.hpp"

namespace oneshot {

std::vector<double> average_ranks(const std::vector<double>& values) {
  const size_t n = values.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t i, size_t j) { return values[i] < values[j]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ValidationError("correlation inputs differ in length");
  if (a.size() < 2) throw ValidationError("correlation needs at least 2 values");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw DegenerateError("correlation of a constant input is undefined");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double spearman_rank(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ValidationError("spearman_rank: inputs differ in length");
  if (a.size() < 2) throw ValidationError("spearman_rank needs at least 2 values");
  return pearson(average_ranks(a), average_ranks(b));
}

namespace {

std::vector<double> to_vector(const torch::Tensor& t) {
  auto c = t.detach().reshape({-1}).to(torch::kFloat64).contiguous();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace

double spearman_rank(const torch::Tensor& a, const torch::Tensor& b) {
  return spearman_rank(to_vector(a), to_vector(b));
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                    Alternative alternative) {
  if (a.size() != b.size()) throw ValidationError("wilcoxon: paired inputs differ in length");
  std::vector<double> diffs;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (d != 0.0) diffs.push_back(d);
  }
  if (diffs.empty()) throw DegenerateError("wilcoxon: all paired differences are zero");
  std::vector<double> mags(diffs.size());
  std::transform(diffs.begin(), diffs.end(), mags.begin(), [](double d) { return std::abs(d); });
  const auto ranks = average_ranks(mags);
  WilcoxonResult r;
  r.n = static_cast<int64_t>(diffs.size());
  for (size_t i = 0; i < diffs.size(); ++i) {
    if (diffs[i] > 0) r.statistic += ranks[i];
  }
  const auto n = static_cast<size_t>(r.n);
  double p_greater = 0.0, p_less = 0.0;
  if (n <= 25) {
    // Average ranks are multiples of 1/2, so doubled ranks are integers and
    // the null distribution of 2 W+ is a subset-sum count.
    std::vector<int64_t> doubled(n);
    int64_t total = 0;
    for (size_t i = 0; i < n; ++i) {
      doubled[i] = std::llround(2.0 * ranks[i]);
      total += doubled[i];
    }
    std::vector<double> count(static_cast<size_t>(total) + 1, 0.0);
    count[0] = 1.0;
    int64_t reach = 0;
    for (auto w : doubled) {
      for (int64_t s = reach; s >= 0; --s) {
        if (count[static_cast<size_t>(s)] != 0.0) count[static_cast<size_t>(s + w)] += count[static_cast<size_t>(s)];
      }
      reach += w;
    }
    const double all = std::ldexp(1.0, static_cast<int>(n));
    const auto obs = std::llround(2.0 * r.statistic);
    for (int64_t s = 0; s <= total; ++s) {
      if (s >= obs) p_greater += count[static_cast<size_t>(s)];
      if (s <= obs) p_less += count[static_cast<size_t>(s)];
    }
    p_greater /= all;
    p_less /= all;
    r.exact = true;
  } else {
    const double nn = static_cast<double>(n);
    const double mean = nn * (nn + 1.0) / 4.0;
    double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0;
    std::map<double, int64_t> ties;
    for (double v : ranks) ++ties[v];
    for (const auto& [v, c] : ties) {
      const double t = static_cast<double>(c);
      var -= (t * t * t - t) / 48.0;
    }
    const double z = (r.statistic - mean) / std::sqrt(var);
    p_greater = normal_sf(z);
    p_less = normal_sf(-z);
    r.exact = false;
  }
  switch (alternative) {
    case Alternative::Greater: r.p_value = p_greater; break;
    case Alternative::Less: r.p_value = p_less; break;
    case Alternative::TwoSided: r.p_value = std::min(1.0, 2.0 * std::min(p_greater, p_less)); break;
  }
  return r;
}

double bootstrap_consistency(const std::map<std::string, std::vector<torch::Tensor>>& maps, int64_t n_resamples,
                             Rng& rng) {
  if (n_resamples < 1) throw ValidationError("bootstrap_consistency needs n_resamples >= 1");
  if (maps.empty()) throw ValidationError("bootstrap_consistency: no categories");
  std::map<std::string, torch::Tensor> stacked;
  for (const auto& [cat, list] : maps) {
    if (list.size() < 2) throw ValidationError("category '" + cat + "' has fewer than 2 participant maps");
    std::vector<torch::Tensor> flat;
    for (const auto& m : list) flat.push_back(m.detach().reshape({-1}).to(torch::kFloat64));
    stacked[cat] = torch::stack(flat);
  }
  double sum = 0.0;
  int64_t count = 0;
  for (int64_t r = 0; r < n_resamples; ++r) {
    for (const auto& [cat, all] : stacked) {
      const int64_t n = all.size(0);
      auto perm = torch::tensor(rng.permutation(n), torch::kInt64);
      const int64_t half = n / 2;
      auto a = all.index_select(0, perm.narrow(0, 0, half)).mean(0);
      auto b = all.index_select(0, perm.narrow(0, half, n - half)).mean(0);
      sum += spearman_rank(a, b);
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

Quadratic fit_quadratic(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ValidationError("fit: x and y differ in length");
  std::set<double> distinct(x.begin(), x.end());
  if (distinct.size() < 3) throw ValidationError("degree-2 fit needs at least 3 distinct abscissae");
  const auto n = static_cast<int64_t>(x.size());
  auto A = torch::empty({n, 3}, torch::kFloat64);
  auto b = torch::empty({n, 1}, torch::kFloat64);
  auto Aa = A.accessor<double, 2>();
  auto ba = b.accessor<double, 2>();
  for (int64_t i = 0; i < n; ++i) {
    const double xi = x[static_cast<size_t>(i)];
    Aa[i][0] = 1.0;
    Aa[i][1] = xi;
    Aa[i][2] = xi * xi;
    ba[i][0] = y[static_cast<size_t>(i)];
  }
  // SVD-based least squares, so a rank-deficient design still yields the minimum-norm solution.
  auto sol = std::get<0>(torch::linalg_lstsq(A, b, std::nullopt, "gelsd"));
  auto s = sol.accessor<double, 2>();
  return {s[0][0], s[1][0], s[2][0]};
}

double eval_quadratic(const Quadratic& q, double x) { return q[0] + q[1] * x + q[2] * x * x; }

}  // namespace oneshot
