// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#include "oneshot_ldm/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "oneshot_ldm/errors.hpp"

namespace oneshot {

namespace {

using Point = std::array<double, 2>;
using Stroke = std::array<Point, 3>;  // quadratic Bezier

double segment_distance(const Point& p, const Point& a, const Point& b) {
  const double vx = b[0] - a[0], vy = b[1] - a[1];
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0.0 ? ((p[0] - a[0]) * vx + (p[1] - a[1]) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = p[0] - (a[0] + t * vx), dy = p[1] - (a[1] + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

torch::Tensor render(const std::vector<Stroke>& strokes, int64_t size, double width) {
  constexpr int kSegments = 16;
  std::vector<std::pair<Point, Point>> segs;
  for (const auto& s : strokes) {
    Point prev = s[0];
    for (int k = 1; k <= kSegments; ++k) {
      const double t = static_cast<double>(k) / kSegments;
      const double a = (1 - t) * (1 - t), b = 2 * (1 - t) * t, c = t * t;
      Point cur{a * s[0][0] + b * s[1][0] + c * s[2][0], a * s[0][1] + b * s[1][1] + c * s[2][1]};
      segs.emplace_back(prev, cur);
      prev = cur;
    }
  }
  auto img = torch::zeros({1, size, size}, torch::kFloat32);
  auto acc = img.accessor<float, 3>();
  for (int64_t y = 0; y < size; ++y) {
    for (int64_t x = 0; x < size; ++x) {
      const Point p{static_cast<double>(x), static_cast<double>(y)};
      double d = 1e9;
      for (const auto& [a, b] : segs) d = std::min(d, segment_distance(p, a, b));
      // One-pixel linear falloff outside the stroke core.
      acc[0][y][x] = static_cast<float>(std::clamp(width / 2.0 + 0.5 - d, 0.0, 1.0));
    }
  }
  return img;
}

}  // namespace

std::vector<CategoryRecord> make_synthetic_categories(const SyntheticOptions& o) {
  if (o.train_categories < 1 || o.test_categories < 0 || o.samples_per_category < 2 || o.image_size < 8) {
    throw ValidationError("synthetic dataset needs >= 1 train category, >= 2 samples and size >= 8");
  }
  Rng rng(o.seed);
  const double S = static_cast<double>(o.image_size);
  const double lo = 0.2 * S, hi = 0.8 * S;
  std::vector<CategoryRecord> out;
  const int64_t total = o.train_categories + o.test_categories;
  for (int64_t c = 0; c < total; ++c) {
    std::vector<Stroke> base(static_cast<size_t>(rng.randint(2, 4)));
    for (auto& s : base) {
      for (auto& p : s) p = {rng.uniform(lo, hi), rng.uniform(lo, hi)};
    }
    CategoryRecord rec;
    rec.category_id = c;
    rec.split = c < o.train_categories ? SplitName::Train : SplitName::Test;
    if (o.groups > 0) rec.group = "group_" + std::to_string(c % o.groups);
    for (int64_t k = 0; k < o.samples_per_category; ++k) {
      const double angle = rng.uniform(-0.15, 0.15);
      const double scale = rng.uniform(0.9, 1.1);
      const double tx = rng.uniform(-1.5, 1.5), ty = rng.uniform(-1.5, 1.5);
      const double cx = (S - 1) / 2, cy = (S - 1) / 2;
      const double ca = std::cos(angle) * scale, sa = std::sin(angle) * scale;
      std::vector<Stroke> strokes = base;
      for (auto& s : strokes) {
        for (auto& p : s) {
          const double jx = p[0] + rng.uniform(-o.jitter, o.jitter) * S - cx;
          const double jy = p[1] + rng.uniform(-o.jitter, o.jitter) * S - cy;
          p = {cx + tx + ca * jx - sa * jy, cy + ty + sa * jx + ca * jy};
        }
      }
      rec.samples.push_back(render(strokes, o.image_size, o.stroke_width * rng.uniform(0.85, 1.15)));
    }
    rec.exemplar_index = select_exemplar(rec.samples).second;
    out.push_back(std::move(rec));
  }
  return out;
}

size_t write_synthetic_dataset(const std::filesystem::path& root, DatasetName name, const SyntheticOptions& options) {
  const auto cats = make_synthetic_categories(options);
  write_dataset(root, name, cats, options.image_size);
  return cats.size();
}

}  // namespace oneshot
