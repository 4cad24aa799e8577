// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#include "oneshot_ldm/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "oneshot_ldm/errors.hpp"

namespace oneshot {

AugmentationConfig AugmentationConfig::identity() {
  AugmentationConfig c;
  c.crop_scale = {1.0, 1.0};
  c.crop_ratio = {1.0, 1.0};
  c.rotation_deg = {0.0, 0.0};
  c.translate_px = {0.0, 0.0};
  c.zoom_ratio = {1.0, 1.0};
  c.shear_deg = {0.0, 0.0};
  c.perspective_distortion = 0.0;
  c.perspective_prob = 0.0;
  return c;
}

void AugmentationConfig::validate() const {
  auto check = [](const Interval& iv, const char* name) {
    if (!(iv.lo <= iv.hi) || !std::isfinite(iv.lo) || !std::isfinite(iv.hi)) {
      throw ConfigError(std::string("augmentation interval ") + name + " is empty or non-finite");
    }
  };
  check(crop_scale, "crop_scale");
  check(crop_ratio, "crop_ratio");
  check(rotation_deg, "rotation_deg");
  check(translate_px, "translate_px");
  check(zoom_ratio, "zoom_ratio");
  check(shear_deg, "shear_deg");
  if (crop_scale.lo <= 0.0 || crop_scale.hi > 1.0) throw ConfigError("crop_scale must lie in (0, 1]");
  if (crop_ratio.lo <= 0.0) throw ConfigError("crop_ratio must be positive");
  if (zoom_ratio.lo <= 0.0) throw ConfigError("zoom_ratio must be positive");
  if (std::abs(shear_deg.lo) >= 90.0 || std::abs(shear_deg.hi) >= 90.0) {
    throw ConfigError("shear_deg must stay inside (-90, 90)");
  }
  if (!(perspective_distortion >= 0.0 && perspective_distortion <= 1.0)) {
    throw ConfigError("perspective_distortion must lie in [0, 1]");
  }
  if (!(perspective_prob >= 0.0 && perspective_prob <= 1.0)) {
    throw ConfigError("perspective_prob must lie in [0, 1]");
  }
}

namespace {

nlohmann::json iv_json(const Interval& iv) { return {iv.lo, iv.hi}; }

Interval iv_from(const nlohmann::json& j, const char* key, Interval fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2) throw ConfigError(std::string("augmentation.") + key + " needs [lo, hi]");
  return {v[0].get<double>(), v[1].get<double>()};
}

double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

/// Homography taking the four `from` points onto the four `to` points
/// (direct linear transform with h22 = 1).
Homography fit_homography(const std::array<std::array<double, 2>, 4>& from,
                          const std::array<std::array<double, 2>, 4>& to) {
  auto a = torch::zeros({8, 8}, torch::kFloat64);
  auto b = torch::zeros({8}, torch::kFloat64);
  auto A = a.accessor<double, 2>();
  auto B = b.accessor<double, 1>();
  for (int i = 0; i < 4; ++i) {
    const double x = from[i][0], y = from[i][1], u = to[i][0], v = to[i][1];
    A[2 * i][0] = x;
    A[2 * i][1] = y;
    A[2 * i][2] = 1.0;
    A[2 * i][6] = -u * x;
    A[2 * i][7] = -u * y;
    B[2 * i] = u;
    A[2 * i + 1][3] = x;
    A[2 * i + 1][4] = y;
    A[2 * i + 1][5] = 1.0;
    A[2 * i + 1][6] = -v * x;
    A[2 * i + 1][7] = -v * y;
    B[2 * i + 1] = v;
  }
  auto h = torch::linalg_solve(a, b);
  auto H = h.accessor<double, 1>();
  return {H[0], H[1], H[2], H[3], H[4], H[5], H[6], H[7], 1.0};
}

double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < 1e-9 ? r : v;
}

}  // namespace

nlohmann::json to_json(const AugmentationConfig& c) {
  return {{"crop_scale", iv_json(c.crop_scale)},
          {"crop_ratio", iv_json(c.crop_ratio)},
          {"rotation_deg", iv_json(c.rotation_deg)},
          {"translate_px", iv_json(c.translate_px)},
          {"zoom_ratio", iv_json(c.zoom_ratio)},
          {"shear_deg", iv_json(c.shear_deg)},
          {"perspective_distortion", c.perspective_distortion},
          {"perspective_prob", c.perspective_prob}};
}

AugmentationConfig augmentation_from_json(const nlohmann::json& j) {
  AugmentationConfig c;
  c.crop_scale = iv_from(j, "crop_scale", c.crop_scale);
  c.crop_ratio = iv_from(j, "crop_ratio", c.crop_ratio);
  c.rotation_deg = iv_from(j, "rotation_deg", c.rotation_deg);
  c.translate_px = iv_from(j, "translate_px", c.translate_px);
  c.zoom_ratio = iv_from(j, "zoom_ratio", c.zoom_ratio);
  c.shear_deg = iv_from(j, "shear_deg", c.shear_deg);
  c.perspective_distortion = j.value("perspective_distortion", c.perspective_distortion);
  c.perspective_prob = j.value("perspective_prob", c.perspective_prob);
  c.validate();
  return c;
}

torch::Tensor warp(const torch::Tensor& image, const Homography& map) {
  const bool flat = image.dim() == 2;
  if (!flat && !(image.dim() == 3 && image.size(0) == 1)) {
    throw ShapeError("warp expects a [1, H, W] or [H, W] image");
  }
  auto src = (flat ? image : image[0]).to(torch::kFloat32).contiguous();
  const int64_t H = src.size(0), W = src.size(1);
  auto out = torch::zeros({H, W}, torch::kFloat32);
  auto S = src.accessor<float, 2>();
  auto O = out.accessor<float, 2>();
  auto at = [&](int64_t y, int64_t x) -> double {
    return (x < 0 || y < 0 || x >= W || y >= H) ? 0.0 : static_cast<double>(S[y][x]);
  };
  for (int64_t v = 0; v < H; ++v) {
    for (int64_t u = 0; u < W; ++u) {
      const double w = map[6] * u + map[7] * v + map[8];
      if (std::abs(w) < 1e-12) continue;
      const double x = snap((map[0] * u + map[1] * v + map[2]) / w);
      const double y = snap((map[3] * u + map[4] * v + map[5]) / w);
      if (x <= -1.0 || y <= -1.0 || x >= static_cast<double>(W) || y >= static_cast<double>(H)) continue;
      const double fx = std::floor(x), fy = std::floor(y);
      const double ax = x - fx, ay = y - fy;
      const auto x0 = static_cast<int64_t>(fx), y0 = static_cast<int64_t>(fy);
      double val = (1.0 - ay) * ((1.0 - ax) * at(y0, x0) + (ax > 0.0 ? ax * at(y0, x0 + 1) : 0.0));
      if (ay > 0.0) val += ay * ((1.0 - ax) * at(y0 + 1, x0) + (ax > 0.0 ? ax * at(y0 + 1, x0 + 1) : 0.0));
      O[v][u] = static_cast<float>(std::clamp(val, 0.0, 1.0));
    }
  }
  return flat ? out : out.unsqueeze(0);
}

Homography sample_homography(AugmentKind kind, int64_t height, int64_t width, const AugmentationConfig& config,
                             Rng& rng) {
  const double H = static_cast<double>(height), W = static_cast<double>(width);
  switch (kind) {
    case AugmentKind::ResizedCrop: {
      const double area = rng.uniform(config.crop_scale.lo, config.crop_scale.hi) * H * W;
      const double ratio = rng.uniform(config.crop_ratio.lo, config.crop_ratio.hi);
      const double cw = std::min(W, std::sqrt(area * ratio));
      const double ch = std::min(H, std::sqrt(area / ratio));
      const double x0 = rng.uniform(0.0, W - cw);
      const double y0 = rng.uniform(0.0, H - ch);
      const double sx = cw / W, sy = ch / H;
      // Pixel centres of the output span the crop box.
      return {sx, 0.0, x0 + 0.5 * sx - 0.5, 0.0, sy, y0 + 0.5 * sy - 0.5, 0.0, 0.0, 1.0};
    }
    case AugmentKind::Affine: {
      const double theta = deg2rad(rng.uniform(config.rotation_deg.lo, config.rotation_deg.hi));
      const double tx = rng.uniform(config.translate_px.lo, config.translate_px.hi);
      const double ty = rng.uniform(config.translate_px.lo, config.translate_px.hi);
      const double zoom = rng.uniform(config.zoom_ratio.lo, config.zoom_ratio.hi);
      const double shear = std::tan(deg2rad(rng.uniform(config.shear_deg.lo, config.shear_deg.hi)));
      const double cx = (W - 1.0) / 2.0, cy = (H - 1.0) / 2.0;
      // Forward map p' = c + t + zoom * R * Sh * (p - c); sampling needs its inverse.
      const double c = std::cos(theta), s = std::sin(theta);
      const double a00 = zoom * c, a01 = zoom * (c * shear - s);
      const double a10 = zoom * s, a11 = zoom * (s * shear + c);
      const double det = a00 * a11 - a01 * a10;
      const double i00 = a11 / det, i01 = -a01 / det, i10 = -a10 / det, i11 = a00 / det;
      const double ox = -cx - tx, oy = -cy - ty;
      return {i00, i01, cx + i00 * ox + i01 * oy, i10, i11, cy + i10 * ox + i11 * oy, 0.0, 0.0, 1.0};
    }
    case AugmentKind::Perspective: {
      const bool apply = rng.bernoulli(config.perspective_prob);
      if (!apply || config.perspective_distortion == 0.0) return {1, 0, 0, 0, 1, 0, 0, 0, 1};
      const double dx = config.perspective_distortion * W / 2.0;
      const double dy = config.perspective_distortion * H / 2.0;
      const double r = W - 1.0, b = H - 1.0;
      std::array<std::array<double, 2>, 4> corners{{{0.0, 0.0}, {r, 0.0}, {r, b}, {0.0, b}}};
      std::array<std::array<double, 2>, 4> moved{};
      moved[0] = {rng.uniform(0.0, dx), rng.uniform(0.0, dy)};
      moved[1] = {r - rng.uniform(0.0, dx), rng.uniform(0.0, dy)};
      moved[2] = {r - rng.uniform(0.0, dx), b - rng.uniform(0.0, dy)};
      moved[3] = {rng.uniform(0.0, dx), b - rng.uniform(0.0, dy)};
      // The source corners land on the moved corners, so an output pixel at a
      // moved corner samples the original corner.
      return fit_homography(moved, corners);
    }
  }
  throw ValidationError("unknown augmentation kind");
}

torch::Tensor augment(const torch::Tensor& image, const AugmentationConfig& config, Rng& rng) {
  const int64_t h = image.size(-2), w = image.size(-1);
  const auto kind = static_cast<AugmentKind>(rng.randint(0, 2));
  const auto map = sample_homography(kind, h, w, config, rng);
  return warp(image, map);
}

torch::Tensor augment_batch(const torch::Tensor& images, const AugmentationConfig& config, Rng& rng) {
  if (images.dim() != 4 || images.size(1) != 1) throw ShapeError("augment_batch expects [B, 1, H, W]");
  std::vector<torch::Tensor> out;
  out.reserve(static_cast<size_t>(images.size(0)));
  for (int64_t i = 0; i < images.size(0); ++i) out.push_back(augment(images[i], config, rng));
  return torch::stack(out);
}

}  // namespace oneshot
