// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#include "oneshot_ldm/render.hpp"

#include <algorithm>
#include <cmath>

#include "oneshot_ldm/errors.hpp"
#include "oneshot_ldm/image_io.hpp"

namespace oneshot {

namespace {

uint8_t to_byte(double v) { return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

torch::Tensor as_gray(const torch::Tensor& image, const char* what) {
  auto g = image.dim() == 2 ? image.unsqueeze(0) : image;
  if (g.dim() != 3 || g.size(0) != 1) throw ValidationError(std::string(what) + " must be [1, H, W]");
  return g.to(torch::kFloat64).contiguous();
}

}  // namespace

torch::Tensor render_grid_image(const std::vector<torch::Tensor>& images, const torch::Tensor& exemplar,
                                GridLayout layout) {
  if (images.empty()) throw ValidationError("render_grid: no images");
  const auto ex = as_gray(exemplar, "exemplar");
  const int64_t h = ex.size(1), w = ex.size(2);
  for (const auto& im : images) {
    auto g = as_gray(im, "grid image");
    if (g.size(1) != h || g.size(2) != w) throw ValidationError("render_grid: images differ in size");
  }
  const auto n = static_cast<int64_t>(images.size());
  int64_t cols = layout.cols, rows = layout.rows;
  if (cols <= 0 && rows <= 0) cols = static_cast<int64_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  if (cols <= 0) cols = (n + rows - 1) / rows;
  if (rows <= 0) rows = (n + cols - 1) / cols;
  if (rows * cols < n) throw ValidationError("render_grid: layout too small for the images");
  const int64_t pad = std::max<int64_t>(layout.padding, 2);
  const int64_t cell_h = h + 2 * pad, cell_w = w + 2 * pad;
  const int64_t H = cell_h * (rows + 1) + pad, W = cell_w * cols;

  auto out = torch::full({3, H, W}, 255, torch::kUInt8);
  auto O = out.accessor<uint8_t, 3>();
  auto blit = [&](const torch::Tensor& img, int64_t y0, int64_t x0) {
    auto g = as_gray(img, "image");
    auto G = g.accessor<double, 3>();
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        // Ink is stored bright-on-dark; print it dark-on-white.
        const auto v = to_byte(1.0 - G[0][y][x]);
        for (int c = 0; c < 3; ++c) O[c][y0 + y][x0 + x] = v;
      }
    }
  };

  // Exemplar row: the exemplar in the first cell, framed in red.
  const int64_t ey = pad, ex0 = pad;
  for (int64_t y = ey - 2; y < ey + h + 2; ++y) {
    for (int64_t x = ex0 - 2; x < ex0 + w + 2; ++x) {
      O[0][y][x] = 220;
      O[1][y][x] = 30;
      O[2][y][x] = 30;
    }
  }
  blit(ex, ey, ex0);
  // Separator under the exemplar row.
  for (int64_t x = 0; x < W; ++x) {
    for (int c = 0; c < 3; ++c) O[c][cell_h + pad / 2][x] = 128;
  }
  for (int64_t i = 0; i < n; ++i) {
    const int64_t r = i / cols + 1, c = i % cols;
    blit(images[static_cast<size_t>(i)], r * cell_h + pad + pad, c * cell_w + pad);
  }
  return out;
}

void render_grid(const std::filesystem::path& path, const std::vector<torch::Tensor>& images,
                 const torch::Tensor& exemplar, GridLayout layout) {
  write_png_rgb(path, render_grid_image(images, exemplar, layout));
}

std::array<double, 3> heat_color(double t) {
  static constexpr std::array<std::array<double, 3>, 4> kStops{{{0, 0, 1}, {0, 1, 1}, {1, 1, 0}, {1, 0, 0}}};
  t = std::clamp(t, 0.0, 1.0) * 3.0;
  const auto k = std::min<size_t>(2, static_cast<size_t>(t));
  const double f = t - static_cast<double>(k);
  std::array<double, 3> c{};
  for (size_t i = 0; i < 3; ++i) c[i] = kStops[k][i] + f * (kStops[k + 1][i] - kStops[k][i]);
  return c;
}

torch::Tensor render_overlay_image(const ImportanceMap& map, const torch::Tensor& exemplar, double alpha) {
  const auto ex = as_gray(exemplar, "exemplar");
  const auto m = as_gray(unit_max(map).values, "importance map");
  if (m.sizes() != ex.sizes()) throw ValidationError("render_overlay: map and exemplar resolutions differ");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("render_overlay: alpha must lie in [0, 1]");
  const int64_t h = ex.size(1), w = ex.size(2);
  auto out = torch::empty({3, h, w}, torch::kUInt8);
  auto O = out.accessor<uint8_t, 3>();
  auto E = ex.accessor<double, 3>();
  auto M = m.accessor<double, 3>();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const double base = 1.0 - E[0][y][x];
      const auto col = heat_color(M[0][y][x]);
      for (size_t c = 0; c < 3; ++c) O[static_cast<int64_t>(c)][y][x] = to_byte((1.0 - alpha) * base + alpha * col[c]);
    }
  }
  return out;
}

void render_overlay(const std::filesystem::path& path, const ImportanceMap& map, const torch::Tensor& exemplar,
                    double alpha) {
  write_png_rgb(path, render_overlay_image(map, exemplar, alpha));
}

}  // namespace oneshot
