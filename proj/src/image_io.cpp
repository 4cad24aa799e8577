// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#include "oneshot_ldm/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <vector>

#include "oneshot_ldm/errors.hpp"

namespace fs = std::filesystem;

namespace oneshot {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

FilePtr open_file(const fs::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

[[noreturn]] void png_error_fn(png_structp png, png_const_charp msg) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  if (what) *what = msg;
  png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

void write_rows(png_structp png, const std::vector<uint8_t>& pixels, int height, size_t row_bytes) {
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<size_t>(y) * row_bytes));
  }
}

void write_png(const fs::path& path, int width, int height, int color_type,
               const std::vector<uint8_t>& pixels) {
  auto file = open_file(path, "wb");
  std::string what;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &what, png_error_fn,
                                            png_warning_fn);
  if (!png) throw IoError("png: out of memory");
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError(path.string() + ": png write failed: " + what);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  write_rows(png, pixels, height, static_cast<size_t>(width) * (color_type == PNG_COLOR_TYPE_RGB ? 3 : 1));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

uint8_t to_byte(float v) {
  const float c = std::min(1.0f, std::max(0.0f, v));
  return static_cast<uint8_t>(std::lround(c * 255.0f));
}

}  // namespace

torch::Tensor read_png_gray(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("missing file " + path.string());
  auto file = open_file(path, "rb");
  uint8_t sig[8] = {};
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw ParseError(path.string(), "not a PNG file");
  }
  std::string what;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &what, png_error_fn,
                                           png_warning_fn);
  if (!png) throw IoError("png: out of memory");
  png_infop info = png_create_info_struct(png);
  torch::Tensor out;
  std::vector<uint8_t> row;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError(path.string(), "corrupt PNG: " + what);
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
      color == PNG_COLOR_TYPE_PALETTE) {
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  }
  png_read_update_info(png, info);
  const auto width = static_cast<int64_t>(png_get_image_width(png, info));
  const auto height = static_cast<int64_t>(png_get_image_height(png, info));
  const size_t rowbytes = png_get_rowbytes(png, info);
  row.resize(rowbytes);
  out = torch::empty({1, height, width}, torch::kFloat32);
  float* dst = out.data_ptr<float>();
  for (int64_t y = 0; y < height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int64_t x = 0; x < width; ++x) dst[y * width + x] = row[x] / 255.0f;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void write_png_gray(const fs::path& path, const torch::Tensor& image) {
  auto img = image.detach().to(torch::kFloat32).contiguous();
  if (img.dim() == 3 && img.size(0) == 1) img = img.squeeze(0);
  if (img.dim() != 2) throw ShapeError("write_png_gray expects [1,H,W] or [H,W]");
  const auto h = static_cast<int>(img.size(0));
  const auto w = static_cast<int>(img.size(1));
  std::vector<uint8_t> pixels(static_cast<size_t>(h) * w);
  const float* src = img.data_ptr<float>();
  for (size_t i = 0; i < pixels.size(); ++i) pixels[i] = to_byte(src[i]);
  write_png(path, w, h, PNG_COLOR_TYPE_GRAY, pixels);
}

void write_png_rgb(const fs::path& path, const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3) throw ShapeError("write_png_rgb expects [3,H,W]");
  auto img = image.detach();
  if (img.scalar_type() != torch::kUInt8) {
    img = (img.to(torch::kFloat32).clamp(0.0, 1.0) * 255.0f).round().to(torch::kUInt8);
  }
  img = img.permute({1, 2, 0}).contiguous();
  const auto h = static_cast<int>(img.size(0));
  const auto w = static_cast<int>(img.size(1));
  std::vector<uint8_t> pixels(img.data_ptr<uint8_t>(), img.data_ptr<uint8_t>() + img.numel());
  write_png(path, w, h, PNG_COLOR_TYPE_RGB, pixels);
}

void write_npy(const fs::path& path, const torch::Tensor& array) {
  auto arr = array.detach().contiguous();
  std::string descr;
  if (arr.scalar_type() == torch::kFloat32) {
    descr = "<f4";
  } else if (arr.scalar_type() == torch::kFloat64) {
    descr = "<f8";
  } else {
    arr = arr.to(torch::kFloat32);
    descr = "<f4";
  }
  std::ostringstream shape;
  shape << "(";
  for (int64_t i = 0; i < arr.dim(); ++i) {
    shape << arr.size(i) << (arr.dim() == 1 || i + 1 < arr.dim() ? "," : "");
    if (i + 1 < arr.dim()) shape << " ";
  }
  shape << ")";
  std::string header = "{'descr': '" + descr + "', 'fortran_order': False, 'shape': " +
                       shape.str() + ", }";
  const size_t preamble = 10;
  size_t total = preamble + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header.push_back('\n');
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const char magic[] = "\x93NUMPY";
  out.write(magic, 6);
  out.put(1);
  out.put(0);
  const auto hlen = static_cast<uint16_t>(header.size());
  out.put(static_cast<char>(hlen & 0xff));
  out.put(static_cast<char>(hlen >> 8));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(static_cast<const char*>(arr.data_ptr()),
            static_cast<std::streamsize>(arr.numel() * arr.element_size()));
}

torch::Tensor read_npy(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "\x93NUMPY", 6) != 0) throw ParseError(path.string(), "not a .npy file");
  uint32_t hlen = 0;
  if (magic[6] == 1) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    hlen = b[0] | (b[1] << 8);
  } else {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    hlen = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<uint32_t>(b[3]) << 24);
  }
  std::string header(hlen, '\0');
  in.read(header.data(), hlen);
  if (!in) throw ParseError(path.string(), "truncated header");
  torch::ScalarType dtype;
  if (header.find("'<f4'") != std::string::npos) {
    dtype = torch::kFloat32;
  } else if (header.find("'<f8'") != std::string::npos) {
    dtype = torch::kFloat64;
  } else {
    throw ParseError(path.string(), "unsupported dtype (need <f4 or <f8)");
  }
  if (header.find("'fortran_order': True") != std::string::npos) {
    throw ParseError(path.string(), "fortran order unsupported");
  }
  const auto lp = header.find('(', header.find("'shape'"));
  const auto rp = header.find(')', lp);
  if (lp == std::string::npos || rp == std::string::npos) throw ParseError(path.string(), "no shape");
  std::vector<int64_t> shape;
  std::stringstream ss(header.substr(lp + 1, rp - lp - 1));
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.find_first_not_of(" ") == std::string::npos) continue;
    shape.push_back(std::stoll(tok));
  }
  auto out = torch::empty(shape, dtype);
  in.read(static_cast<char*>(out.data_ptr()),
          static_cast<std::streamsize>(out.numel() * out.element_size()));
  if (!in) throw ParseError(path.string(), "truncated data");
  return out;
}

}  // namespace oneshot
