#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "pifield/core/tensor.hpp"

namespace pifield::io {

/// Writes an [H x W x 3] image with values in [0,1] as 8-bit RGB PNG.
template <class T>
void write_png(const std::string& path, const Tensor<T>& img) {
  require(img.rank() == 3 && img.dim(2) == 3, "write_png: expects [H x W x 3], got " + shape_str(img.shape()));
  const std::size_t h = img.dim(0), w = img.dim(1);
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw std::runtime_error("write_png: cannot open " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  std::vector<unsigned char> row(w * 3);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("write_png: libpng error for " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, png_uint_32(w), png_uint_32(h), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w * 3; ++j) {
      const double v = std::clamp(double(img[i * w * 3 + j]), 0.0, 1.0);
      row[j] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Decodes any PNG into [H x W x 3] floats in [0,1]; alpha is dropped, gray expanded.
inline Tensor<float> read_png(const std::string& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw std::runtime_error("read_png: cannot open " + path);
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw std::runtime_error("read_png: not a PNG file: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  std::vector<unsigned char> buf;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("read_png: corrupt PNG: " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const std::size_t w = png_get_image_width(png, info), h = png_get_image_height(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buf.resize(stride * h);
  rows.resize(h);
  for (std::size_t i = 0; i < h; ++i) rows[i] = buf.data() + i * stride;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  Tensor<float> img(Shape{h, w, 3});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w * 3; ++j) img[i * w * 3 + j] = float(buf[i * stride + j]) / 255.0f;
  return img;
}

/// Depth map format: u32 width, u32 height (little-endian), then row-major f32.
template <class T>
void write_depth(const std::string& path, const Tensor<T>& depth) {
  require(depth.rank() == 2, "write_depth: expects [H x W], got " + shape_str(depth.shape()));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_depth: cannot open " + path);
  const std::uint32_t w = std::uint32_t(depth.dim(1)), h = std::uint32_t(depth.dim(0));
  auto put32 = [&](std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    f.write(reinterpret_cast<const char*>(b), 4);
  };
  put32(w);
  put32(h);
  for (std::size_t i = 0; i < depth.size(); ++i) {
    const float v = float(depth[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put32(bits);
  }
}

inline Tensor<float> read_depth(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_depth: cannot open " + path);
  auto get32 = [&] {
    unsigned char b[4];
    if (!f.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("read_depth: truncated file " + path);
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
  };
  const std::uint32_t w = get32(), h = get32();
  Tensor<float> d(Shape{h, w});
  for (std::size_t i = 0; i < d.size(); ++i) {
    const std::uint32_t bits = get32();
    std::memcpy(&d[i], &bits, 4);
  }
  return d;
}

}  // namespace pifield::io
