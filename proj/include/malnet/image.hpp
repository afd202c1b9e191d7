#pragma once

// PNG decoding/encoding and resampling helpers.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "malnet/error.hpp"
#include "malnet/tensor.hpp"

namespace malnet {

/// 8-bit interleaved pixels.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;
};

inline bool has_png_signature(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t kSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  return bytes.size() >= 8 && std::memcmp(bytes.data(), kSig, 8) == 0;
}

/// Decodes a PNG into RGB. Alpha is dropped (not composited); grayscale is
/// replicated into three channels.
inline Image decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) throw DecodeError("empty image payload");
  if (!has_png_signature(bytes)) throw DecodeError("not a PNG file (bad signature)");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    throw DecodeError(std::string("PNG header: ") + img.message);
  img.format = PNG_FORMAT_RGBA;
  std::vector<std::uint8_t> rgba(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, rgba.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw DecodeError("PNG data: " + msg);
  }
  Image out;
  out.width = img.width;
  out.height = img.height;
  out.channels = 3;
  out.pixels.resize(out.width * out.height * 3);
  for (std::size_t i = 0; i < out.width * out.height; ++i)
    std::memcpy(&out.pixels[i * 3], &rgba[i * 4], 3);
  return out;
}

/// Encodes 8-bit gray (1), gray+alpha (2), RGB (3) or RGBA (4) pixels.
inline std::vector<std::uint8_t> encode_png(const Image& image) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  switch (image.channels) {
    case 1: img.format = PNG_FORMAT_GRAY; break;
    case 2: img.format = PNG_FORMAT_GA; break;
    case 3: img.format = PNG_FORMAT_RGB; break;
    case 4: img.format = PNG_FORMAT_RGBA; break;
    default: throw ArgumentError("encode_png: unsupported channel count " + std::to_string(image.channels));
  }
  if (image.pixels.size() != image.width * image.height * image.channels)
    throw ArgumentError("encode_png: pixel buffer size does not match dimensions");
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.pixels.data(), 0, nullptr))
    throw Error(std::string("PNG encode: ") + img.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.pixels.data(), 0, nullptr))
    throw Error(std::string("PNG encode: ") + img.message);
  out.resize(size);
  return out;
}

/// Half-pixel-center bilinear resize of one plane. Source coordinates are
/// (dst + 0.5) * in / out - 0.5, clamped to the image.
template <typename T>
void resize_bilinear_plane(const T* src, std::size_t in_h, std::size_t in_w, T* dst,
                           std::size_t out_h, std::size_t out_w) {
  const double sy_scale = static_cast<double>(in_h) / static_cast<double>(out_h);
  const double sx_scale = static_cast<double>(in_w) / static_cast<double>(out_w);
  std::vector<std::size_t> x0(out_w), x1(out_w);
  std::vector<T> fx(out_w);
  for (std::size_t x = 0; x < out_w; ++x) {
    double s = (static_cast<double>(x) + 0.5) * sx_scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in_w - 1));
    x0[x] = static_cast<std::size_t>(std::floor(s));
    x1[x] = std::min(x0[x] + 1, in_w - 1);
    fx[x] = static_cast<T>(s - static_cast<double>(x0[x]));
  }
  for (std::size_t y = 0; y < out_h; ++y) {
    double s = (static_cast<double>(y) + 0.5) * sy_scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in_h - 1));
    const std::size_t y0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t y1 = std::min(y0 + 1, in_h - 1);
    const T fy = static_cast<T>(s - static_cast<double>(y0));
    const T* r0 = src + y0 * in_w;
    const T* r1 = src + y1 * in_w;
    for (std::size_t x = 0; x < out_w; ++x) {
      // lerp as a + f*(b - a) keeps constant regions exact
      const T top = r0[x0[x]] + fx[x] * (r0[x1[x]] - r0[x0[x]]);
      const T bot = r1[x0[x]] + fx[x] * (r1[x1[x]] - r1[x0[x]]);
      dst[y * out_w + x] = top + fy * (bot - top);
    }
  }
}

/// Resizes every plane of a [C,H,W] tensor.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& chw, std::size_t out_h, std::size_t out_w) {
  if (chw.rank() != 3) throw ShapeError("resize_bilinear expects [C,H,W], got " + to_string(chw.shape()));
  const std::size_t C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  Tensor<T> out({C, out_h, out_w});
  for (std::size_t c = 0; c < C; ++c)
    resize_bilinear_plane(chw.data() + c * H * W, H, W, out.data() + c * out_h * out_w, out_h, out_w);
  return out;
}

/// Bilinear sample of a plane at a fractional (row, col); pixels outside the
/// plane read as zero.
template <typename T>
T sample_zero_padded(const T* plane, std::size_t h, std::size_t w, double row, double col) {
  const double fr = std::floor(row), fc = std::floor(col);
  const auto r0 = static_cast<std::ptrdiff_t>(fr), c0 = static_cast<std::ptrdiff_t>(fc);
  const double wr = row - fr, wc = col - fc;
  auto px = [&](std::ptrdiff_t r, std::ptrdiff_t c) -> double {
    if (r < 0 || c < 0 || r >= static_cast<std::ptrdiff_t>(h) || c >= static_cast<std::ptrdiff_t>(w))
      return 0.0;
    return static_cast<double>(plane[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)]);
  };
  const double v = (1 - wr) * ((1 - wc) * px(r0, c0) + wc * px(r0, c0 + 1)) +
                   wr * ((1 - wc) * px(r0 + 1, c0) + wc * px(r0 + 1, c0 + 1));
  return static_cast<T>(v);
}

}  // namespace malnet
