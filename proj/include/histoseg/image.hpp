// 8-bit raster container plus PNG I/O and conversions between images, masks,
// and tensors.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "histoseg/metrics.hpp"
#include "histoseg/tensor.hpp"

namespace histoseg {

// Interleaved row-major pixels, channels = 1 (grayscale) or 3 (RGB).
struct ImageU8 {
  int height = 0, width = 0, channels = 0;
  std::vector<std::uint8_t> pixels;

  ImageU8() = default;
  ImageU8(int h, int w, int c) : height(h), width(w), channels(c) {
    if (h < 1 || w < 1 || (c != 1 && c != 3)) {
      fail("image: extents must be positive with 1 or 3 channels");
    }
    pixels.assign(static_cast<std::size_t>(h) * w * c, 0);
  }

  std::uint8_t& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

// PNG files are read back as 8-bit grayscale or RGB regardless of their
// on-disk layout (palette expanded, 16-bit narrowed, alpha dropped).
ImageU8 load_png(const std::string& path);
void save_png(const std::string& path, const ImageU8& image);

// Masks threshold the first channel: value >= threshold is foreground.
BinaryMask to_mask(const ImageU8& image, int threshold = 128);
ImageU8 mask_to_image(const BinaryMask& mask);  // foreground 255, background 0

Tensor image_to_tensor(const ImageU8& image);   // 1xCxHxW scaled into [0,1]
Tensor mask_to_tensor(const BinaryMask& mask);  // 1x1xHxW of {0,1}

// Quantizes a 1x1xHxW probability map to 8-bit grayscale, round(p * 255).
ImageU8 prob_to_image(const Tensor& prob);

// Mirrors content across the bottom/right edges (without repeating the edge
// row itself) so predictions can run on inputs padded to a multiple of 8.
ImageU8 reflect_pad(const ImageU8& image, int pad_bottom, int pad_right);

ImageU8 resize_image(const ImageU8& image, int height, int width);  // bilinear

}  // namespace histoseg
