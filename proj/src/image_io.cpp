#include "histoseg/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "histoseg/ops.hpp"

namespace histoseg {

namespace {

void capture_png_error(png_structp png, png_const_charp msg) {
  if (auto* slot = static_cast<std::string*>(png_get_error_ptr(png))) *slot = msg;
  longjmp(png_jmpbuf(png), 1);
}

void ignore_png_warning(png_structp, png_const_charp) {}

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  std::FILE* fp = nullptr;
  ~PngReader() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    if (fp) std::fclose(fp);
  }
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  std::FILE* fp = nullptr;
  ~PngWriter() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    if (fp) std::fclose(fp);
  }
};

}  // namespace

ImageU8 load_png(const std::string& path) {
  ImageU8 img;
  std::vector<png_bytep> rows;
  std::string err;
  PngReader r;
  r.fp = std::fopen(path.c_str(), "rb");
  if (!r.fp) throw std::runtime_error("cannot open " + path);
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, capture_png_error,
                                 ignore_png_warning);
  if (r.png) r.info = png_create_info_struct(r.png);
  if (!r.png || !r.info) throw std::runtime_error("png: allocation failed reading " + path);
  if (setjmp(png_jmpbuf(r.png))) {
    throw std::runtime_error("ill-formed PNG file " + path + (err.empty() ? "" : ": " + err));
  }

  png_init_io(r.png, r.fp);
  png_read_info(r.png, r.info);
  const png_byte color_type = png_get_color_type(r.png, r.info);
  const png_byte bit_depth = png_get_bit_depth(r.png, r.info);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(r.png);
  if (bit_depth == 16) png_set_strip_16(r.png);
  if ((color_type & PNG_COLOR_MASK_ALPHA) != 0) png_set_strip_alpha(r.png);
  png_read_update_info(r.png, r.info);

  const int h = static_cast<int>(png_get_image_height(r.png, r.info));
  const int w = static_cast<int>(png_get_image_width(r.png, r.info));
  const int c = png_get_channels(r.png, r.info);
  if (c != 1 && c != 3) {
    throw std::runtime_error("png: unsupported channel layout in " + path);
  }
  img = ImageU8(h, w, c);
  rows.resize(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) {
    rows[static_cast<std::size_t>(y)] = img.pixels.data() + static_cast<std::size_t>(y) * w * c;
  }
  png_read_image(r.png, rows.data());
  png_read_end(r.png, nullptr);
  return img;
}

void save_png(const std::string& path, const ImageU8& image) {
  if (image.height < 1 || image.width < 1 || (image.channels != 1 && image.channels != 3)) {
    fail("save_png: empty or ill-formed image for " + path);
  }
  std::vector<png_bytep> rows;
  std::string err;
  PngWriter wtr;
  wtr.fp = std::fopen(path.c_str(), "wb");
  if (!wtr.fp) throw std::runtime_error("cannot write " + path);
  wtr.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, capture_png_error,
                                    ignore_png_warning);
  if (wtr.png) wtr.info = png_create_info_struct(wtr.png);
  if (!wtr.png || !wtr.info) throw std::runtime_error("png: allocation failed writing " + path);
  if (setjmp(png_jmpbuf(wtr.png))) {
    throw std::runtime_error("png: failed writing " + path + (err.empty() ? "" : ": " + err));
  }

  png_init_io(wtr.png, wtr.fp);
  png_set_IHDR(wtr.png, wtr.info, static_cast<png_uint_32>(image.width),
               static_cast<png_uint_32>(image.height), 8,
               image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(wtr.png, wtr.info);
  rows.resize(static_cast<std::size_t>(image.height));
  for (int y = 0; y < image.height; ++y) {
    rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(
        image.pixels.data() + static_cast<std::size_t>(y) * image.width * image.channels);
  }
  png_write_image(wtr.png, rows.data());
  png_write_end(wtr.png, nullptr);
}

BinaryMask to_mask(const ImageU8& image, int threshold) {
  if (threshold < 1 || threshold > 255) fail("to_mask: threshold must be in [1, 255]");
  BinaryMask mask(image.height, image.width);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      mask.at(y, x) = image.at(y, x, 0) >= threshold ? 1 : 0;
    }
  }
  return mask;
}

ImageU8 mask_to_image(const BinaryMask& mask) {
  ImageU8 img(mask.height, mask.width, 1);
  for (std::size_t i = 0; i < mask.values.size(); ++i) {
    img.pixels[i] = mask.values[i] ? 255 : 0;
  }
  return img;
}

Tensor image_to_tensor(const ImageU8& image) {
  if (image.height < 1) fail("image_to_tensor: empty image");
  Tensor t = Tensor::zeros({1, image.channels, image.height, image.width});
  float* p = t.ptr();
  for (int c = 0; c < image.channels; ++c) {
    for (int y = 0; y < image.height; ++y) {
      for (int x = 0; x < image.width; ++x) {
        *p++ = static_cast<float>(image.at(y, x, c)) / 255.0f;
      }
    }
  }
  return t;
}

Tensor mask_to_tensor(const BinaryMask& mask) {
  Tensor t = Tensor::zeros({1, 1, mask.height, mask.width});
  float* p = t.ptr();
  for (std::size_t i = 0; i < mask.values.size(); ++i) p[i] = mask.values[i] ? 1.0f : 0.0f;
  return t;
}

ImageU8 prob_to_image(const Tensor& prob) {
  if (prob.ndim() != 4 || prob.dim(0) != 1 || prob.dim(1) != 1) {
    fail("prob_to_image: expected a 1x1xHxW probability map, got " + shape_str(prob.shape()));
  }
  ImageU8 img(prob.dim(2), prob.dim(3), 1);
  const float* p = prob.cptr();
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const long v = std::lround(static_cast<double>(p[i]) * 255.0);
    img.pixels[i] = static_cast<std::uint8_t>(std::min(255L, std::max(0L, v)));
  }
  return img;
}

ImageU8 reflect_pad(const ImageU8& image, int pad_bottom, int pad_right) {
  if (pad_bottom < 0 || pad_right < 0) fail("reflect_pad: negative padding");
  if (pad_bottom == 0 && pad_right == 0) return image;
  ImageU8 out(image.height + pad_bottom, image.width + pad_right, image.channels);
  for (int y = 0; y < out.height; ++y) {
    int sy = y < image.height ? y : 2 * image.height - 2 - y;
    sy = std::max(0, sy);
    for (int x = 0; x < out.width; ++x) {
      int sx = x < image.width ? x : 2 * image.width - 2 - x;
      sx = std::max(0, sx);
      for (int c = 0; c < image.channels; ++c) out.at(y, x, c) = image.at(sy, sx, c);
    }
  }
  return out;
}

ImageU8 resize_image(const ImageU8& image, int height, int width) {
  const Tensor resized = bilinear_resize(image_to_tensor(image), height, width);
  ImageU8 out(height, width, image.channels);
  const float* p = resized.cptr();
  for (int c = 0; c < image.channels; ++c) {
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const long v = std::lround(static_cast<double>(*p++) * 255.0);
        out.at(y, x, c) = static_cast<std::uint8_t>(std::min(255L, std::max(0L, v)));
      }
    }
  }
  return out;
}

}  // namespace histoseg
