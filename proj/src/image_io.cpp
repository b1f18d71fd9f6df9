#include "aelab/image_io.hpp"

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>

#include "aelab/errors.hpp"

namespace aelab {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

RgbImage read_png(const std::filesystem::path& path) {
  auto file = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng initialisation failed for " + path.string());
  }
  RgbImage image;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_gray_to_rgb(png);
  }
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  image.width = png_get_image_width(png, info);
  image.height = png_get_image_height(png, info);
  const bool wide = png_get_bit_depth(png, info) == 16;
  image.max_value = wide ? 65535 : 255;
  const std::size_t stride = png_get_rowbytes(png, info);
  std::vector<png_byte> buffer(stride * image.height);
  rows.resize(image.height);
  for (std::size_t y = 0; y < image.height; ++y) rows[y] = buffer.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  image.pixels.resize(image.width * image.height * 3);
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    const std::size_t y = i / (image.width * 3);
    const std::size_t off = i % (image.width * 3);
    const png_byte* row = buffer.data() + y * stride;
    image.pixels[i] = wide ? static_cast<std::uint16_t>((row[2 * off] << 8) | row[2 * off + 1])
                           : row[off];
  }
  return image;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  std::longjmp(reinterpret_cast<JpegError*>(cinfo->err)->jump, 1);
}

RgbImage read_jpeg(const std::filesystem::path& path) {
  auto file = open_file(path, "rb");
  jpeg_decompress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  RgbImage image;
  std::vector<std::uint8_t> buffer;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("corrupt JPEG: " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  image.width = cinfo.output_width;
  image.height = cinfo.output_height;
  buffer.resize(image.width * image.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = buffer.data() + static_cast<std::size_t>(cinfo.output_scanline) * image.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  image.pixels.assign(buffer.begin(), buffer.end());
  return image;
}

}  // namespace

RgbImage read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  unsigned char magic[8] = {};
  in.read(reinterpret_cast<char*>(magic), sizeof magic);
  if (in.gcount() >= 8 && png_sig_cmp(magic, 0, 8) == 0) return read_png(path);
  if (in.gcount() >= 3 && magic[0] == 0xFF && magic[1] == 0xD8 && magic[2] == 0xFF) {
    return read_jpeg(path);
  }
  throw IoError("not a PNG or JPEG file: " + path.string());
}

void write_png(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != width * height * 3 || width == 0 || height == 0) {
    throw ShapeError("write_png: buffer does not match " + std::to_string(width) + "x" +
                     std::to_string(height));
  }
  auto file = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (info == nullptr) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng initialisation failed for " + path.string());
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(rgb.data() + y * width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(file.get()) != 0) throw IoError("failed writing " + path.string());
}

Tensor to_tensor(const RgbImage& image, std::size_t height, std::size_t width) {
  if (image.width == 0 || image.height == 0 || height == 0 || width == 0) {
    throw ShapeError("to_tensor: empty image or target size");
  }
  // Corner-aligned source coordinate of each output row/column.
  auto axis = [](std::size_t out, std::size_t in) {
    std::vector<std::pair<std::size_t, double>> taps(out);
    for (std::size_t i = 0; i < out; ++i) {
      const double pos = out == 1 ? 0.0
                                  : static_cast<double>(i) * static_cast<double>(in - 1) /
                                        static_cast<double>(out - 1);
      const auto lo = std::min(static_cast<std::size_t>(pos), in - 1);
      taps[i] = {lo, pos - static_cast<double>(lo)};
    }
    return taps;
  };
  const auto rows = axis(height, image.height);
  const auto cols = axis(width, image.width);
  const double scale = 1.0 / static_cast<double>(image.max_value);
  Tensor out(Shape{3, height, width});
  auto d = out.mutable_data();
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      const auto [y0, fy] = rows[y];
      const std::size_t y1 = std::min(y0 + 1, image.height - 1);
      for (std::size_t x = 0; x < width; ++x) {
        const auto [x0, fx] = cols[x];
        const std::size_t x1 = std::min(x0 + 1, image.width - 1);
        // Lerp form keeps constant regions exact.
        const double a = image.at(y0, x0, c), b = image.at(y0, x1, c);
        const double p = image.at(y1, x0, c), q = image.at(y1, x1, c);
        const double top = a + (b - a) * fx;
        const double bottom = p + (q - p) * fx;
        d[(c * height + y) * width + x] = static_cast<float>((top + (bottom - top) * fy) * scale);
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> quantize_rgb(const Tensor& chw) {
  if (chw.rank() != 3 || chw.dim(0) != 3) {
    throw ShapeError("quantize_rgb: expected 3×H×W, got " + shape_str(chw.shape()));
  }
  const std::size_t h = chw.dim(1), w = chw.dim(2);
  const auto d = chw.data();
  std::vector<std::uint8_t> rgb(h * w * 3);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < h * w; ++i) {
      const double v = std::clamp(static_cast<double>(d[c * h * w + i]), 0.0, 1.0);
      rgb[i * 3 + c] = static_cast<std::uint8_t>(std::lround(255.0 * v));
    }
  }
  return rgb;
}

void write_png(const std::filesystem::path& path, const Tensor& chw) {
  write_png(path, chw.dim(2), chw.dim(1), quantize_rgb(chw));
}

}  // namespace aelab
