#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "aelab/tensor.hpp"

namespace aelab {

/// Decoded RGB raster, row-major H×W×3, samples in [0, max_value].
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::uint32_t max_value = 255;  // 255, or 65535 for 16-bit PNG
  std::vector<std::uint16_t> pixels;

  std::uint16_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }
};

/// Decodes PNG or JPEG by content. Alpha is dropped, grayscale and palette
/// images are expanded to RGB. Throws IoError naming the path.
RgbImage read_image(const std::filesystem::path& path);

/// 8-bit RGB PNG, row-major H×W×3. Output bytes depend only on the input.
void write_png(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& rgb);

/// Bilinear resize with corner-aligned sampling, then division by max_value.
/// Returns 3×H×W in [0, 1].
Tensor to_tensor(const RgbImage& image, std::size_t height, std::size_t width);

/// Quantises a 3×H×W tensor with values in [0, 1] to round(255·x).
std::vector<std::uint8_t> quantize_rgb(const Tensor& chw);
void write_png(const std::filesystem::path& path, const Tensor& chw);

}  // namespace aelab
