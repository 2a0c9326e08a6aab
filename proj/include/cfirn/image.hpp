#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace cfirn {

/// Single-channel raster, row-major, values nominally in [0, 1]
/// (0 = background, 1 = ink).
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int w, int h, double fill = 0.0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {}

  double& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Decodes any PNG libpng understands to 8-bit gray, mapped to [0, 1].
Image decode_png(std::span<const std::uint8_t> bytes);
Image read_png(const std::filesystem::path& path);
/// 8-bit grayscale PNG; values are clamped to [0, 1] and rounded.
std::vector<std::uint8_t> encode_png(const Image& image);
void write_png(const std::filesystem::path& path, const Image& image);

/// Bilinear resample with half-pixel centers (same convention as the
/// network's resize op).
Image resize_bilinear(const Image& image, int width, int height);
Image flip_horizontal(const Image& image);

/// Square preprocessing shared by training, evaluation and the service:
/// bilinear resize to side x side and clamp to [0, 1].
Image preprocess(const Image& image, int side);

}  // namespace cfirn
