#pragma once

// Minimal RGB raster support for crop extraction before remote encoding.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "gwvlm/geometry.hpp"

namespace gwvlm {

inline constexpr int kEncoderInputSize = 224;

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  std::uint8_t at(int x, int y, int c) const {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
};

// PNG (any bit depth/colour type, converted to 8-bit RGB) or binary PPM.
Image load_image(const std::filesystem::path& path);

// Reads only the header; PNG or PPM.
std::pair<int, int> image_size(const std::filesystem::path& path);

// Pixels covering the box: floor of the low corner to ceil of the high one.
Image crop_image(const Image& image, const BBox& box);

// Bilinear with pixel-center alignment.
Image resize_bilinear(const Image& image, int width, int height);

std::string encode_png(const Image& image);
void write_png(const std::filesystem::path& path, const Image& image);

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

}  // namespace gwvlm
