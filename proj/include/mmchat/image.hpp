#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mmchat/tensor.hpp"

namespace mmchat {

// 8-bit interleaved RGB raster.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  static Image filled(std::size_t width, std::size_t height, std::uint8_t r, std::uint8_t g,
                      std::uint8_t b);
  std::uint8_t* pixel(std::size_t x, std::size_t y) { return rgb.data() + (y * width + x) * 3; }
  const std::uint8_t* pixel(std::size_t x, std::size_t y) const {
    return rgb.data() + (y * width + x) * 3;
  }
  friend bool operator==(const Image&, const Image&) = default;
};

std::vector<std::uint8_t> encode_png(const Image& image);
Image decode_png(std::span<const std::uint8_t> bytes);
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);
// Width and height from the IHDR chunk, without decoding pixels.
std::pair<std::size_t, std::size_t> png_dimensions(const std::filesystem::path& path);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

// Pads the shorter side symmetrically with black to a square, resizes
// bilinearly (half-pixel centres) to `size` x `size`, and scales to [0, 1].
// Returns a [3, size, size] channel-major tensor.
Tensor preprocess_image(const Image& image, std::size_t size);

// Symmetric black padding to a square; exposed for tests.
Image pad_to_square(const Image& image);

}  // namespace mmchat
