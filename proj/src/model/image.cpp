#include "mmchat/image.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "mmchat/errors.hpp"

namespace mmchat {

Image Image::filled(std::size_t width, std::size_t height, std::uint8_t r, std::uint8_t g,
                    std::uint8_t b) {
  Image img;
  img.width = width;
  img.height = height;
  img.rgb.resize(width * height * 3);
  for (std::size_t i = 0; i < width * height; ++i) {
    img.rgb[i * 3] = r;
    img.rgb[i * 3 + 1] = g;
    img.rgb[i * 3 + 2] = b;
  }
  return img;
}

std::vector<std::uint8_t> encode_png(const Image& image) {
  if (image.width == 0 || image.height == 0 || image.rgb.size() != image.width * image.height * 3) {
    throw InputError("encode_png: malformed image");
  }
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, image.rgb.data(), 0, nullptr)) {
    throw IoError(std::string("encode_png: ") + png.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, image.rgb.data(), 0, nullptr)) {
    throw IoError(std::string("encode_png: ") + png.message);
  }
  out.resize(size);
  return out;
}

Image decode_png(std::span<const std::uint8_t> bytes) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size())) {
    throw InputError(std::string("decode_png: ") + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  Image img;
  img.width = png.width;
  img.height = png.height;
  img.rgb.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, img.rgb.data(), 0, nullptr)) {
    png_image_free(&png);
    throw InputError(std::string("decode_png: ") + png.message);
  }
  return img;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  const auto bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

Image read_png(const std::filesystem::path& path) { return decode_png(read_bytes(path)); }

std::pair<std::size_t, std::size_t> png_dimensions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::uint8_t head[24] = {};
  in.read(reinterpret_cast<char*>(head), sizeof(head));
  static constexpr std::uint8_t kSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (in.gcount() != sizeof(head) || std::memcmp(head, kSig, 8) != 0 ||
      std::memcmp(head + 12, "IHDR", 4) != 0) {
    throw InputError(path.string() + " is not a PNG file");
  }
  auto be32 = [&](int at) {
    return (std::size_t{head[at]} << 24) | (std::size_t{head[at + 1]} << 16) |
           (std::size_t{head[at + 2]} << 8) | std::size_t{head[at + 3]};
  };
  return {be32(16), be32(20)};
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  std::string clean;
  clean.reserve(text.size());
  for (char c : text) {
    if (c != '\n' && c != '\r' && c != ' ') clean.push_back(c);
  }
  if (clean.size() % 4 != 0) throw InputError("base64 payload length is not a multiple of 4");
  std::vector<std::uint8_t> out(clean.size() / 4 * 3);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()),
                                static_cast<int>(clean.size()));
  if (n < 0) throw InputError("malformed base64 payload");
  std::size_t len = static_cast<std::size_t>(n);
  // EVP_DecodeBlock keeps the zero bytes that padding stands for.
  if (!clean.empty() && clean.back() == '=') --len;
  if (clean.size() > 1 && clean[clean.size() - 2] == '=') --len;
  out.resize(len);
  return out;
}

Image pad_to_square(const Image& image) {
  if (image.width == 0 || image.height == 0) throw InputError("image has zero pixels");
  const std::size_t side = std::max(image.width, image.height);
  if (image.width == image.height) return image;
  Image out = Image::filled(side, side, 0, 0, 0);
  const std::size_t x0 = (side - image.width) / 2;
  const std::size_t y0 = (side - image.height) / 2;
  for (std::size_t y = 0; y < image.height; ++y) {
    std::memcpy(out.pixel(x0, y0 + y), image.pixel(0, y), image.width * 3);
  }
  return out;
}

Tensor preprocess_image(const Image& image, std::size_t size) {
  if (image.width == 0 || image.height == 0) throw InputError("image has zero pixels");
  if (image.rgb.size() != image.width * image.height * 3) {
    throw InputError("image buffer does not match its dimensions");
  }
  if (size == 0) throw InputError("target size must be positive");
  const Image square = pad_to_square(image);
  const std::size_t src = square.width;
  std::vector<float> out(3 * size * size);
  const double ratio = static_cast<double>(src) / static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y) {
    const double sy = std::clamp((static_cast<double>(y) + 0.5) * ratio - 0.5, 0.0,
                                 static_cast<double>(src - 1));
    const std::size_t y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, src - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < size; ++x) {
      const double sx = std::clamp((static_cast<double>(x) + 0.5) * ratio - 0.5, 0.0,
                                   static_cast<double>(src - 1));
      const std::size_t x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, src - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = square.pixel(x0, y0)[c] * (1 - fx) + square.pixel(x1, y0)[c] * fx;
        const double bot = square.pixel(x0, y1)[c] * (1 - fx) + square.pixel(x1, y1)[c] * fx;
        out[(c * size + y) * size + x] = static_cast<float>((top * (1 - fy) + bot * fy) / 255.0);
      }
    }
  }
  return Tensor::from_data({3, size, size}, std::move(out));
}

}  // namespace mmchat
