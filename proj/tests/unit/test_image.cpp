#include <gtest/gtest.h>

#include <filesystem>

#include "mmchat/errors.hpp"
#include "mmchat/image.hpp"

using namespace mmchat;

namespace {

Image gradient_image(std::size_t w, std::size_t h) {
  Image img = Image::filled(w, h, 0, 0, 0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      auto* p = img.pixel(x, y);
      p[0] = static_cast<std::uint8_t>(x * 7);
      p[1] = static_cast<std::uint8_t>(y * 11);
      p[2] = static_cast<std::uint8_t>(x + y);
    }
  }
  return img;
}

}  // namespace

TEST(Image, PngRoundTrip) {
  const auto img = gradient_image(13, 9);
  EXPECT_EQ(decode_png(encode_png(img)), img);
  const auto path = std::filesystem::temp_directory_path() / "mmchat_png_roundtrip.png";
  write_png(path, img);
  EXPECT_EQ(read_png(path), img);
  EXPECT_EQ(png_dimensions(path), (std::pair<std::size_t, std::size_t>{13, 9}));
  std::filesystem::remove(path);
}

TEST(Image, DecodeRejectsGarbage) {
  const std::vector<std::uint8_t> junk{1, 2, 3, 4};
  EXPECT_THROW(decode_png(junk), InputError);
}

TEST(Image, Base64RoundTrip) {
  for (std::size_t n = 0; n < 10; ++n) {
    std::vector<std::uint8_t> bytes(n);
    for (std::size_t i = 0; i < n; ++i) bytes[i] = static_cast<std::uint8_t>(i * 37 + 1);
    EXPECT_EQ(base64_decode(base64_encode(bytes)), bytes);
  }
  EXPECT_EQ(base64_encode(std::vector<std::uint8_t>{'M', 'a'}), "TWE=");
  EXPECT_THROW(base64_decode("@@@"), InputError);
}

TEST(Image, PadToSquareCentresContent) {
  const auto img = Image::filled(4, 2, 255, 255, 255);
  const auto sq = pad_to_square(img);
  ASSERT_EQ(sq.width, 4u);
  ASSERT_EQ(sq.height, 4u);
  EXPECT_EQ(sq.pixel(0, 0)[0], 0);
  EXPECT_EQ(sq.pixel(0, 1)[0], 255);
  EXPECT_EQ(sq.pixel(3, 2)[0], 255);
  EXPECT_EQ(sq.pixel(3, 3)[0], 0);
}

TEST(Image, PreprocessSameSizeIsExactScaling) {
  const auto img = gradient_image(8, 8);
  const auto t = preprocess_image(img, 8);
  ASSERT_EQ(t.shape(), (Shape{3, 8, 8}));
  for (std::size_t y = 0; y < 8; ++y) {
    for (std::size_t x = 0; x < 8; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_FLOAT_EQ(t.data()[(c * 8 + y) * 8 + x], img.pixel(x, y)[c] / 255.0f);
      }
    }
  }
}

TEST(Image, PreprocessResizesAnyGeometryIntoUnitRange) {
  const auto t = preprocess_image(gradient_image(37, 21), 16);
  ASSERT_EQ(t.shape(), (Shape{3, 16, 16}));
  for (float v : t.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_THROW(preprocess_image(Image{}, 16), InputError);
}
