#include "thermoviab/render.hpp"

#include <algorithm>
#include <cmath>

#include <openssl/evp.h>
#include <png.h>

#include "thermoviab/error.hpp"

namespace thermoviab {

namespace {

struct Stop {
  double u;
  double r, g, b;
};

std::array<std::uint8_t, 3> interpolate(const Stop* stops, std::size_t n, double u) {
  u = std::clamp(u, stops[0].u, stops[n - 1].u);
  std::size_t k = 1;
  while (k < n - 1 && u > stops[k].u) ++k;
  const Stop& a = stops[k - 1];
  const Stop& b = stops[k];
  const double t = (u - a.u) / (b.u - a.u);
  auto channel = [t](double x, double y) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(x + t * (y - x), 0.0, 255.0)));
  };
  return {channel(a.r, b.r), channel(a.g, b.g), channel(a.b, b.b)};
}

constexpr Stop kIron[] = {{0.00, 0, 0, 0},       {0.25, 84, 16, 138},   {0.50, 196, 38, 84},
                          {0.75, 250, 148, 20},  {1.00, 255, 255, 230}};
constexpr Stop kDiverging[] = {{-1.0, 33, 102, 172}, {0.0, 247, 247, 247}, {1.0, 178, 24, 43}};

void put(RgbImage& img, std::size_t i, std::array<std::uint8_t, 3> c) {
  img.rgb[3 * i] = c[0];
  img.rgb[3 * i + 1] = c[1];
  img.rgb[3 * i + 2] = c[2];
}

}  // namespace

std::array<std::uint8_t, 3> iron_palette(double u) { return interpolate(kIron, std::size(kIron), u); }

std::array<std::uint8_t, 3> diverging_palette(double u) {
  return interpolate(kDiverging, std::size(kDiverging), u);
}

TemperatureWindow case_window(const ThermalSequence& sequence) {
  const auto& t = sequence.precool.temps;
  if (t.empty()) fail(ErrorCode::DimensionMismatch, "empty precool frame");
  const auto [lo, hi] = std::minmax_element(t.begin(), t.end());
  TemperatureWindow w{*lo, *hi};
  if (w.hi - w.lo < 1e-6) w.hi = w.lo + 1.0;
  return w;
}

RgbImage colorize(const ThermalFrame& frame, TemperatureWindow window, const RoiMask* valid) {
  RgbImage img{frame.width, frame.height, std::vector<std::uint8_t>(frame.size() * 3)};
  const double span = window.hi - window.lo;
  for (std::size_t i = 0; i < frame.size(); ++i) {
    if (valid && !valid->bits[i]) {
      put(img, i, {128, 128, 128});
      continue;
    }
    put(img, i, iron_palette((frame.temps[i] - window.lo) / span));
  }
  return img;
}

RgbImage difference_image(const ThermalFrame& a, const ThermalFrame& b, double range, const RoiMask* valid) {
  if (a.width != b.width || a.height != b.height) fail(ErrorCode::DimensionMismatch, "difference of unequal frames");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = static_cast<double>(a.temps[i]) - b.temps[i];
  if (range <= 0.0) {
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!valid || valid->bits[i]) range = std::max(range, std::abs(d[i]));
    }
    if (range <= 0.0) range = 1.0;
  }
  RgbImage img{a.width, a.height, std::vector<std::uint8_t>(a.size() * 3)};
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (valid && !valid->bits[i]) {
      put(img, i, {128, 128, 128});
      continue;
    }
    put(img, i, diverging_palette(d[i] / range));
  }
  return img;
}

std::string encode_png(const RgbImage& image) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, image.rgb.data(), 0, nullptr)) {
    fail(ErrorCode::IoFailure, std::string("png encode: ") + png.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, image.rgb.data(), 0, nullptr)) {
    fail(ErrorCode::IoFailure, std::string("png encode: ") + png.message);
  }
  out.resize(size);
  return out;
}

RgbImage decode_png(std::string_view bytes) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size())) {
    fail(ErrorCode::IoFailure, std::string("png decode: ") + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  RgbImage img{static_cast<int>(png.width), static_cast<int>(png.height), {}};
  img.rgb.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, img.rgb.data(), 0, nullptr)) {
    fail(ErrorCode::IoFailure, std::string("png decode: ") + png.message);
  }
  return img;
}

std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) fail(ErrorCode::InvalidSpec, "base64 length is not a multiple of 4");
  std::string out(3 * (text.size() / 4) + 1, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) fail(ErrorCode::InvalidSpec, "malformed base64");
  // EVP_DecodeBlock keeps the zero bytes produced by '=' padding.
  std::size_t size = static_cast<std::size_t>(n);
  if (!text.empty() && text.back() == '=') --size;
  if (text.size() > 1 && text[text.size() - 2] == '=') --size;
  out.resize(size);
  return out;
}

}  // namespace thermoviab
