#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "thermoviab/thermal_io.hpp"

namespace thermoviab {

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;
};

/// Fixed "iron" palette: black -> purple -> red -> yellow -> white, u in [0, 1].
std::array<std::uint8_t, 3> iron_palette(double u);

/// Fixed diverging palette for signed differences: blue -> white -> red, u in [-1, 1].
std::array<std::uint8_t, 3> diverging_palette(double u);

struct TemperatureWindow {
  double lo = 0.0;
  double hi = 1.0;
};

/// Per-case window: min/max of the precool frame, so renders of different
/// frames of one case share a color scale.
TemperatureWindow case_window(const ThermalSequence& sequence);

/// Invalid pixels (mask 0) render as mid grey.
RgbImage colorize(const ThermalFrame& frame, TemperatureWindow window, const RoiMask* valid = nullptr);

/// a - b mapped symmetrically onto ±range (range <= 0 picks max |a - b|).
RgbImage difference_image(const ThermalFrame& a, const ThermalFrame& b, double range = 0.0,
                          const RoiMask* valid = nullptr);

/// PNG encoding/decoding through libpng. Throws IoFailure.
std::string encode_png(const RgbImage& image);
RgbImage decode_png(std::string_view bytes);

/// RFC 4648 base64 (for embedding renders in JSON).
std::string base64_encode(std::string_view bytes);
/// Inverse of base64_encode. Throws InvalidSpec on malformed input.
std::string base64_decode(std::string_view text);

}  // namespace thermoviab
