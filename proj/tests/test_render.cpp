#include <doctest.h>

#include "thermoviab/render.hpp"

using namespace thermoviab;

TEST_SUITE("render") {
  TEST_CASE("palette endpoints and clamping") {
    CHECK(iron_palette(0.0) == std::array<std::uint8_t, 3>{0, 0, 0});
    CHECK(iron_palette(1.0) == std::array<std::uint8_t, 3>{255, 255, 230});
    CHECK(iron_palette(-3.0) == iron_palette(0.0));
    CHECK(iron_palette(7.0) == iron_palette(1.0));
    CHECK(diverging_palette(0.0) == std::array<std::uint8_t, 3>{247, 247, 247});
  }

  TEST_CASE("the window is the precool range") {
    ThermalSequence seq;
    seq.precool = ThermalFrame(3, 2, -30.0, 31.0f);
    seq.precool.at(1, 2) = 35.5f;
    const TemperatureWindow w = case_window(seq);
    CHECK(w.lo == 31.0);
    CHECK(w.hi == 35.5);
  }

  TEST_CASE("PNG round trip keeps size and pixels") {
    ThermalFrame f(7, 5, 0.0);
    for (std::size_t i = 0; i < f.size(); ++i) f.temps[i] = static_cast<float>(30.0 + 0.1 * static_cast<double>(i));
    RoiMask valid(7, 5, 1);
    valid.at(0, 0) = 0;
    const RgbImage img = colorize(f, {30.0, 33.4}, &valid);
    CHECK(img.rgb[0] == 128);
    const std::string png = encode_png(img);
    CHECK(png.substr(1, 3) == "PNG");
    const RgbImage back = decode_png(png);
    CHECK(back.width == 7);
    CHECK(back.height == 5);
    CHECK(back.rgb == img.rgb);
  }

  TEST_CASE("difference image is symmetric around white") {
    ThermalFrame a(2, 1, 0.0, 30.0f), b(2, 1, 0.0, 30.0f);
    a.temps[0] = 31.0f;
    b.temps[1] = 31.0f;
    const RgbImage d = difference_image(a, b);
    CHECK(d.rgb[0] == 178);  // +range -> red end
    CHECK(d.rgb[3] == 33);   // -range -> blue end
  }

  TEST_CASE("base64") {
    CHECK(base64_encode("") == "");
    CHECK(base64_encode("f") == "Zg==");
    CHECK(base64_encode("foobar") == "Zm9vYmFy");
    for (const std::string& s : std::vector<std::string>{"", "f", "fo", "foo", "foob", std::string("\0\xff\x10", 3)}) {
      CHECK(base64_decode(base64_encode(s)) == s);
    }
    CHECK_THROWS(base64_decode("abc"));
  }
}
