#pragma once

#include <array>
#include <cstdint>
#include <string>

namespace sqat {

// Built-in 5x7 dot-matrix glyphs for 'a'..'z' and space. Each glyph is seven
// rows of five bits, bit 4 being the leftmost column.
struct Font5x7 {
  static constexpr int kWidth = 5;
  static constexpr int kHeight = 7;

  static const std::array<std::uint8_t, kHeight>& glyph(char c);

  // Number of set bits in a glyph.
  static int ink_pixels(char c);
  // Sum of ink_pixels over all characters of the text.
  static int nominal_ink_count(const std::string& text);
};

}  // namespace sqat
