#include "sqat/font5x7.hpp"

#include <bit>
#include <stdexcept>

namespace sqat {

namespace {

using Glyph = std::array<std::uint8_t, Font5x7::kHeight>;

constexpr Glyph kSpace = {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00};

constexpr std::array<Glyph, 26> kLower = {{
    {0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F},  // a
    {0x10, 0x10, 0x16, 0x19, 0x11, 0x19, 0x16},  // b
    {0x00, 0x00, 0x0E, 0x10, 0x10, 0x11, 0x0E},  // c
    {0x01, 0x01, 0x0D, 0x13, 0x11, 0x13, 0x0D},  // d
    {0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E},  // e
    {0x06, 0x09, 0x08, 0x1C, 0x08, 0x08, 0x08},  // f
    {0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x0E},  // g
    {0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11},  // h
    {0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E},  // i
    {0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0C},  // j
    {0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12},  // k
    {0x0C, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E},  // l
    {0x00, 0x00, 0x1A, 0x15, 0x15, 0x11, 0x11},  // m
    {0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11},  // n
    {0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E},  // o
    {0x00, 0x00, 0x1E, 0x11, 0x1E, 0x10, 0x10},  // p
    {0x00, 0x00, 0x0F, 0x11, 0x0F, 0x01, 0x01},  // q
    {0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10},  // r
    {0x00, 0x00, 0x0F, 0x10, 0x0E, 0x01, 0x1E},  // s
    {0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06},  // t
    {0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D},  // u
    {0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04},  // v
    {0x00, 0x00, 0x11, 0x11, 0x15, 0x15, 0x0A},  // w
    {0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11},  // x
    {0x00, 0x11, 0x11, 0x0F, 0x01, 0x11, 0x0E},  // y
    {0x00, 0x00, 0x1F, 0x02, 0x04, 0x08, 0x1F},  // z
}};

}  // namespace

const std::array<std::uint8_t, Font5x7::kHeight>& Font5x7::glyph(char c) {
  if (c == ' ') return kSpace;
  if (c >= 'a' && c <= 'z') return kLower[static_cast<size_t>(c - 'a')];
  throw std::invalid_argument(std::string("no glyph for character '") + c +
                              "'");
}

int Font5x7::ink_pixels(char c) {
  int n = 0;
  for (std::uint8_t row : glyph(c)) n += std::popcount(row);
  return n;
}

int Font5x7::nominal_ink_count(const std::string& text) {
  int n = 0;
  for (char c : text) n += ink_pixels(c);
  return n;
}

}  // namespace sqat
