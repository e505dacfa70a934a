#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>

namespace sonn::font {

inline constexpr std::size_t kGlyphWidth = 5;
inline constexpr std::size_t kGlyphHeight = 7;

using Glyph = std::array<std::uint8_t, kGlyphHeight>;

/// Built-in 5x7 bitmap for ASCII letters, digits, space and basic
/// punctuation; nullptr when `ch` has no glyph.
const Glyph* find_glyph(char32_t ch);

bool ink(const Glyph& glyph, std::size_t row, std::size_t col);

std::u32string supported_characters();

}  // namespace sonn::font
