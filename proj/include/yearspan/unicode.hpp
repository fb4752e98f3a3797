#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace yearspan::unicode {

struct CodepointRange {
  char32_t first;
  char32_t last;
};

bool is_letter(char32_t cp);
bool is_number(char32_t cp);
bool is_space(char32_t cp);

struct DecodedCodepoint {
  char32_t value;
  std::size_t byte_offset;
  std::size_t byte_length;
};

// Invalid sequences decode byte-by-byte to U+FFFD so segmentation stays total.
std::vector<DecodedCodepoint> decode_utf8(std::string_view text);
std::string encode_utf8(char32_t cp);

namespace detail {
extern const CodepointRange k_letter_ranges[];
extern const std::size_t k_letter_count;
extern const CodepointRange k_number_ranges[];
extern const std::size_t k_number_count;
extern const CodepointRange k_space_ranges[];
extern const std::size_t k_space_count;
}  // namespace detail

}  // namespace yearspan::unicode
