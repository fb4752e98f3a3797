#pragma once

#include <span>
#include <string_view>

namespace yearspan {

// Event nouns for the duration templates (120 entries).
std::span<const std::string_view> event_nouns();
// Priced goods for the price template (20 entries).
std::span<const std::string_view> luxury_nouns();

}  // namespace yearspan
