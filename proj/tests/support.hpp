#pragma once

#include "yearspan/model.hpp"
#include "yearspan/tasks.hpp"
#include "yearspan/tokenizer.hpp"

#include <gtest/gtest.h>

#include <filesystem>

namespace yearspan::testing {

inline const Tokenizer& tokenizer() {
  static const Tokenizer tok = Tokenizer::load_default();
  return tok;
}

inline std::filesystem::path tiny_dir() { return YEARSPAN_TINY_REF_DIR; }

// Randomly initialised 12-layer GPT-2 with narrow width, written by the
// reference oracle.
inline const Gpt2Model& tiny_model() {
  static const Gpt2Model model = Gpt2Model::load(tiny_dir());
  return model;
}

inline PairedDataset small_dataset(std::size_t n = 12, std::uint64_t seed = 3) {
  return generate(tokenizer(), n, seed, SamplingMode::Balanced);
}

}  // namespace yearspan::testing
