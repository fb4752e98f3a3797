#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace yearspan {

using TokenId = std::int32_t;

class TokenizerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ByteSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  friend bool operator==(const ByteSpan&, const ByteSpan&) = default;
};

struct TokenSequence {
  std::vector<TokenId> ids;
  std::vector<ByteSpan> offsets;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
};

// GPT-2 byte-level BPE. Immutable after load; encode/decode are pure.
class Tokenizer {
 public:
  static constexpr std::size_t kGpt2VocabSize = 50257;

  // Reads the published encoder.json / vocab.bpe pair.
  static Tokenizer load(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt);
  // Looks in $YEARSPAN_TOKENIZER_DIR, then the build-time data directory.
  static Tokenizer load_default();
  static std::filesystem::path default_directory();

  TokenSequence encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  std::size_t vocab_size() const { return id_to_token_.size(); }
  TokenId end_of_text() const { return end_of_text_; }

  // Byte-level vocabulary entry for an id (e.g. "Ġ17" for " 17").
  const std::string& token_string(TokenId id) const;
  // Raw bytes represented by one id.
  std::string token_text(TokenId id) const;
  // Id of a raw string that is exactly one vocabulary entry.
  std::optional<TokenId> single_token(std::string_view raw_text) const;

  // Ids of the space-less two-digit tokens "00".."99", indexed by value.
  const std::array<TokenId, 100>& two_digit_ids() const { return two_digit_ids_; }

  // True iff " CCYY" encodes to a single token.
  bool is_single_token_year(int century, int yy) const;

  // Pre-tokenization step exposed for testing: GPT-2's regex split.
  static std::vector<ByteSpan> pretokenize(std::string_view text);

 private:
  Tokenizer() = default;
  std::vector<std::string> bpe(const std::string& word) const;

  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> merge_ranks_;
  std::array<std::string, 256> byte_to_unicode_{};
  std::unordered_map<char32_t, unsigned char> unicode_to_byte_;
  std::array<TokenId, 100> two_digit_ids_{};
  TokenId end_of_text_ = -1;
};

}  // namespace yearspan
