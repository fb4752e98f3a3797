#include "yearspan/tokenizer.hpp"

#include "yearspan/unicode.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>

namespace yearspan {

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TokenizerError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// The reversible byte <-> printable-codepoint table used by GPT-2.
std::array<char32_t, 256> byte_codepoints() {
  std::array<char32_t, 256> table{};
  std::array<bool, 256> direct{};
  auto mark = [&](int lo, int hi) {
    for (int b = lo; b <= hi; ++b) direct[static_cast<std::size_t>(b)] = true;
  };
  mark('!', '~');
  mark(0xA1, 0xAC);
  mark(0xAE, 0xFF);
  char32_t next = 256;
  for (std::size_t b = 0; b < 256; ++b) table[b] = direct[b] ? static_cast<char32_t>(b) : next++;
  return table;
}

bool is_contraction_at(const std::vector<unicode::DecodedCodepoint>& cps, std::size_t i, std::size_t& len) {
  if (cps[i].value != U'\'' || i + 1 >= cps.size()) return false;
  const char32_t a = cps[i + 1].value;
  if (a == U's' || a == U't' || a == U'm' || a == U'd') {
    len = 2;
    return true;
  }
  if (i + 2 < cps.size()) {
    const char32_t b = cps[i + 2].value;
    if ((a == U'r' && b == U'e') || (a == U'v' && b == U'e') || (a == U'l' && b == U'l')) {
      len = 3;
      return true;
    }
  }
  return false;
}

}  // namespace

std::vector<ByteSpan> Tokenizer::pretokenize(std::string_view text) {
  // 's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
  const auto cps = unicode::decode_utf8(text);
  const std::size_t n = cps.size();
  auto letter = [&](std::size_t k) { return unicode::is_letter(cps[k].value); };
  auto number = [&](std::size_t k) { return unicode::is_number(cps[k].value); };
  auto space = [&](std::size_t k) { return unicode::is_space(cps[k].value); };
  auto other = [&](std::size_t k) { return !space(k) && !letter(k) && !number(k); };

  std::vector<ByteSpan> pieces;
  std::size_t i = 0;
  auto emit = [&](std::size_t from, std::size_t to) {
    const std::size_t begin = cps[from].byte_offset;
    const std::size_t end = cps[to - 1].byte_offset + cps[to - 1].byte_length;
    pieces.push_back({begin, end});
    i = to;
  };

  while (i < n) {
    std::size_t len = 0;
    if (is_contraction_at(cps, i, len)) {
      emit(i, i + len);
      continue;
    }
    const std::size_t body = (cps[i].value == U' ' && i + 1 < n) ? i + 1 : i;
    bool matched = false;
    for (auto cls : {+[](bool l, bool, bool) { return l; }, +[](bool, bool nb, bool) { return nb; },
                     +[](bool, bool, bool o) { return o; }}) {
      auto test = [&](std::size_t k) { return cls(letter(k), number(k), other(k)); };
      if (body < n && test(body)) {
        std::size_t j = body;
        while (j < n && test(j)) ++j;
        emit(i, j);
        matched = true;
        break;
      }
    }
    if (matched) continue;

    // Whitespace run; leave the last space for a following non-space token.
    std::size_t j = i;
    while (j < n && space(j)) ++j;
    if (j > i) {
      if (j < n && j - i >= 2) {
        emit(i, j - 1);
      } else {
        emit(i, j);
      }
      continue;
    }
    emit(i, i + 1);
  }
  return pieces;
}

Tokenizer Tokenizer::load(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt) {
  Tokenizer tok;
  const auto codepoints = byte_codepoints();
  for (std::size_t b = 0; b < 256; ++b) {
    tok.byte_to_unicode_[b] = unicode::encode_utf8(codepoints[b]);
    tok.unicode_to_byte_[codepoints[b]] = static_cast<unsigned char>(b);
  }

  nlohmann::json vocab;
  try {
    vocab = nlohmann::json::parse(read_file(vocab_json));
  } catch (const nlohmann::json::exception& e) {
    throw TokenizerError("malformed vocabulary " + vocab_json.string() + ": " + e.what());
  }
  if (!vocab.is_object()) throw TokenizerError("vocabulary must be a JSON object");
  tok.id_to_token_.assign(vocab.size(), std::string());
  std::vector<bool> seen(vocab.size(), false);
  for (const auto& [token, id_json] : vocab.items()) {
    const auto id = id_json.get<std::int64_t>();
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size() || seen[static_cast<std::size_t>(id)]) {
      throw TokenizerError("vocabulary ids are not a bijection onto 0..N-1 (offending id " + std::to_string(id) + ")");
    }
    seen[static_cast<std::size_t>(id)] = true;
    tok.id_to_token_[static_cast<std::size_t>(id)] = token;
    tok.token_to_id_.emplace(token, static_cast<TokenId>(id));
  }

  std::istringstream merges(read_file(merges_txt));
  std::string line;
  int rank = 0;
  while (std::getline(merges, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.rfind("#version", 0) == 0) continue;
    const auto sep = line.find(' ');
    if (sep == std::string::npos || line.find(' ', sep + 1) != std::string::npos) {
      throw TokenizerError("malformed merge line: " + line);
    }
    tok.merge_ranks_.emplace(line, rank++);
  }

  for (int v = 0; v < 100; ++v) {
    char digits[3] = {static_cast<char>('0' + v / 10), static_cast<char>('0' + v % 10), 0};
    auto it = tok.token_to_id_.find(digits);
    if (it == tok.token_to_id_.end()) throw TokenizerError(std::string("vocabulary lacks two-digit token ") + digits);
    tok.two_digit_ids_[static_cast<std::size_t>(v)] = it->second;
  }
  if (auto it = tok.token_to_id_.find("<|endoftext|>"); it != tok.token_to_id_.end()) {
    tok.end_of_text_ = it->second;
  }
  return tok;
}

std::filesystem::path Tokenizer::default_directory() {
  if (const char* env = std::getenv("YEARSPAN_TOKENIZER_DIR"); env && *env) return env;
  return std::filesystem::path(YEARSPAN_DEFAULT_DATA_DIR) / "gpt2";
}

Tokenizer Tokenizer::load_default() {
  const auto dir = default_directory();
  return load(dir / "encoder.json", dir / "vocab.bpe");
}

std::vector<std::string> Tokenizer::bpe(const std::string& word) const {
  // Split into codepoint symbols (each is one byte-level character).
  std::vector<std::string> symbols;
  for (const auto& cp : unicode::decode_utf8(word)) symbols.push_back(word.substr(cp.byte_offset, cp.byte_length));
  if (symbols.size() < 2) return symbols;

  std::string key;
  while (true) {
    int best_rank = std::numeric_limits<int>::max();
    std::size_t best = symbols.size();
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      key.assign(symbols[i]).append(" ").append(symbols[i + 1]);
      auto it = merge_ranks_.find(key);
      if (it != merge_ranks_.end() && it->second < best_rank) {
        best_rank = it->second;
        best = i;
      }
    }
    if (best == symbols.size()) break;
    const std::string left = symbols[best];
    const std::string right = symbols[best + 1];
    std::vector<std::string> merged;
    merged.reserve(symbols.size());
    for (std::size_t i = 0; i < symbols.size();) {
      if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
        merged.push_back(left + right);
        i += 2;
      } else {
        merged.push_back(symbols[i]);
        ++i;
      }
    }
    symbols = std::move(merged);
    if (symbols.size() == 1) break;
  }
  return symbols;
}

TokenSequence Tokenizer::encode(std::string_view text) const {
  TokenSequence out;
  for (const auto& piece : pretokenize(text)) {
    std::string word;
    for (std::size_t b = piece.begin; b < piece.end; ++b) word += byte_to_unicode_[static_cast<unsigned char>(text[b])];
    std::size_t cursor = piece.begin;
    for (const auto& sym : bpe(word)) {
      auto it = token_to_id_.find(sym);
      if (it == token_to_id_.end()) throw TokenizerError("BPE produced a symbol missing from the vocabulary: " + sym);
      const std::size_t bytes = unicode::decode_utf8(sym).size();
      out.ids.push_back(it->second);
      out.offsets.push_back({cursor, cursor + bytes});
      cursor += bytes;
    }
  }
  return out;
}

const std::string& Tokenizer::token_string(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw TokenizerError("token id out of range: " + std::to_string(id));
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::string Tokenizer::token_text(TokenId id) const {
  const auto& s = token_string(id);
  std::string out;
  for (const auto& cp : unicode::decode_utf8(s)) {
    auto it = unicode_to_byte_.find(cp.value);
    if (it == unicode_to_byte_.end()) throw TokenizerError("vocabulary entry outside the byte alphabet: " + s);
    out.push_back(static_cast<char>(it->second));
  }
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += token_text(id);
  return out;
}

std::optional<TokenId> Tokenizer::single_token(std::string_view raw_text) const {
  std::string word;
  for (char c : raw_text) word += byte_to_unicode_[static_cast<unsigned char>(c)];
  auto it = token_to_id_.find(word);
  if (it == token_to_id_.end()) return std::nullopt;
  return it->second;
}

bool Tokenizer::is_single_token_year(int century, int yy) const {
  if (century < 10 || century > 99 || yy < 0 || yy > 99) {
    throw std::out_of_range("is_single_token_year: century/yy out of range");
  }
  char buf[8];
  std::snprintf(buf, sizeof buf, " %02d%02d", century, yy);
  return encode(buf).size() == 1;
}

}  // namespace yearspan
