#include "yearspan/nouns.hpp"
#include "yearspan/tasks.hpp"

#include <cstdio>
#include <stdexcept>

namespace yearspan {

namespace {

std::string two_digits(int v) {
  char buf[4];
  std::snprintf(buf, sizeof buf, "%02d", v);
  return buf;
}

// Expands {noun}, {XX} and {YY}; {YY} must occur exactly once.
RenderedPrompt render_pattern(std::string_view pattern, std::string_view noun, int xx, int yy) {
  RenderedPrompt out;
  bool seen_yy = false;
  for (std::size_t i = 0; i < pattern.size();) {
    if (pattern.compare(i, 6, "{noun}") == 0) {
      out.text += noun;
      i += 6;
    } else if (pattern.compare(i, 4, "{XX}") == 0) {
      out.text += std::to_string(xx);
      i += 4;
    } else if (pattern.compare(i, 4, "{YY}") == 0) {
      if (seen_yy) throw std::logic_error("template has more than one {YY} slot");
      seen_yy = true;
      out.yy_byte = out.text.size();
      out.text += two_digits(yy);
      i += 4;
    } else {
      out.text += pattern[i++];
    }
  }
  if (!seen_yy) throw std::logic_error("template lacks a {YY} slot");
  return out;
}

TaskTemplate simple(std::string id, std::string pattern, NounPool pool, Relation rel, std::vector<int> centuries) {
  TaskTemplate t;
  t.id = std::move(id);
  t.pattern = std::move(pattern);
  t.pool = pool;
  t.relation = rel;
  t.centuries = std::move(centuries);
  t.render = [p = t.pattern](std::string_view noun, int xx, int yy, const Tokenizer&) -> std::optional<RenderedPrompt> {
    if (yy < 0 || yy > 99) return std::nullopt;
    return render_pattern(p, noun, xx, yy);
  };
  return t;
}

// Five evenly spaced years ending at XXYY. The step is the smallest value
// >= 2 that keeps every listed year split into two tokens.
std::optional<RenderedPrompt> render_arithmetic(int xx, int yy, const Tokenizer& tok) {
  const int last = xx * 100 + yy;
  for (int step = 2; yy + step <= 99; ++step) {
    bool ok = true;
    std::string text;
    std::size_t yy_byte = 0;
    for (int i = 4; i >= 0 && ok; --i) {
      const int year = last - i * step;
      if (year < 1000) {
        ok = false;
        break;
      }
      const std::string piece = (i == 4 ? "" : " ") + std::to_string(year);
      if (tok.encode(piece).size() != 2) ok = false;
      if (i != 4) text += ",";
      if (i == 0) yy_byte = text.size() + piece.size() - 2;
      text += piece;
    }
    if (!ok) continue;
    text += ", " + std::to_string(xx);
    return RenderedPrompt{text, yy_byte, yy + step};
  }
  return std::nullopt;
}

std::vector<TaskTemplate> build_templates() {
  std::vector<TaskTemplate> out;
  out.push_back(simple("main", "The {noun} lasted from the year {XX}{YY} to the year {XX}", NounPool::Event,
                       Relation::Greater, {11, 12, 13, 14, 15, 16, 17}));
  out.push_back(simple("started-ended", "The {noun} started in the year {XX}{YY} and ended in the year {XX}",
                       NounPool::Event, Relation::Greater, {17}));
  out.push_back(simple("price", "The price of that {noun} ranges from $ {XX}{YY} to $ {XX}", NounPool::Luxury,
                       Relation::Greater, {17}));
  out.push_back(simple("sequence", "1599, 1607, 1633, 1679, {XX}{YY}, {XX}", NounPool::None, Relation::Greater, {17}));
  out.push_back(simple("reversed", "The {noun} ended in the year {XX}{YY} and started in the year {XX}",
                       NounPool::Event, Relation::Less, {17}));
  out.push_back(simple("bc", "The {noun} lasted from the year {XX}{YY} BC to the year {XX}", NounPool::Event,
                       Relation::Less, {7}));
  out.push_back(simple("smaller", "{XX}{YY} is smaller than {XX}", NounPool::None, Relation::Less, {17}));
  out.push_back(simple("decreasing", "1799, 1753, 1733, 1701, {XX}{YY}, {XX}", NounPool::None, Relation::Less, {16}));

  TaskTemplate arith;
  arith.id = "arithmetic";
  arith.pattern = "{XX}{YY}-4s, {XX}{YY}-3s, {XX}{YY}-2s, {XX}{YY}-s, {XX}{YY}, {XX}";
  arith.pool = NounPool::None;
  arith.relation = Relation::Exact;
  arith.centuries = {17};
  arith.render = [](std::string_view, int xx, int yy, const Tokenizer& tok) { return render_arithmetic(xx, yy, tok); };
  out.push_back(std::move(arith));
  return out;
}

}  // namespace

std::string_view to_string(Relation r) {
  switch (r) {
    case Relation::Greater: return "greater";
    case Relation::Less: return "less";
    case Relation::Exact: return "exact";
    case Relation::None: return "none";
  }
  return "?";
}

std::span<const std::string_view> nouns_for(NounPool pool) {
  static constexpr std::string_view k_empty[] = {""};
  switch (pool) {
    case NounPool::Event: return event_nouns();
    case NounPool::Luxury: return luxury_nouns();
    case NounPool::None: return k_empty;
  }
  return k_empty;
}

const std::vector<TaskTemplate>& templates() {
  static const std::vector<TaskTemplate> all = build_templates();
  return all;
}

std::vector<std::string> template_ids() {
  std::vector<std::string> ids;
  for (const auto& t : templates()) ids.push_back(t.id);
  return ids;
}

const TaskTemplate& find_template(std::string_view id) {
  for (const auto& t : templates()) {
    if (t.id == id) return t;
  }
  std::string known;
  for (const auto& t : templates()) known += (known.empty() ? "" : ", ") + t.id;
  throw std::invalid_argument("unknown template '" + std::string(id) + "'; known: " + known);
}

}  // namespace yearspan
