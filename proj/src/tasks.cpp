#include "yearspan/tasks.hpp"

#include "yearspan/model.hpp"
#include "yearspan/parallel.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>

namespace yearspan {

namespace {

// Unbiased draw from [0, bound) using only the engine's raw output, so
// datasets are identical across standard library implementations.
std::size_t draw(std::mt19937_64& rng, std::size_t bound) {
  const std::uint64_t b = bound;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % b;
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return static_cast<std::size_t>(v % b);
}

void check_year(int yy, int lo, int hi, const char* what) {
  if (yy < lo || yy > hi) {
    throw std::out_of_range(std::string(what) + ": start year " + std::to_string(yy) + " outside " +
                            std::to_string(lo) + ".." + std::to_string(hi));
  }
}

std::vector<double> softmax_double(std::span<const float> logits) {
  const float mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - mx);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

ExamplePair make_pair(const TaskTemplate& tmpl, const Tokenizer& tok, std::string_view noun, int xx, int yy,
                      int corrupt_yy) {
  auto clean = instantiate(tmpl, tok, noun, xx, yy);
  auto corrupt = instantiate(tmpl, tok, noun, xx, corrupt_yy);
  if (!clean || !corrupt || clean->tokens.size() != corrupt->tokens.size() || clean->yy_pos != corrupt->yy_pos) {
    throw std::logic_error("template " + tmpl.id + " cannot form an aligned pair for noun '" + std::string(noun) +
                           "', XX=" + std::to_string(xx) + ", YY=" + std::to_string(yy));
  }
  return {std::move(*clean), std::move(*corrupt)};
}

}  // namespace

std::optional<YearSpanExample> instantiate(const TaskTemplate& tmpl, const Tokenizer& tok, std::string_view noun,
                                           int xx, int yy) {
  auto rendered = tmpl.render(noun, xx, yy, tok);
  if (!rendered) return std::nullopt;
  const auto seq = tok.encode(rendered->text);
  const std::string century = std::to_string(xx);

  std::size_t yy_index = seq.size();
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.offsets[i].begin == rendered->yy_byte && seq.offsets[i].end == rendered->yy_byte + 2) yy_index = i;
  }
  if (yy_index == 0 || yy_index == seq.size()) return std::nullopt;
  const std::string before = tok.token_text(seq.ids[yy_index - 1]);
  if (before != century && before != " " + century) return std::nullopt;
  if (tok.token_text(seq.ids.back()) != " " + century) return std::nullopt;

  YearSpanExample ex;
  ex.template_id = tmpl.id;
  ex.noun = std::string(noun);
  ex.xx = xx;
  ex.yy = yy;
  ex.answer = rendered->answer;
  ex.prompt = std::move(rendered->text);
  if (tok.end_of_text() < 0) throw TokenizerError("vocabulary has no end-of-text token");
  ex.tokens.reserve(seq.size() + 1);
  ex.tokens.push_back(tok.end_of_text());
  ex.tokens.insert(ex.tokens.end(), seq.ids.begin(), seq.ids.end());
  ex.yy_pos = yy_index + 1;
  ex.end_pos = ex.tokens.size() - 1;
  return ex;
}

namespace {

struct CenturyScan {
  std::vector<int> tokenized;
  std::vector<std::size_t> lengths;
};

CenturyScan scan_century(const TaskTemplate& tmpl, const Tokenizer& tok, int xx) {
  const std::string_view probe = nouns_for(tmpl.pool).front();
  CenturyScan s;
  for (int yy = 0; yy <= 99; ++yy) {
    if (auto ex = instantiate(tmpl, tok, probe, xx, yy)) {
      s.tokenized.push_back(yy);
      s.lengths.push_back(ex->tokens.size());
    }
  }
  return s;
}

int corrupt_year(const CenturyScan& s) {
  if (s.tokenized.empty()) return -1;
  if (std::find(s.tokenized.begin(), s.tokenized.end(), 1) != s.tokenized.end()) return 1;
  return s.tokenized.front();
}

std::vector<int> start_years_of(const TaskTemplate& tmpl, const Tokenizer& tok, int xx, const CenturyScan& s) {
  std::vector<int> out;
  const int c = corrupt_year(s);
  if (s.tokenized.size() < 3 || c < 0) return out;
  const auto twin = instantiate(tmpl, tok, nouns_for(tmpl.pool).front(), xx, c);
  if (!twin) return out;
  for (std::size_t i = 1; i + 1 < s.tokenized.size(); ++i) {
    const int yy = s.tokenized[i];
    if (yy < 2 || yy > 98 || yy <= c || s.lengths[i] != twin->tokens.size()) continue;
    out.push_back(yy);
  }
  return out;
}

}  // namespace

int corrupt_year(const TaskTemplate& tmpl, const Tokenizer& tok, int xx) {
  return corrupt_year(scan_century(tmpl, tok, xx));
}

std::vector<int> valid_start_years(const TaskTemplate& tmpl, const Tokenizer& tok, int xx) {
  return start_years_of(tmpl, tok, xx, scan_century(tmpl, tok, xx));
}

std::vector<CenturyYear> year_pool(const TaskTemplate& tmpl, const Tokenizer& tok) {
  std::vector<CenturyYear> pool;
  for (int xx : tmpl.centuries) {
    const auto scan = scan_century(tmpl, tok, xx);
    const int corrupt = corrupt_year(scan);
    for (int yy : start_years_of(tmpl, tok, xx, scan)) pool.push_back({xx, yy, corrupt});
  }
  return pool;
}

PairedDataset generate(const TaskTemplate& tmpl, const Tokenizer& tok, std::size_t n, std::uint64_t seed,
                       SamplingMode mode) {
  if (n == 0) throw std::invalid_argument("generate: n must be at least 1");
  const auto pool = year_pool(tmpl, tok);
  if (pool.empty()) throw std::runtime_error("template " + tmpl.id + " has no validly tokenized start years");
  const auto nouns = nouns_for(tmpl.pool);

  PairedDataset data;
  data.template_id = tmpl.id;
  data.seed = seed;
  data.examples.reserve(n);
  std::mt19937_64 rng(seed);

  if (mode == SamplingMode::Random) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto noun = nouns[draw(rng, nouns.size())];
      const auto cy = pool[draw(rng, pool.size())];
      data.examples.push_back(make_pair(tmpl, tok, noun, cy.xx, cy.yy, cy.corrupt_yy));
    }
    return data;
  }

  std::map<int, std::vector<CenturyYear>> centuries_by_year;
  for (const auto& cy : pool) centuries_by_year[cy.yy].push_back(cy);
  const std::size_t years = centuries_by_year.size();
  const std::size_t base = n / years, extra = n % years;
  std::size_t index = 0;
  for (const auto& [yy, centuries] : centuries_by_year) {
    // Spread the remainder evenly over the year range.
    const bool bonus = extra > 0 && (index * extra) / years != ((index + 1) * extra) / years;
    const std::size_t count = base + (bonus ? 1 : 0);
    for (std::size_t c = 0; c < count; ++c) {
      const auto noun = nouns[draw(rng, nouns.size())];
      const auto& cy = centuries[draw(rng, centuries.size())];
      data.examples.push_back(make_pair(tmpl, tok, noun, cy.xx, yy, cy.corrupt_yy));
    }
    ++index;
  }
  return data;
}

PairedDataset generate(const Tokenizer& tok, std::size_t n, std::uint64_t seed, SamplingMode mode) {
  return generate(find_template("main"), tok, n, seed, mode);
}

std::vector<int> start_years(const PairedDataset& data) {
  std::vector<int> out;
  out.reserve(data.size());
  for (const auto& p : data.examples) out.push_back(p.clean.yy);
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

YearProbs year_probabilities(std::span<const float> end_logits, const Tokenizer& tok) {
  const auto& ids = tok.two_digit_ids();
  for (TokenId id : ids) {
    if (static_cast<std::size_t>(id) >= end_logits.size()) throw ShapeError("year_probabilities: logits too short");
  }
  const float mx = *std::max_element(end_logits.begin(), end_logits.end());
  double total = 0.0;
  for (float l : end_logits) total += std::exp(static_cast<double>(l) - mx);
  YearProbs p{};
  for (std::size_t y = 0; y < 100; ++y) p[y] = std::exp(static_cast<double>(end_logits[ids[y]]) - mx) / total;
  return p;
}

double prob_diff(const YearProbs& p, int yy) {
  check_year(yy, 0, 99, "prob_diff");
  double greater = 0.0, rest = 0.0;
  for (int y = 0; y < 100; ++y) (y > yy ? greater : rest) += p[static_cast<std::size_t>(y)];
  return greater - rest;
}

double cutoff_sharpness(const YearProbs& p, int yy) {
  check_year(yy, 1, 98, "cutoff_sharpness");
  return p[static_cast<std::size_t>(yy + 1)] - p[static_cast<std::size_t>(yy - 1)];
}

double prob_diff(std::span<const float> end_logits, int yy, const Tokenizer& tok) {
  return prob_diff(year_probabilities(end_logits, tok), yy);
}

double cutoff_sharpness(std::span<const float> end_logits, int yy, const Tokenizer& tok) {
  return cutoff_sharpness(year_probabilities(end_logits, tok), yy);
}

Summary summarize(std::span<const double> values) {
  Summary s;
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.sd = std::sqrt(ss / static_cast<double>(values.size()));
  return s;
}

Metrics score(std::span<const YearProbs> probs, std::span<const int> years) {
  if (probs.size() != years.size()) throw std::invalid_argument("score: probabilities and start years differ in count");
  Metrics m;
  m.prob_diff.reserve(probs.size());
  m.cutoff_sharpness.reserve(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    m.prob_diff.push_back(prob_diff(probs[i], years[i]));
    m.cutoff_sharpness.push_back(cutoff_sharpness(probs[i], years[i]));
  }
  return m;
}

std::vector<YearProbs> clean_year_probs(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data) {
  std::vector<YearProbs> out(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    const auto run = model.forward_with_cache(data.examples[i].clean.tokens, {}, true);
    out[i] = year_probabilities(run.logits.row(0), tok);
  });
  return out;
}

Metrics evaluate(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data) {
  const auto probs = clean_year_probs(model, tok, data);
  return score(probs, start_years(data));
}

Heatmap heatmap(std::span<const YearProbs> probs, std::span<const int> years) {
  if (probs.size() != years.size()) throw std::invalid_argument("heatmap: probabilities and start years differ");
  if (probs.empty()) throw std::invalid_argument("heatmap: empty dataset");
  Heatmap h{Tensor({97, 100}), std::vector<int>(97, 0)};
  std::vector<double> acc(97 * 100, 0.0);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    check_year(years[i], 2, 98, "heatmap");
    const auto r = static_cast<std::size_t>(years[i] - 2);
    ++h.counts[r];
    for (std::size_t y = 0; y < 100; ++y) acc[r * 100 + y] += probs[i][y];
  }
  for (std::size_t r = 0; r < 97; ++r) {
    if (h.counts[r] == 0) continue;
    for (std::size_t y = 0; y < 100; ++y) h.values.at(r, y) = static_cast<float>(acc[r * 100 + y] / h.counts[r]);
  }
  return h;
}

Heatmap heatmap(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data) {
  const auto probs = clean_year_probs(model, tok, data);
  return heatmap(probs, start_years(data));
}

double topk_validity(std::span<const YearProbs> probs, std::span<const int> years, std::size_t k) {
  if (k == 0 || k > 100) throw std::invalid_argument("topk_validity: k must be in 1..100");
  if (probs.size() != years.size() || probs.empty()) throw std::invalid_argument("topk_validity: bad inputs");
  std::size_t valid = 0;
  std::array<int, 100> order{};
  for (std::size_t i = 0; i < probs.size(); ++i) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return probs[i][static_cast<std::size_t>(a)] > probs[i][static_cast<std::size_t>(b)];
    });
    for (std::size_t r = 0; r < k; ++r) valid += order[r] > years[i] ? 1 : 0;
  }
  return static_cast<double>(valid) / static_cast<double>(probs.size() * k);
}

double topk_validity(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data, std::size_t k) {
  const auto probs = clean_year_probs(model, tok, data);
  return topk_validity(probs, start_years(data), k);
}

bool is_valid_xx_continuation(std::string_view text, int xx, int yy) {
  if (text.size() < 2 || text[0] != ' ') return false;
  const auto digits = text.substr(1);
  if (!std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) return false;
  const int value = std::stoi(std::string(digits));
  if (digits.size() == 2) return value >= xx;
  if (digits.size() == 4) return value >= xx * 100 + yy;
  return false;
}

ValidXXMass valid_xx_mass(std::span<const float> logits, const Tokenizer& tok, int xx, int yy, std::size_t top) {
  if (top == 0 || top > logits.size()) throw std::invalid_argument("valid_xx_mass: bad top count");
  const auto p = softmax_double(logits);
  std::vector<std::size_t> idx(p.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(top), idx.end(),
                    [&](std::size_t a, std::size_t b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
  ValidXXMass m;
  double valid = 0.0;
  for (std::size_t r = 0; r < top; ++r) {
    m.top_mass += p[idx[r]];
    if (is_valid_xx_continuation(tok.token_text(static_cast<TokenId>(idx[r])), xx, yy)) valid += p[idx[r]];
  }
  m.within_top = valid / m.top_mass;
  m.of_total = valid;
  return m;
}

ValidXXMass valid_xx_mass(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data, std::size_t top) {
  if (data.empty()) throw std::invalid_argument("valid_xx_mass: empty dataset");
  std::vector<ValidXXMass> per(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    const auto& ex = data.examples[i].clean;
    const std::vector<TokenId> prefix(ex.tokens.begin(), ex.tokens.begin() + static_cast<std::ptrdiff_t>(ex.end_pos));
    const auto run = model.forward_with_cache(prefix, {}, true);
    per[i] = valid_xx_mass(run.logits.row(0), tok, ex.xx, ex.yy, top);
  });
  ValidXXMass mean;
  for (const auto& m : per) {
    mean.within_top += m.within_top;
    mean.of_total += m.of_total;
    mean.top_mass += m.top_mass;
  }
  const auto n = static_cast<double>(per.size());
  mean.within_top /= n;
  mean.of_total /= n;
  mean.top_mass /= n;
  return mean;
}

// ---------------------------------------------------------------------------
// JSON lines

namespace {

nlohmann::json to_json(const YearSpanExample& ex, std::string_view role, std::uint64_t seed) {
  return {{"template_id", ex.template_id}, {"role", role},        {"seed", seed},
          {"noun", ex.noun},               {"xx", ex.xx},         {"yy", ex.yy},
          {"answer", ex.answer},           {"prompt", ex.prompt}, {"token_ids", ex.tokens},
          {"yy_pos", ex.yy_pos},           {"end_pos", ex.end_pos}};
}

YearSpanExample from_json(const nlohmann::json& j) {
  YearSpanExample ex;
  ex.template_id = j.at("template_id").get<std::string>();
  ex.noun = j.at("noun").get<std::string>();
  ex.xx = j.at("xx").get<int>();
  ex.yy = j.at("yy").get<int>();
  ex.answer = j.value("answer", -1);
  ex.prompt = j.at("prompt").get<std::string>();
  ex.tokens = j.at("token_ids").get<std::vector<TokenId>>();
  ex.yy_pos = j.at("yy_pos").get<std::size_t>();
  ex.end_pos = j.at("end_pos").get<std::size_t>();
  if (ex.tokens.empty() || ex.end_pos != ex.tokens.size() - 1 || ex.yy_pos >= ex.end_pos) {
    throw std::runtime_error("dataset line has inconsistent positions");
  }
  return ex;
}

}  // namespace

void save_jsonl(const PairedDataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& pair : data.examples) {
    out << to_json(pair.clean, "clean", data.seed).dump() << '\n';
    out << to_json(pair.corrupt, "corrupt", data.seed).dump() << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

PairedDataset load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  PairedDataset data;
  std::string line;
  std::optional<YearSpanExample> pending;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    const auto role = j.value("role", std::string());
    auto ex = from_json(j);
    if (role == "clean") {
      if (pending) throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": clean line without twin");
      data.seed = j.value("seed", std::uint64_t{0});
      data.template_id = ex.template_id;
      pending = std::move(ex);
    } else if (role == "corrupt") {
      if (!pending || pending->tokens.size() != ex.tokens.size() || pending->yy_pos != ex.yy_pos) {
        throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": corrupt line not aligned");
      }
      data.examples.push_back({std::move(*pending), std::move(ex)});
      pending.reset();
    } else {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": unknown role '" + role + "'");
    }
  }
  if (pending) throw std::runtime_error(path.string() + ": trailing clean line without twin");
  return data;
}

}  // namespace yearspan
