#pragma once

#include "yearspan/tensor.hpp"
#include "yearspan/tokenizer.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace yearspan {

class Gpt2Model;

enum class Relation { Greater, Less, Exact, None };
enum class NounPool { None, Event, Luxury };

std::string_view to_string(Relation r);
std::span<const std::string_view> nouns_for(NounPool pool);

struct RenderedPrompt {
  std::string text;
  std::size_t yy_byte = 0;  // byte offset of the two YY digits
  int answer = -1;          // expected two-digit continuation for Relation::Exact
};

// A prompt family with noun, century (XX) and start-year (YY) slots.
struct TaskTemplate {
  std::string id;
  std::string pattern;  // human-readable form, e.g. "The {noun} lasted from the year {XX}{YY} to the year {XX}"
  NounPool pool = NounPool::None;
  Relation relation = Relation::Greater;
  std::vector<int> centuries;
  std::function<std::optional<RenderedPrompt>(std::string_view noun, int xx, int yy, const Tokenizer&)> render;
};

// The main year-span template followed by the generalization variants.
const std::vector<TaskTemplate>& templates();
// Throws std::invalid_argument listing the known ids.
const TaskTemplate& find_template(std::string_view id);
std::vector<std::string> template_ids();

struct YearSpanExample {
  std::string template_id;
  std::string noun;
  int xx = 0;
  int yy = 0;
  int answer = -1;
  std::string prompt;
  std::vector<TokenId> tokens;  // starts with the end-of-text token
  std::size_t yy_pos = 0;
  std::size_t end_pos = 0;

  friend bool operator==(const YearSpanExample&, const YearSpanExample&) = default;
};

struct ExamplePair {
  YearSpanExample clean;
  YearSpanExample corrupt;  // same noun and century, YY replaced by the corrupt year (01)

  friend bool operator==(const ExamplePair&, const ExamplePair&) = default;
};

struct PairedDataset {
  std::string template_id;
  std::uint64_t seed = 0;
  std::vector<ExamplePair> examples;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
  friend bool operator==(const PairedDataset&, const PairedDataset&) = default;
};

// Builds one example, or nullopt when the tokenization invariants fail:
// YY must be its own two-digit token directly after the century token and the
// prompt must end on the century token.
std::optional<YearSpanExample> instantiate(const TaskTemplate& tmpl, const Tokenizer& tok, std::string_view noun,
                                           int xx, int yy);

// Start years usable for a template and century: validly tokenized, not the
// century's lowest or highest validly tokenized YY, within 02..98, and with a
// well-formed corrupt twin of the same length.
std::vector<int> valid_start_years(const TaskTemplate& tmpl, const Tokenizer& tok, int xx);
// Year used for the corrupt twin: 01, or the lowest validly tokenized YY when
// 01 merges with the century (e.g. " 701"). -1 when nothing tokenizes.
int corrupt_year(const TaskTemplate& tmpl, const Tokenizer& tok, int xx);

struct CenturyYear {
  int xx = 0;
  int yy = 0;
  int corrupt_yy = 1;
  friend bool operator==(const CenturyYear&, const CenturyYear&) = default;
};
std::vector<CenturyYear> year_pool(const TaskTemplate& tmpl, const Tokenizer& tok);

enum class SamplingMode {
  Random,    // uniform nouns and uniform (XX, YY) from the pool
  Balanced,  // n spread as evenly as possible across YY 02..98
};

PairedDataset generate(const TaskTemplate& tmpl, const Tokenizer& tok, std::size_t n, std::uint64_t seed,
                       SamplingMode mode = SamplingMode::Random);
PairedDataset generate(const Tokenizer& tok, std::size_t n, std::uint64_t seed,
                       SamplingMode mode = SamplingMode::Random);

// ---------------------------------------------------------------------------
// Metrics

// Full-vocabulary softmax restricted to the tokens "00".."99".
using YearProbs = std::array<double, 100>;
YearProbs year_probabilities(std::span<const float> end_logits, const Tokenizer& tok);

double prob_diff(const YearProbs& p, int yy);
double cutoff_sharpness(const YearProbs& p, int yy);
double prob_diff(std::span<const float> end_logits, int yy, const Tokenizer& tok);
double cutoff_sharpness(std::span<const float> end_logits, int yy, const Tokenizer& tok);

struct Summary {
  double mean = 0.0;
  double sd = 0.0;  // population standard deviation
};
Summary summarize(std::span<const double> values);

struct Metrics {
  std::vector<double> prob_diff;
  std::vector<double> cutoff_sharpness;

  Summary prob_diff_summary() const { return summarize(prob_diff); }
  Summary cutoff_summary() const { return summarize(cutoff_sharpness); }
  std::size_t size() const { return prob_diff.size(); }
};

Metrics score(std::span<const YearProbs> probs, std::span<const int> start_years);
// End-position year distribution of every clean example.
std::vector<YearProbs> clean_year_probs(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data);
Metrics evaluate(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data);
std::vector<int> start_years(const PairedDataset& data);

struct Heatmap {
  Tensor values;            // 97 x 100, row r is YY = r + 2
  std::vector<int> counts;  // examples per row
};
Heatmap heatmap(std::span<const YearProbs> probs, std::span<const int> start_years);
Heatmap heatmap(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data);

// Fraction of the top-k two-digit year predictions that exceed YY, averaged
// over examples and ranks.
double topk_validity(std::span<const YearProbs> probs, std::span<const int> start_years, std::size_t k);
double topk_validity(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data, std::size_t k);

struct ValidXXMass {
  double within_top = 0.0;  // valid mass / mass of the top tokens
  double of_total = 0.0;    // valid mass among the top tokens / 1
  double top_mass = 0.0;    // mass covered by the top tokens
};
// Whether a continuation token is a valid end of "... to the year" given
// the start year XXYY.
bool is_valid_xx_continuation(std::string_view token_text, int xx, int yy);
ValidXXMass valid_xx_mass(std::span<const float> logits, const Tokenizer& tok, int xx, int yy, std::size_t top = 100);
// Runs each clean prompt without its final century token.
ValidXXMass valid_xx_mass(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                          std::size_t top = 100);

// ---------------------------------------------------------------------------
// JSON-lines interchange: one object per example, clean then corrupt.

void save_jsonl(const PairedDataset& data, const std::filesystem::path& path);
PairedDataset load_jsonl(const std::filesystem::path& path);

}  // namespace yearspan
