#include "yearspan/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>

namespace yearspan {

namespace {

using Json = nlohmann::ordered_json;

double points(double v) { return 100.0 * v; }

std::vector<int> circuit_mlps_after(int layer) {
  std::vector<int> out;
  for (int l = std::max(8, layer + 1); l <= 11; ++l) out.push_back(l);
  return out;
}

Json summary_json(const Summary& s) { return {{"mean", s.mean}, {"sd", s.sd}}; }

Json metrics_json(const Metrics& m) {
  return {{"prob_diff", summary_json(m.prob_diff_summary())}, {"cutoff_sharpness", summary_json(m.cutoff_summary())}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Composite measurements

ReplayGraph mlp_direct_graph(int layer, const ModelConfig& config) {
  ReplayGraph g;
  const int logits = g.logits();
  g.add_edge(g.add_node(ComponentId::mlp(layer), true), logits, kAllChannels, Positions::End);
  g.finalize(config);
  return g;
}

ReplayGraph mlp_indirect_graph(int layer, const ModelConfig& config) {
  ReplayGraph g;
  const int logits = g.logits();
  const int src = g.add_node(ComponentId::mlp(layer), true);
  std::vector<int> later;
  for (int l : circuit_mlps_after(layer)) later.push_back(g.add_node(ComponentId::mlp(l), false));
  for (std::size_t i = 0; i < later.size(); ++i) {
    g.add_edge(src, later[i], kAllChannels, Positions::End);
    for (std::size_t j = i + 1; j < later.size(); ++j) g.add_edge(later[i], later[j], kAllChannels, Positions::End);
    g.add_edge(later[i], logits, kAllChannels, Positions::End);
  }
  g.finalize(config);
  return g;
}

std::vector<MlpSplit> mlp_direct_indirect(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                                          const std::vector<int>& layers) {
  const auto years = start_years(data);
  const double baseline = score(clean_year_probs(model, tok, data), years).prob_diff_summary().mean;
  std::vector<ReplayGraph> graphs;
  for (int l : layers) {
    graphs.push_back(mlp_direct_graph(l, model.config()));
    graphs.push_back(mlp_indirect_graph(l, model.config()));
  }
  const auto probs = patched_year_probs(model, tok, data, graphs, BaseRun::Clean);
  std::vector<MlpSplit> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const double direct = score(probs[2 * i], years).prob_diff_summary().mean;
    const double indirect = score(probs[2 * i + 1], years).prob_diff_summary().mean;
    out.push_back({layers[i], points(baseline - direct), points(baseline - indirect)});
  }
  return out;
}

CircuitSpec values_only_circuit() {
  CircuitSpec c = CircuitSpec::year_span();
  c.name = "values-only";
  for (const auto& h : year_span_heads()) {
    c.clean_inputs.push_back({ComponentId::head_input(h.layer, h.index, Channel::V), Positions::All});
  }
  return c;
}

CircuitSpec value_collapse_circuit() {
  CircuitSpec c = CircuitSpec::year_span();
  c.name = "value-collapse";
  for (const auto& h : year_span_heads()) {
    c.clean_inputs.push_back({ComponentId::head_input(h.layer, h.index, Channel::Q), Positions::All});
    c.clean_inputs.push_back({ComponentId::head_input(h.layer, h.index, Channel::K), Positions::All});
    c.clean_inputs.push_back({ComponentId::head_input(h.layer, h.index, Channel::V), Positions::AllButYY});
  }
  return c;
}

FullCircuitReport full_circuit_report(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data) {
  const auto& config = model.config();
  const auto years = start_years(data);
  const std::vector<ReplayGraph> graphs = {
      compile_circuit(CircuitSpec::year_span(), config), compile_circuit(CircuitSpec::full(), config),
      compile_circuit(values_only_circuit(), config), compile_circuit(value_collapse_circuit(), config)};
  const auto probs = patched_year_probs(model, tok, data, graphs, BaseRun::Corrupt);
  auto mean = [&](std::size_t g) { return score(probs[g], years).prob_diff_summary().mean; };
  FullCircuitReport r;
  r.baseline = score(clean_year_probs(model, tok, data), years).prob_diff_summary().mean;
  r.year_span = mean(0);
  r.full = mean(1);
  r.values_only = mean(2);
  r.qk_drop = points(r.year_span - r.values_only);
  r.value_collapse = mean(3);
  return r;
}

GeneralizationReport generalization_report(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data) {
  const auto years = start_years(data);
  const auto clean = clean_year_probs(model, tok, data);
  const auto base = score(clean, years);
  const auto circuit = evaluate_circuit(model, tok, data, CircuitSpec::year_span());
  GeneralizationReport r;
  r.template_id = data.template_id;
  r.prob_diff = base.prob_diff_summary();
  r.cutoff_sharpness = base.cutoff_summary();
  r.circuit_prob_diff = circuit.prob_diff_summary().mean;
  r.recovery = r.prob_diff.mean != 0.0 ? r.circuit_prob_diff / r.prob_diff.mean : 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const auto top = std::max_element(clean[i].begin(), clean[i].end()) - clean[i].begin();
    if (top == years[i]) ++hits;
  }
  r.top1_equals_yy = clean.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(clean.size());
  return r;
}

double diagonal_fraction(const LensMap& lens, const Tokenizer& tok) {
  if (lens.row_argmax.empty() || lens.rows() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < lens.rows(); ++r) {
    if (lens.row_argmax[r] == tok.two_digit_ids()[static_cast<std::size_t>(lens.years[r])]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(lens.rows());
}

double upper_triangular_fraction(const LensMap& lens) {
  if (lens.rows() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < lens.rows(); ++r) {
    const int yy = lens.years[r];
    double above = 0.0, below = 0.0;
    for (int y = 0; y < 100; ++y) (y > yy ? above : below) += lens.values[r][static_cast<std::size_t>(y)];
    if (above / (99 - yy) > below / (yy + 1)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(lens.rows());
}

// ---------------------------------------------------------------------------
// Catalog

const std::vector<ExperimentInfo>& experiment_catalog() {
  static const std::vector<ExperimentInfo> catalog = [] {
    std::vector<ExperimentInfo> c = {
        {"behavioral", "probability heatmap, mean/SD probability difference and cutoff sharpness", 10000,
         SamplingMode::Random},
        {"validity", "top-k year validity and valid-century continuation mass", 10000, SamplingMode::Random},
        {"scan-logits", "direct-to-logits path patching scan over heads and MLPs", 490},
        {"scan-mlps", "path patching scans through MLPs 8-11", 490},
        {"circuit-eval", "year-span circuit evaluation and recovery fraction", 490},
        {"circuit-knockout", "year-span circuit knockout", 490},
        {"semantics-heads", "logit lens and attention of the circuit heads", 97},
        {"semantics-mlps", "logit lens of MLPs 8-11", 97},
        {"mlp-direct-indirect", "direct versus indirect contribution of MLPs 8-10", 490},
        {"pca", "2D PCA of MLP 8 input, head outputs and static year embeddings", 97},
        {"neurons", "per-neuron direct patching of MLP 10, neuron lenses and top-k sums", 490},
        {"direct-effects", "layernorm-aware direct effects of top MLP 10 neurons", 490},
        {"full-circuit", "full circuit with low-layer inputs, Q+K and value-channel patching", 490},
    };
    for (const auto& t : template_ids()) {
      c.push_back({"generalize-" + t, "behaviour and circuit recovery on the " + t + " template", 490,
                   SamplingMode::Balanced, t});
    }
    return c;
  }();
  return catalog;
}

std::vector<std::string> experiment_ids() {
  std::vector<std::string> ids;
  for (const auto& e : experiment_catalog()) ids.push_back(e.id);
  return ids;
}

const ExperimentInfo& find_experiment(std::string_view id) {
  for (const auto& e : experiment_catalog()) {
    if (e.id == id) return e;
  }
  std::string valid;
  for (const auto& e : experiment_catalog()) valid += (valid.empty() ? "" : ", ") + e.id;
  throw std::invalid_argument("unknown experiment '" + std::string(id) + "'; valid ids: " + valid);
}

std::filesystem::path resolve_checkpoint(const ExperimentConfig& config) {
  std::filesystem::path p = config.checkpoint;
  if (p.empty()) {
    if (const char* env = std::getenv("YEARSPAN_CHECKPOINT"); env && *env) p = env;
  }
  if (p.empty()) throw std::runtime_error("no checkpoint given: pass --checkpoint or set YEARSPAN_CHECKPOINT");
  if (!std::filesystem::exists(p)) throw std::runtime_error("checkpoint not found: " + p.string());
  return p;
}

Tokenizer load_tokenizer(const ExperimentConfig& config) {
  if (config.vocab.empty() != config.merges.empty()) {
    throw std::invalid_argument("--vocab and --merges must be given together");
  }
  if (config.vocab.empty()) return Tokenizer::load_default();
  return Tokenizer::load(config.vocab, config.merges);
}

void write_manifest(const std::filesystem::path& out) {
  Json doc = Json::object();
  for (const auto& e : experiment_catalog()) {
    doc[e.id] = {{"reproduces", e.artifact},
                 {"default_n", e.default_n},
                 {"sampling", e.mode == SamplingMode::Random ? "random" : "balanced"},
                 {"template", e.template_id}};
  }
  std::filesystem::create_directories(out);
  std::ofstream f(out / "manifest.json", std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + (out / "manifest.json").string());
  f << doc.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Experiments

namespace {

struct Session {
  const ExperimentConfig& config;
  const ExperimentInfo& info;
  const Gpt2Model& model;
  const Tokenizer& tok;
  PairedDataset data;
  std::filesystem::path dir;
  Provenance provenance;
  ExperimentResult result;

  void csv(const std::string& name, const Table& table) {
    const auto path = dir / (name + ".csv");
    write_csv(path, provenance, table);
    result.files.push_back(path);
  }
};

void behavioral(Session& s) {
  const auto years = start_years(s.data);
  const auto probs = clean_year_probs(s.model, s.tok, s.data);
  const auto m = score(probs, years);
  s.csv("metrics", metrics_table(m));
  s.csv("heatmap", heatmap_table(heatmap(probs, years)));
  s.result.summary = metrics_json(m);
}

void validity(Session& s) {
  const auto years = start_years(s.data);
  const auto probs = clean_year_probs(s.model, s.tok, s.data);
  Table t{{"k", "validity"}, {}};
  Json topk = Json::object();
  for (std::size_t k = 1; k <= 5; ++k) {
    const double v = topk_validity(probs, years, k);
    t.add({std::to_string(k), format_number(v)});
    topk["top" + std::to_string(k)] = v;
  }
  s.csv("topk", t);
  const auto mass = valid_xx_mass(s.model, s.tok, s.data, 100);
  Table m{{"measure", "value"}, {}};
  m.add({"within_top", format_number(mass.within_top)});
  m.add({"of_total", format_number(mass.of_total)});
  m.add({"top_mass", format_number(mass.top_mass)});
  s.csv("valid_xx_mass", m);
  s.result.summary = {{"topk_validity", topk},
                      {"valid_xx_mass", {{"within_top", mass.within_top}, {"of_total", mass.of_total}}}};
}

Json top_components(const ScanResult& r, std::size_t k) {
  Json arr = Json::array();
  for (const auto& e : r.ranked()) {
    if (arr.size() >= k) break;
    arr.push_back({{"component", e.component.name()}, {"delta", e.delta}});
  }
  return arr;
}

void scan_logits(Session& s) {
  const auto r = scan_direct(s.model, s.tok, s.data, {});
  s.csv("scan", scan_table(r));
  s.result.summary = {{"baseline", r.baseline}, {"top", top_components(r, 10)}};
}

void scan_mlps(Session& s) {
  Json out = Json::object();
  for (int l = 8; l <= 11; ++l) {
    const auto r = scan_direct(s.model, s.tok, s.data, {ComponentId::mlp(l)});
    s.csv("scan_m" + std::to_string(l), scan_table(r));
    out["m" + std::to_string(l)] = {{"baseline", r.baseline}, {"top", top_components(r, 10)}};
  }
  s.result.summary = out;
}

void circuit(Session& s, bool knockout) {
  const auto years = start_years(s.data);
  const double baseline = score(clean_year_probs(s.model, s.tok, s.data), years).prob_diff_summary().mean;
  const auto m = knockout ? knockout_circuit(s.model, s.tok, s.data, CircuitSpec::year_span())
                          : evaluate_circuit(s.model, s.tok, s.data, CircuitSpec::year_span());
  s.csv("metrics", metrics_table(m));
  const double pd = m.prob_diff_summary().mean;
  s.result.summary = {{"baseline_prob_diff", baseline},
                      {"prob_diff", pd},
                      {"recovery_fraction", baseline != 0.0 ? pd / baseline : 0.0},
                      {"cutoff_sharpness", m.cutoff_summary().mean}};
}

void semantics_heads(Session& s) {
  const auto heads = year_span_heads();
  const auto lenses = lens_components(s.model, s.tok, s.data, heads);
  Json diag = Json::object();
  for (std::size_t i = 0; i < heads.size(); ++i) {
    s.csv("lens_" + heads[i].name(), lens_table(lenses[i], s.tok));
    diag[heads[i].name()] = diagonal_fraction(lenses[i], s.tok);
  }
  Table curves{{"yy"}, {}};
  std::vector<std::map<int, double>> per_head;
  for (const auto& h : heads) {
    curves.header.push_back(h.name());
    per_head.push_back(attention_to_yy_curve(s.model, s.data, h.layer, h.index));
  }
  for (const auto& [yy, v] : per_head.front()) {
    std::vector<std::string> row = {std::to_string(yy)};
    for (const auto& c : per_head) row.push_back(format_number(c.at(yy)));
    curves.add(std::move(row));
  }
  s.csv("attention_to_yy", curves);
  const auto& example = s.data.examples.front().clean;
  Json patterns = Json::object();
  for (const auto& h : heads) {
    const auto pattern = attention_pattern(s.model, example, h.layer, h.index);
    patterns[h.name()] = pattern.row(example.end_pos);
  }
  s.result.summary = {{"diagonal_fraction", diag},
                      {"example_prompt", example.prompt},
                      {"end_attention_row", patterns}};
}

void semantics_mlps(Session& s) {
  std::vector<ComponentId> mlps;
  for (int l = 8; l <= 11; ++l) mlps.push_back(ComponentId::mlp(l));
  const auto lenses = lens_components(s.model, s.tok, s.data, mlps);
  Json upper = Json::object();
  for (std::size_t i = 0; i < mlps.size(); ++i) {
    s.csv("lens_" + mlps[i].name(), lens_table(lenses[i], s.tok));
    upper[mlps[i].name()] = upper_triangular_fraction(lenses[i]);
  }
  s.result.summary = {{"upper_triangular_fraction", upper}};
}

void mlp_split(Session& s) {
  const auto splits = mlp_direct_indirect(s.model, s.tok, s.data, {8, 9, 10});
  Table t{{"mlp", "direct_drop_points", "indirect_drop_points"}, {}};
  Json out = Json::object();
  for (const auto& sp : splits) {
    t.add({ComponentId::mlp(sp.layer).name(), format_number(sp.direct_drop), format_number(sp.indirect_drop)});
    out[ComponentId::mlp(sp.layer).name()] = {{"direct_drop", sp.direct_drop}, {"indirect_drop", sp.indirect_drop}};
  }
  s.csv("split", t);
  s.result.summary = out;
}

void pca(Session& s) {
  struct Probe {
    std::string name;
    std::vector<std::pair<int, std::vector<float>>> vectors;
  };
  std::vector<Probe> probes = {
      {"m8_input", end_vectors(s.model, s.data, ComponentId::mlp(8), VectorSite::Input)},
      {"a7.h10_output", end_vectors(s.model, s.data, ComponentId::head(7, 10), VectorSite::Output)},
      {"a7.h8_output", end_vectors(s.model, s.data, ComponentId::head(7, 8), VectorSite::Output)},
      {"static_embeddings", static_year_embeddings(s.model, s.tok)},
  };
  Json out = Json::object();
  for (const auto& p : probes) {
    const auto r = pca2(p.vectors);
    s.csv("pca_" + p.name, pca_table(r));
    out[p.name] = {{"explained", r.explained}, {"circular_ordering", circular_ordering(r)}};
  }
  s.result.summary = out;
}

ScanResult neuron_scan(Session& s) {
  return scan_neurons_direct(s.model, s.tok, s.data, 10, s.config.limit);
}

void neurons(Session& s) {
  const auto scan_result = neuron_scan(s);
  s.csv("scan", scan_table(scan_result));
  std::size_t small = 0;
  for (const auto& e : scan_result.entries) small += std::abs(e.delta) < 0.01;
  const auto means = neuron_means(s.model, s.data, 10);
  const auto ranked = top_neurons(scan_result, 10, scan_result.entries.size());
  Json lens_sums = Json::object();
  for (std::size_t k : {std::size_t{10}, std::size_t{100}, std::size_t{200}}) {
    if (ranked.size() < k) continue;
    const std::vector<int> top(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k));
    const auto lens = lens_sum(s.model, s.tok, means, top);
    s.csv("lens_top" + std::to_string(k), lens_table(lens, s.tok));
    lens_sums["top" + std::to_string(k)] = upper_triangular_fraction(lens);
  }
  Json top3 = Json::array();
  for (std::size_t i = 0; i < std::min<std::size_t>(3, ranked.size()); ++i) {
    s.csv("lens_" + ComponentId::neuron(10, ranked[i]).name(), lens_table(lens_neuron(s.model, s.tok, means, ranked[i]), s.tok));
    top3.push_back(ComponentId::neuron(10, ranked[i]).name());
  }
  Json group = Json::object();
  if (ranked.size() >= 10) {
    const std::vector<int> top10(ranked.begin(), ranked.begin() + 10);
    group["top10_direct_prob_diff"] = patch_neurons(s.model, s.tok, s.data, 10, top10, true).prob_diff_summary().mean;
    group["top10_full_prob_diff"] = patch_neurons(s.model, s.tok, s.data, 10, top10, false).prob_diff_summary().mean;
  }
  s.result.summary = {{"baseline", scan_result.baseline},
                      {"neurons_scanned", scan_result.entries.size()},
                      {"fraction_below_1_point", scan_result.entries.empty()
                                                     ? 0.0
                                                     : static_cast<double>(small) /
                                                           static_cast<double>(scan_result.entries.size())},
                      {"top3", top3},
                      {"lens_sum_upper_triangular", lens_sums},
                      {"group_patch", group}};
}

void direct_effects_experiment(Session& s) {
  const auto scan_result = neuron_scan(s);
  const auto ranked = top_neurons(scan_result, 10, 10);
  std::vector<std::vector<ComponentId>> sets;
  std::vector<ComponentId> group;
  for (int n : ranked) {
    sets.push_back({ComponentId::neuron(10, n)});
    group.push_back(ComponentId::neuron(10, n));
  }
  sets.push_back(group);
  const auto maps = direct_effects(s.model, s.tok, s.data, sets, LayerNormMode::Frozen);
  double max_gap = 0.0;
  for (std::size_t r = 0; r < maps.back().rows(); ++r) {
    for (std::size_t y = 0; y < 100; ++y) {
      double sum = 0.0;
      for (std::size_t i = 0; i + 1 < maps.size(); ++i) sum += maps[i].values[r][y];
      max_gap = std::max(max_gap, std::abs(sum - maps.back().values[r][y]));
    }
  }
  for (std::size_t i = 0; i < std::min<std::size_t>(3, ranked.size()); ++i) {
    s.csv("direct_effect_" + ComponentId::neuron(10, ranked[i]).name(), lens_table(maps[i], s.tok));
  }
  s.csv("direct_effect_top10_group", lens_table(maps.back(), s.tok));
  const auto recomputed = direct_effect(s.model, s.tok, s.data, group, LayerNormMode::Recomputed);
  s.csv("direct_effect_top10_group_recomputed_ln", lens_table(recomputed, s.tok));
  Json top = Json::array();
  for (int n : ranked) top.push_back(ComponentId::neuron(10, n).name());
  s.result.summary = {{"top10", top}, {"group_vs_summed_max_abs_gap", max_gap}};
}

void full_circuit(Session& s) {
  const auto r = full_circuit_report(s.model, s.tok, s.data);
  s.result.summary = {{"baseline_prob_diff", r.baseline},
                      {"year_span_prob_diff", r.year_span},
                      {"full_prob_diff", r.full},
                      {"full_recovery_fraction", r.baseline != 0.0 ? r.full / r.baseline : 0.0},
                      {"values_only_prob_diff", r.values_only},
                      {"qk_drop_points", r.qk_drop},
                      {"value_collapse_prob_diff", r.value_collapse}};
  Table t{{"measure", "value"}, {}};
  for (auto it = s.result.summary.begin(); it != s.result.summary.end(); ++it) {
    t.add({it.key(), format_number(it.value().get<double>())});
  }
  s.csv("full_circuit", t);
}

void generalize(Session& s) {
  const auto r = generalization_report(s.model, s.tok, s.data);
  const auto years = start_years(s.data);
  const auto probs = clean_year_probs(s.model, s.tok, s.data);
  s.csv("heatmap", heatmap_table(heatmap(probs, years)));
  s.result.summary = {{"template", r.template_id},
                      {"relation", std::string(to_string(find_template(r.template_id).relation))},
                      {"prob_diff", summary_json(r.prob_diff)},
                      {"cutoff_sharpness", summary_json(r.cutoff_sharpness)},
                      {"circuit_prob_diff", r.circuit_prob_diff},
                      {"recovery_fraction", r.recovery},
                      {"top1_equals_yy", r.top1_equals_yy}};
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config, const Gpt2Model& model, const Tokenizer& tok) {
  const auto& info = find_experiment(config.experiment);
  const std::size_t n = config.n.value_or(info.default_n);
  if (n == 0) throw std::invalid_argument("dataset size must be positive");
  Session s{config, info, model, tok, generate(find_template(info.template_id), tok, n, config.seed, info.mode),
            config.out / info.id, {}, {}};
  s.provenance.experiment = info.id;
  s.provenance.seed = config.seed;
  s.provenance.n = s.data.size();

  static const std::map<std::string, std::function<void(Session&)>> runners = {
      {"behavioral", behavioral},
      {"validity", validity},
      {"scan-logits", scan_logits},
      {"scan-mlps", scan_mlps},
      {"circuit-eval", [](Session& x) { circuit(x, false); }},
      {"circuit-knockout", [](Session& x) { circuit(x, true); }},
      {"semantics-heads", semantics_heads},
      {"semantics-mlps", semantics_mlps},
      {"mlp-direct-indirect", mlp_split},
      {"pca", pca},
      {"neurons", neurons},
      {"direct-effects", direct_effects_experiment},
      {"full-circuit", full_circuit},
  };
  if (info.id.rfind("generalize-", 0) == 0) {
    generalize(s);
  } else {
    runners.at(info.id)(s);
  }
  const auto summary_path = s.dir / "summary.json";
  write_json(summary_path, s.provenance, s.result.summary);
  s.result.files.push_back(summary_path);
  write_manifest(config.out);
  return s.result;
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  find_experiment(config.experiment);
  const auto tok = load_tokenizer(config);
  const auto model = Gpt2Model::load(resolve_checkpoint(config));
  return run_experiment(config, model, tok);
}

}  // namespace yearspan
