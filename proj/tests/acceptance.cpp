#include "yearspan/experiments.hpp"
#include "yearspan/safetensors.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>

using namespace yearspan;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int precision = 4) {
  std::ostringstream ss;
  ss.precision(precision);
  ss << v;
  return ss.str();
}

std::string pts(double fraction) { return num(100.0 * fraction, 4); }

bool within(double value, double target, double tol) { return std::abs(value - target) <= tol; }

struct Context {
  std::filesystem::path reference;
  std::filesystem::path tiny;
  std::optional<std::filesystem::path> checkpoint;
  std::uint64_t seed = 0;
  std::size_t behavioral_n = 10000;
  std::unique_ptr<Gpt2Model> model;
  std::unique_ptr<Tokenizer> tok;
  std::optional<PairedDataset> set490;
  std::optional<PairedDataset> set97;

  const PairedDataset& medium() {
    if (!set490) set490 = generate(*tok, 490, seed, SamplingMode::Balanced);
    return *set490;
  }
  const PairedDataset& small() {
    if (!set97) set97 = generate(*tok, 97, seed, SamplingMode::Balanced);
    return *set97;
  }
};

Verdict logit_parity(Context& c) {
  std::ifstream in(c.reference / "reference.json");
  if (!in) return {false, "reference outputs missing in " + c.reference.string()};
  const auto j = nlohmann::json::parse(in);
  const auto tokens = j["tokens"].get<std::vector<std::vector<TokenId>>>();
  const auto model = Gpt2Model::load(c.reference);
  const safetensors::Archive archive(c.reference / "reference.safetensors");
  const auto expected = archive.read_float("logits_end");
  float worst = 0.0f;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto run = model.forward_with_cache(tokens[i], {}, true);
    worst = std::max(worst, max_abs_diff(run.logits.row(0), expected.row(i)));
  }
  return {tokens.size() == 20 && worst < 1e-3f,
          std::to_string(tokens.size()) + " prompts, max |diff| = " + num(worst) + " (tol 1e-3)"};
}

Verdict behavioral(Context& c) {
  const auto data = generate(*c.tok, c.behavioral_n, c.seed, SamplingMode::Random);
  const auto m = evaluate(*c.model, *c.tok, data);
  const double pd = m.prob_diff_summary().mean;
  const double cs = m.cutoff_summary().mean;
  return {within(pd, 0.817, 0.03) && within(cs, 0.06, 0.02),
          "n=" + std::to_string(data.size()) + " prob diff " + pts(pd) + "% (81.7 +/- 3), cutoff " + pts(cs) +
              "% (6.0 +/- 2)"};
}

Verdict validity(Context& c) {
  const auto data = generate(*c.tok, c.behavioral_n, c.seed, SamplingMode::Random);
  const auto probs = clean_year_probs(*c.model, *c.tok, data);
  const auto years = start_years(data);
  const double top1 = topk_validity(probs, years, 1);
  const double top5 = topk_validity(probs, years, 5);
  const auto mass = valid_xx_mass(*c.model, *c.tok, data, 100);
  const bool ok = top1 == 1.0 && top5 >= 0.97 && within(mass.within_top, 0.94, 0.03) && within(mass.of_total, 0.89, 0.03);
  return {ok, "top1 " + pts(top1) + "%, top5 " + pts(top5) + "%, valid-XX mass " + pts(mass.within_top) + "% / " +
                  pts(mass.of_total) + "% (94 / 89 +/- 3)"};
}

std::string names(const std::vector<ScanEntry>& entries, std::size_t k) {
  std::string s;
  for (std::size_t i = 0; i < std::min(k, entries.size()); ++i) s += (i ? " " : "") + entries[i].component.name();
  return s;
}

bool in_top(const std::vector<ScanEntry>& ranked, const ComponentId& id, std::size_t k) {
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) {
    if (ranked[i].component == id) return true;
  }
  return false;
}

Verdict discovery(Context& c) {
  const auto direct = scan_direct(*c.model, *c.tok, c.medium(), {}).ranked();
  bool ok = direct.size() >= 6;
  for (int l = 8; l <= 11; ++l) ok = ok && in_top(direct, ComponentId::mlp(l), 4);
  ok = ok && in_top(direct, ComponentId::head(9, 1), 6);
  const auto via8 = scan_direct(*c.model, *c.tok, c.medium(), {ComponentId::mlp(8)}).ranked();
  for (const auto& h : {ComponentId::head(5, 1), ComponentId::head(5, 5), ComponentId::head(6, 9),
                        ComponentId::head(7, 10), ComponentId::head(8, 8), ComponentId::head(8, 11)}) {
    ok = ok && in_top(via8, h, 10);
  }
  return {ok, "direct top6: " + names(direct, 6) + "; via m8 top10: " + names(via8, 10)};
}

Verdict circuit_eval(Context& c) {
  const auto& data = c.medium();
  const double base = score(clean_year_probs(*c.model, *c.tok, data), start_years(data)).prob_diff_summary().mean;
  const double ev = evaluate_circuit(*c.model, *c.tok, data, CircuitSpec::year_span()).prob_diff_summary().mean;
  const double ko = knockout_circuit(*c.model, *c.tok, data, CircuitSpec::year_span()).prob_diff_summary().mean;
  const double rec = base != 0.0 ? ev / base : 0.0;
  return {base > 0.0 && rec >= 0.85 && ko < 0.0,
          "recovery " + pts(rec) + "% (>= 85), circuit " + pts(ev) + "%, knockout " + pts(ko) + "% (< 0)"};
}

Verdict mlp_split(Context& c) {
  const auto splits = mlp_direct_indirect(*c.model, *c.tok, c.medium(), {8, 9, 10});
  const std::map<int, std::pair<double, double>> target = {{8, {14, 39}}, {9, {28, 32}}, {10, {56, 16}}};
  bool ok = splits.size() == 3;
  std::string detail;
  for (const auto& s : splits) {
    const auto [d, i] = target.at(s.layer);
    ok = ok && within(s.direct_drop, d, 5) && within(s.indirect_drop, i, 5);
    detail += "m" + std::to_string(s.layer) + " " + num(s.direct_drop) + "/" + num(s.indirect_drop) + " (" + num(d) +
              "/" + num(i) + ") ";
  }
  return {ok, detail + "+/- 5 points"};
}

Verdict semantics(Context& c) {
  const auto heads = year_span_heads();
  const auto head_lenses = lens_components(*c.model, *c.tok, c.small(), heads);
  bool ok = true;
  std::string detail = "diagonal:";
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const double f = diagonal_fraction(head_lenses[i], *c.tok);
    ok = ok && f >= 0.9;
    detail += " " + heads[i].name() + "=" + pts(f) + "%";
  }
  const auto mlps = lens_components(*c.model, *c.tok, c.small(), {ComponentId::mlp(9), ComponentId::mlp(10)});
  detail += "; upper-triangular:";
  for (std::size_t i = 0; i < mlps.size(); ++i) {
    const double f = upper_triangular_fraction(mlps[i]);
    ok = ok && f >= 0.95;
    detail += " m" + std::to_string(9 + i) + "=" + pts(f) + "%";
  }
  return {ok, detail + " (>= 90 / >= 95)"};
}

Verdict neurons(Context& c) {
  const auto scan = scan_neurons_direct(*c.model, *c.tok, c.medium(), 10);
  std::size_t small = 0;
  for (const auto& e : scan.entries) small += std::abs(e.delta) < 0.01 ? 1 : 0;
  const double frac = scan.entries.empty() ? 0.0 : static_cast<double>(small) / static_cast<double>(scan.entries.size());

  const auto mlp = lens_component(*c.model, *c.tok, c.small(), ComponentId::mlp(10));
  const auto means = neuron_means(*c.model, c.small(), 10);
  std::vector<int> all(static_cast<std::size_t>(c.model->config().d_mlp));
  std::iota(all.begin(), all.end(), 0);
  const auto sum = lens_sum(*c.model, *c.tok, means, all);
  double lens_gap = 0.0;
  for (std::size_t r = 0; r < mlp.rows(); ++r) {
    for (std::size_t y = 0; y < 100; ++y) lens_gap = std::max(lens_gap, std::abs(mlp.values[r][y] - sum.values[r][y]));
  }

  const auto top = top_neurons(scan, 10, 10);
  std::vector<std::vector<ComponentId>> sets;
  std::vector<ComponentId> group;
  for (int n : top) {
    sets.push_back({ComponentId::neuron(10, n)});
    group.push_back(ComponentId::neuron(10, n));
  }
  sets.push_back(group);
  const auto maps = direct_effects(*c.model, *c.tok, c.medium(), sets);
  double group_gap = 0.0;
  const auto& g = maps.back();
  for (std::size_t r = 0; r < g.rows(); ++r) {
    for (std::size_t y = 0; y < 100; ++y) {
      double s = 0.0;
      for (std::size_t i = 0; i + 1 < maps.size(); ++i) s += maps[i].values[r][y];
      group_gap = std::max(group_gap, std::abs(g.values[r][y] - s));
    }
  }
  return {frac >= 0.9 && lens_gap < 1e-4 && group_gap < 1e-4,
          "neurons with |delta| < 1 point: " + pts(frac) + "% (>= 90), lens sum gap " + num(lens_gap) +
              ", grouped direct effect gap " + num(group_gap) + " (tol 1e-4)"};
}

Verdict full_circuit(Context& c) {
  const auto r = full_circuit_report(*c.model, *c.tok, c.medium());
  return {within(r.full, 0.715, 0.03) && within(r.qk_drop, 15.0, 5.0) && r.value_collapse < 0.0,
          "full " + pts(r.full) + "% (71.5 +/- 3), recovery " + pts(r.baseline != 0.0 ? r.full / r.baseline : 0.0) +
              "%, Q+K drop " + num(r.qk_drop) + " points (15 +/- 5), value collapse " + pts(r.value_collapse) +
              "% (< 0)"};
}

Verdict generalization(Context& c) {
  auto report = [&](const std::string& id) {
    return generalization_report(*c.model, *c.tok, generate(find_template(id), *c.tok, 490, c.seed, SamplingMode::Balanced));
  };
  bool ok = true;
  std::string detail;
  const std::vector<std::pair<std::string, double>> recoveries = {
      {"started-ended", 0.988}, {"price", 0.889}, {"sequence", 0.678}};
  for (const auto& [id, target] : recoveries) {
    const auto r = report(id);
    if (id != "sequence") ok = ok && r.prob_diff.mean >= 0.69;
    ok = ok && within(r.recovery, target, 0.05);
    detail += id + " pd " + pts(r.prob_diff.mean) + "% rec " + pts(r.recovery) + "% (" + pts(target) + "); ";
  }
  for (const std::string id : {"reversed", "bc"}) {
    const auto r = report(id);
    ok = ok && r.prob_diff.mean > 0.0;
    detail += id + " pd " + pts(r.prob_diff.mean) + "% (> 0); ";
  }
  const auto s = report("smaller");
  ok = ok && s.top1_equals_yy >= 0.5;
  detail += "smaller top1 == YY " + pts(s.top1_equals_yy) + "% (>= 50)";
  return {ok, detail};
}

Verdict engine_properties(Context& c) {
  const auto start = std::chrono::steady_clock::now();
  const auto tiny = Gpt2Model::load(c.tiny);
  const auto& config = tiny.config();
  const auto data = generate(*c.tok, 4, 11, SamplingMode::Balanced);
  std::vector<std::string> failures;

  float noop = 0.0f, swap = 0.0f, recon = 0.0f;
  PatchPlan all_direct;
  all_direct.paths.push_back(PathSpec::direct(ComponentId::token_embed()));
  all_direct.paths.push_back(PathSpec::direct(ComponentId::pos_embed()));
  for (int l = 0; l < config.n_layers; ++l) {
    for (int h = 0; h < config.n_heads; ++h) all_direct.paths.push_back(PathSpec::direct(ComponentId::head(l, h)));
    all_direct.paths.push_back(PathSpec::direct(ComponentId::mlp(l)));
  }
  for (const auto& pair : data.examples) {
    const auto clean = tiny.forward_with_cache(pair.clean.tokens, all_components(config));
    const auto corrupt = tiny.forward_with_cache(pair.corrupt.tokens, {}, true).logits;
    const auto clean_end = tiny.forward_with_cache(pair.clean.tokens, {}, true).logits;
    noop = std::max(noop, max_abs_diff(patch_paths(tiny, pair, PatchPlan{}).data(), clean_end.row(0)));
    swap = std::max(swap, max_abs_diff(patch_paths(tiny, pair, all_direct).data(), corrupt.row(0)));
    Tensor total = add(clean.cache.token_embedding(), clean.cache.position_embedding());
    for (int l = 0; l < config.n_layers; ++l) {
      for (int h = 0; h < config.n_heads; ++h) add_inplace(total, clean.cache.head_output(l, h));
      add_inplace(total, clean.cache.mlp_output(l));
    }
    recon = std::max(recon, max_abs_diff(total, clean.cache.final_resid()));
  }
  if (noop != 0.0f) failures.push_back("no-op");
  if (swap >= 1e-4f) failures.push_back("full swap");
  if (recon >= 1e-4f) failures.push_back("reconstruction");

  std::vector<float> logits(c.tok->vocab_size());
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = static_cast<float>(std::sin(0.37 * static_cast<double>(i))) * 4.0f;
  auto shifted = logits;
  for (auto& v : shifted) v += 17.5f;
  double shift = 0.0;
  for (int yy = 2; yy <= 98; ++yy) {
    shift = std::max(shift, std::abs(prob_diff(logits, yy, *c.tok) - prob_diff(shifted, yy, *c.tok)));
    shift = std::max(shift, std::abs(cutoff_sharpness(logits, yy, *c.tok) - cutoff_sharpness(shifted, yy, *c.tok)));
  }
  if (shift >= 1e-6) failures.push_back("shift invariance");

  const bool deterministic = generate(*c.tok, 500, 42) == generate(*c.tok, 500, 42) &&
                             generate(*c.tok, 500, 42) != generate(*c.tok, 500, 43);
  if (!deterministic) failures.push_back("determinism");

  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (seconds >= 300.0) failures.push_back("runtime");
  std::string detail = "no-op " + num(noop) + ", full swap " + num(swap) + ", reconstruction " + num(recon) +
                       ", shift " + num(shift) + ", deterministic " + (deterministic ? "yes" : "no") + ", " +
                       num(seconds, 3) + " s";
  if (!failures.empty()) {
    detail += "; failed:";
    for (const auto& f : failures) detail += " " + f;
  }
  return {failures.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks for the year-span toolkit"};
  Context c;
  std::string checkpoint;
  app.add_option("--reference", c.reference, "Directory with the parity reference checkpoint and outputs")->required();
  app.add_option("--tiny", c.tiny, "Directory with the small synthetic checkpoint for engine properties")->required();
  app.add_option("--checkpoint", checkpoint, "GPT-2 small checkpoint (default: $YEARSPAN_CHECKPOINT)");
  app.add_option("--seed", c.seed, "Dataset seed");
  app.add_option("--behavioral-n", c.behavioral_n, "Size of the random behavioural dataset");
  CLI11_PARSE(app, argc, argv);

  if (checkpoint.empty()) {
    if (const char* env = std::getenv("YEARSPAN_CHECKPOINT"); env && *env) checkpoint = env;
  }
  c.tok = std::make_unique<Tokenizer>(Tokenizer::load_default());
  std::string checkpoint_error;
  if (checkpoint.empty()) {
    checkpoint_error = "checkpoint unavailable (set YEARSPAN_CHECKPOINT)";
  } else {
    try {
      c.model = std::make_unique<Gpt2Model>(Gpt2Model::load(checkpoint));
    } catch (const std::exception& e) {
      checkpoint_error = std::string("checkpoint unavailable: ") + e.what();
    }
  }

  struct Criterion {
    int id;
    std::string name;
    bool needs_checkpoint;
    std::function<Verdict(Context&)> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "logit parity", false, logit_parity},
      {2, "behavioral metrics", true, behavioral},
      {3, "validity", true, validity},
      {4, "discovery scans", true, discovery},
      {5, "circuit evaluation", true, circuit_eval},
      {6, "MLP direct/indirect split", true, mlp_split},
      {7, "semantics", true, semantics},
      {8, "neurons", true, neurons},
      {9, "full circuit", true, full_circuit},
      {10, "generalization", true, generalization},
      {11, "engine properties", false, engine_properties},
  };

  int failed = 0;
  for (const auto& cr : criteria) {
    Verdict v;
    if (cr.needs_checkpoint && !c.model) {
      v = {false, checkpoint_error};
    } else {
      try {
        v = cr.run(c);
      } catch (const std::exception& e) {
        v = {false, std::string("error: ") + e.what()};
      }
    }
    failed += v.pass ? 0 : 1;
    std::cout << "criterion " << cr.id << " " << (v.pass ? "PASS" : "FAIL") << " " << cr.name << ": " << v.detail
              << std::endl;
  }
  std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size() << " criteria passed"
            << std::endl;
  return failed == 0 ? 0 : 1;
}
