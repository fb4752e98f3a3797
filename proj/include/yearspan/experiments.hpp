#pragma once

#include "yearspan/analysis.hpp"
#include "yearspan/io.hpp"
#include "yearspan/patching.hpp"
#include "yearspan/tasks.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace yearspan {

// ---------------------------------------------------------------------------
// Composite measurements shared by the runner and the acceptance suite.
// Drops are baseline minus patched mean probability difference, in points.

struct MlpSplit {
  int layer = 0;
  double direct_drop = 0.0;
  double indirect_drop = 0.0;
};
// Direct: MLP k straight to the logits. Indirect: MLP k into the later
// circuit MLPs and from them to the logits, without the direct edge.
ReplayGraph mlp_direct_graph(int layer, const ModelConfig& config);
ReplayGraph mlp_indirect_graph(int layer, const ModelConfig& config);
std::vector<MlpSplit> mlp_direct_indirect(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                                          const std::vector<int>& layers);

struct FullCircuitReport {
  double baseline = 0.0;
  double year_span = 0.0;       // year-span circuit alone
  double full = 0.0;            // full circuit
  double values_only = 0.0;     // circuit heads with only their values from the good run
  double qk_drop = 0.0;         // (year_span - values_only) in points
  double value_collapse = 0.0;  // good queries/keys, values good everywhere except YY
};
CircuitSpec values_only_circuit();
CircuitSpec value_collapse_circuit();
FullCircuitReport full_circuit_report(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data);

struct GeneralizationReport {
  std::string template_id;
  Summary prob_diff;
  Summary cutoff_sharpness;
  double circuit_prob_diff = 0.0;
  double recovery = 0.0;       // circuit / baseline probability difference
  double top1_equals_yy = 0.0;  // fraction whose most likely two-digit year is YY
};
GeneralizationReport generalization_report(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data);

// Fraction of rows whose full-vocabulary argmax is the two-digit token YY.
double diagonal_fraction(const LensMap& lens, const Tokenizer& tok);
// Fraction of rows where the mean over years > YY exceeds the mean over years <= YY.
double upper_triangular_fraction(const LensMap& lens);

// ---------------------------------------------------------------------------
// Experiment runner

struct ExperimentConfig {
  std::string experiment;
  std::filesystem::path checkpoint;  // empty: $YEARSPAN_CHECKPOINT
  std::filesystem::path vocab;       // empty: bundled encoder.json
  std::filesystem::path merges;      // empty: bundled vocab.bpe
  std::filesystem::path out = "results";
  std::uint64_t seed = 0;
  std::optional<std::size_t> n;      // empty: the experiment's default
  std::size_t limit = 0;             // neuron scans: first `limit` neurons (0 = all)
};

struct ExperimentInfo {
  std::string id;
  std::string artifact;  // what the outputs reproduce
  std::size_t default_n = 490;
  SamplingMode mode = SamplingMode::Balanced;
  std::string template_id = "main";
};

const std::vector<ExperimentInfo>& experiment_catalog();
std::vector<std::string> experiment_ids();
// Throws std::invalid_argument listing the valid ids.
const ExperimentInfo& find_experiment(std::string_view id);

std::filesystem::path resolve_checkpoint(const ExperimentConfig& config);
Tokenizer load_tokenizer(const ExperimentConfig& config);

struct ExperimentResult {
  std::vector<std::filesystem::path> files;
  nlohmann::ordered_json summary;
};

// Writes <out>/<id>/*.csv, <out>/<id>/summary.json and <out>/manifest.json.
ExperimentResult run_experiment(const ExperimentConfig& config);
ExperimentResult run_experiment(const ExperimentConfig& config, const Gpt2Model& model, const Tokenizer& tok);
void write_manifest(const std::filesystem::path& out);

}  // namespace yearspan
