#pragma once

#include "yearspan/replay.hpp"
#include "yearspan/tasks.hpp"

#include <optional>
#include <string>
#include <vector>

namespace yearspan {

// sender -> receiver -> ... -> logits. Receivers may be heads, head input
// channels (e.g. "a7.h10.v") or MLPs; positions[i] selects where edge i
// (nodes[i] -> nodes[i+1]) acts. Missing positions default to END.
struct PathSpec {
  std::vector<ComponentId> nodes;
  std::vector<Positions> positions;

  static PathSpec direct(const ComponentId& sender, Positions pos = Positions::End);
  static PathSpec through(std::vector<ComponentId> nodes, Positions pos = Positions::End);
  Positions edge_positions(std::size_t edge) const;
  void validate(const ModelConfig& config) const;
  std::string name() const;
};

struct PatchPlan {
  std::vector<PathSpec> paths;
};

// Compiles a path set into a replay graph. Each component gets one instance
// per distinct downstream route, so every path sees exactly its own upstream
// perturbation; paths that share a route share the instance. When an instance
// is both a sender and an intermediate, the sender role wins.
ReplayGraph compile_paths(const PatchPlan& plan, const ModelConfig& config);

struct CircuitEdge {
  ComponentId sender;
  ComponentId receiver;  // head, head input channel, MLP or logits
  Positions positions = Positions::End;
  friend auto operator<=>(const CircuitEdge&, const CircuitEdge&) = default;
};

// Head input channel that reads the source run's residual directly.
struct CleanInput {
  ComponentId channel;  // HeadInput
  Positions positions = Positions::End;
  friend auto operator<=>(const CleanInput&, const CleanInput&) = default;
};

// A set of edges that carry the "good" run during evaluation. Compiled with
// one instance per component: nodes without incoming circuit edges or clean
// inputs emit their good-run output along their circuit edges; the others
// are recomputed from the bad-run residual plus the deltas on their circuit
// edges.
struct CircuitSpec {
  std::string name;
  std::vector<CircuitEdge> edges;
  std::vector<CleanInput> clean_inputs;

  // Heads a5.h1, a5.h5, a6.h9, a7.h10, a8.h8, a8.h11 into MLP 8, a9.h1 into
  // MLP 9, all heads to the logits, MLPs 8-11 interconnected and to the
  // logits; everything at END.
  static CircuitSpec year_span();
  // year_span plus the low-layer box (a0.h1, a0.h3, a0.h5, MLPs 0-3) feeding
  // the heads' keys and values at YY; the heads' queries read the good run.
  static CircuitSpec full();
  // Every component to every downstream component at all positions.
  static CircuitSpec complete(const ModelConfig& config);

  std::vector<ComponentId> components() const;
  std::vector<ComponentId> heads() const;
  void validate(const ModelConfig& config) const;
};

ReplayGraph compile_circuit(const CircuitSpec& circuit, const ModelConfig& config);

// Circuit edges reachable from the given start nodes (their outgoing edges
// and everything downstream of those).
std::vector<CircuitEdge> continuation(const CircuitSpec& circuit, const std::vector<ComponentId>& start);

// Heads of the year-span circuit in layer order.
std::vector<ComponentId> year_span_heads();

// ---------------------------------------------------------------------------
// Running interventions

enum class BaseRun {
  Clean,    // base = clean prompt, source = 01 twin
  Corrupt,  // base = 01 twin, source = clean prompt
};

// End-position logits of one patched run (base = clean, source = corrupt).
Tensor patch_paths(const Gpt2Model& model, const ExamplePair& pair, const PatchPlan& plan);
Tensor patch_graph(const Gpt2Model& model, const ExamplePair& pair, const ReplayGraph& graph, BaseRun base);

// Patched END residuals, indexed [graph][example].
std::vector<std::vector<std::vector<float>>> patched_residuals(const Gpt2Model& model, const PairedDataset& data,
                                                               const std::vector<ReplayGraph>& graphs,
                                                               BaseRun base);
// Patched year distributions, indexed [graph][example].
std::vector<std::vector<YearProbs>> patched_year_probs(const Gpt2Model& model, const Tokenizer& tok,
                                                       const PairedDataset& data,
                                                       const std::vector<ReplayGraph>& graphs, BaseRun base);
Metrics patched_metrics(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                        const ReplayGraph& graph, BaseRun base);

struct ScanEntry {
  ComponentId component;
  double patched = 0.0;  // mean probability difference after patching
  double delta = 0.0;    // patched - baseline
};

struct ScanResult {
  std::string name;
  double baseline = 0.0;  // mean probability difference without patching
  std::vector<ScanEntry> entries;

  const ScanEntry* find(const ComponentId& c) const;
  // Entries ordered by |delta| descending (ties by component order).
  std::vector<ScanEntry> ranked() const;
};

// A scan patches each candidate C along: C -> entry receivers, then the
// continuation edges to the logits. Candidates that precede no entry are
// skipped.
struct ScanSpec {
  std::string name;
  std::vector<std::pair<ComponentId, Positions>> entries;
  std::vector<CircuitEdge> continuation;
  std::vector<ComponentId> candidates;  // empty: every head and MLP
};

ReplayGraph scan_graph(const ScanSpec& spec, const ComponentId& candidate, const ModelConfig& config);
ScanResult scan(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data, const ScanSpec& spec);

// Direct-to-logits scan for chain = {}; for chain = {MLP k, ...} every path
// through the chain and then any ordered subset of `downstream` (defaults to
// the circuit MLPs 8-11 after the chain's last element) is patched at once.
ScanSpec direct_scan_spec(const std::vector<ComponentId>& chain,
                          std::optional<std::vector<ComponentId>> downstream = std::nullopt);
ScanResult scan_direct(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                       const std::vector<ComponentId>& chain,
                       std::optional<std::vector<ComponentId>> downstream = std::nullopt);

// Candidates feeding the target heads' values at YY, continuing through
// `context` (default: the year-span circuit) to the logits.
ScanSpec value_scan_spec(const std::vector<ComponentId>& target_heads,
                         const CircuitSpec& context = CircuitSpec::year_span());
ScanResult scan_values(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                       const std::vector<ComponentId>& target_heads,
                       const CircuitSpec& context = CircuitSpec::year_span());

// Circuit evaluation: bad (01) run everywhere except along circuit edges.
Metrics evaluate_circuit(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                         const CircuitSpec& circuit);
// Knockout: good run everywhere except along circuit edges.
Metrics knockout_circuit(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                         const CircuitSpec& circuit);

// Graph where `start` is perturbed and every later component is recomputed.
ReplayGraph downstream_graph(const std::vector<ComponentId>& sources, const ModelConfig& config);

// Swaps the selected neurons to the 01 run, either only on their direct path
// to the logits (at END) or into everything downstream.
ReplayGraph neuron_graph(int layer, const std::vector<int>& neurons, bool direct_to_logits, const ModelConfig& config);
Metrics patch_neurons(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data, int layer,
                      const std::vector<int>& neurons, bool direct_to_logits);
// One direct-path patch per neuron, for neurons [0, limit). Uses the exact
// decomposition of the final layernorm over a single added direction, so it
// avoids one unembedding per neuron and example.
ScanResult scan_neurons_direct(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data, int layer,
                               std::size_t limit = 0);

// Replaces one head channel's input at `pos` with the 01 run's residual and
// lets the change flow through all downstream computation.
ReplayGraph head_channel_graph(int layer, int head, Channel channel, Positions pos, const ModelConfig& config);
Metrics patch_head_channel(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data, int layer,
                           int head, Channel channel, Positions pos);

}  // namespace yearspan
