#include "yearspan/patching.hpp"

#include "yearspan/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>

namespace yearspan {

namespace {

std::uint8_t receiver_channels(const ComponentId& receiver) {
  return receiver.kind == ComponentKind::HeadInput ? channel_bit(receiver.channel) : kAllChannels;
}

bool is_sender_kind(ComponentKind k) {
  return k == ComponentKind::TokenEmbed || k == ComponentKind::PosEmbed || k == ComponentKind::Head ||
         k == ComponentKind::Mlp || k == ComponentKind::Neuron;
}

bool is_receiver_kind(ComponentKind k) {
  return k == ComponentKind::Head || k == ComponentKind::HeadInput || k == ComponentKind::Mlp ||
         k == ComponentKind::Logits;
}

std::vector<ComponentId> all_heads_and_mlps(const ModelConfig& config) {
  std::vector<ComponentId> out;
  for (int l = 0; l < config.n_layers; ++l) {
    for (int h = 0; h < config.n_heads; ++h) out.push_back(ComponentId::head(l, h));
    out.push_back(ComponentId::mlp(l));
  }
  return out;
}

// Adds a recomputed node for every head and MLP downstream of the earliest
// root, wired all-to-all (all positions) and into the logits.
void add_downstream(ReplayGraph& g, const std::vector<int>& roots, const ModelConfig& config) {
  int first_stage = std::numeric_limits<int>::max();
  for (int r : roots) first_stage = std::min(first_stage, g.nodes[static_cast<std::size_t>(r)].component.stage());
  std::vector<int> members = roots;
  for (const auto& c : all_heads_and_mlps(config)) {
    if (c.stage() > first_stage) members.push_back(g.add_node(c, false));
  }
  const int logits = g.logits();
  for (int s : members) {
    const auto sender = g.nodes[static_cast<std::size_t>(s)].component;
    for (int r : members) {
      if (sender.precedes(g.nodes[static_cast<std::size_t>(r)].component)) {
        g.add_edge(s, r, kAllChannels, Positions::All);
      }
    }
    g.add_edge(s, logits, kAllChannels, Positions::All);
  }
}

template <class Fn>
void for_each_pair(const Gpt2Model& model, const PairedDataset& data, const CacheRequest& request, BaseRun base,
                   Fn&& fn) {
  parallel_for(data.size(), [&](std::size_t i) {
    const auto& pair = data.examples[i];
    if (pair.clean.tokens.size() != pair.corrupt.tokens.size() || pair.clean.yy_pos != pair.corrupt.yy_pos ||
        pair.clean.end_pos != pair.corrupt.end_pos) {
      throw std::invalid_argument("example " + std::to_string(i) + ": clean and corrupt prompts are not aligned");
    }
    const auto clean = model.forward_with_cache(pair.clean.tokens, request, true);
    const auto corrupt = model.forward_with_cache(pair.corrupt.tokens, request, true);
    const auto& b = base == BaseRun::Clean ? clean.cache : corrupt.cache;
    const auto& s = base == BaseRun::Clean ? corrupt.cache : clean.cache;
    const ReplayContext ctx{model, b, s, pair.clean.yy_pos, pair.clean.end_pos};
    fn(i, ctx);
  });
}

std::vector<const ReplayGraph*> pointers(const std::vector<ReplayGraph>& graphs) {
  std::vector<const ReplayGraph*> out;
  for (const auto& g : graphs) out.push_back(&g);
  return out;
}

double mean_prob_diff(std::span<const YearProbs> probs, std::span<const int> years) {
  return score(probs, years).prob_diff_summary().mean;
}

}  // namespace

// ---------------------------------------------------------------------------
// PathSpec / PatchPlan

PathSpec PathSpec::direct(const ComponentId& sender, Positions pos) {
  return {{sender, ComponentId::logits()}, {pos}};
}

PathSpec PathSpec::through(std::vector<ComponentId> nodes, Positions pos) {
  PathSpec p;
  p.positions.assign(nodes.empty() ? 0 : nodes.size() - 1, pos);
  p.nodes = std::move(nodes);
  return p;
}

Positions PathSpec::edge_positions(std::size_t edge) const {
  return positions.empty() ? Positions::End : positions.at(edge);
}

std::string PathSpec::name() const {
  std::string out;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (i) out += " -(" + std::string(to_string(edge_positions(i - 1))) + ")-> ";
    out += nodes[i].name();
  }
  return out;
}

void PathSpec::validate(const ModelConfig& config) const {
  if (nodes.size() < 2) throw std::invalid_argument("path needs a sender and the logits");
  if (!positions.empty() && positions.size() != nodes.size() - 1) {
    throw std::invalid_argument("path " + name() + ": one position selector per edge expected");
  }
  if (nodes.back().kind != ComponentKind::Logits) throw std::invalid_argument("path " + name() + " must end at logits");
  if (!is_sender_kind(nodes.front().kind)) throw std::invalid_argument("path " + name() + ": invalid sender");
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    yearspan::validate(nodes[i], config);
    if (i > 0 && i + 1 < nodes.size()) {
      const auto k = nodes[i].kind;
      if (k != ComponentKind::Head && k != ComponentKind::HeadInput && k != ComponentKind::Mlp) {
        throw std::invalid_argument("path " + name() + ": " + nodes[i].name() + " cannot be an intermediate receiver");
      }
    }
    if (i > 0 && !nodes[i - 1].precedes(nodes[i])) {
      throw std::invalid_argument("path " + name() + " is not in topological order");
    }
  }
}

ReplayGraph compile_paths(const PatchPlan& plan, const ModelConfig& config) {
  ReplayGraph g;
  std::map<std::string, int> instances;
  for (const auto& path : plan.paths) {
    path.validate(config);
    const int logits = g.logits();
    int child = logits;
    std::string suffix = "logits";
    for (std::size_t j = path.nodes.size() - 1; j-- > 0;) {
      const auto& here = path.nodes[j];
      const auto& receiver = path.nodes[j + 1];
      const ComponentId component = here.kind == ComponentKind::HeadInput ? here.owner() : here;
      const Positions pos = path.edge_positions(j);
      const std::string channel =
          receiver.kind == ComponentKind::HeadInput ? std::string(to_string(receiver.channel)) : "*";
      std::string key = component.name() + "|" + channel + "@" + std::string(to_string(pos)) + ">" + suffix;
      int id;
      if (auto it = instances.find(key); it != instances.end()) {
        id = it->second;
        if (j == 0) g.nodes[static_cast<std::size_t>(id)].source = true;
      } else {
        id = g.add_node(component, j == 0);
        instances.emplace(key, id);
      }
      g.add_edge(id, child, receiver_channels(receiver), pos);
      child = id;
      suffix = std::move(key);
    }
  }
  g.finalize(config);
  return g;
}

// ---------------------------------------------------------------------------
// CircuitSpec

std::vector<ComponentId> year_span_heads() {
  return {ComponentId::head(5, 1),  ComponentId::head(5, 5), ComponentId::head(6, 9), ComponentId::head(7, 10),
          ComponentId::head(8, 8),  ComponentId::head(8, 11), ComponentId::head(9, 1)};
}

CircuitSpec CircuitSpec::year_span() {
  CircuitSpec c;
  c.name = "year-span";
  const auto logits = ComponentId::logits();
  for (const auto& h : year_span_heads()) {
    c.edges.push_back({h, h.layer == 9 ? ComponentId::mlp(9) : ComponentId::mlp(8), Positions::End});
    c.edges.push_back({h, logits, Positions::End});
  }
  for (int a = 8; a <= 11; ++a) {
    for (int b = a + 1; b <= 11; ++b) c.edges.push_back({ComponentId::mlp(a), ComponentId::mlp(b), Positions::End});
    c.edges.push_back({ComponentId::mlp(a), logits, Positions::End});
  }
  return c;
}

CircuitSpec CircuitSpec::full() {
  CircuitSpec c = year_span();
  c.name = "full";
  const std::vector<ComponentId> low = {ComponentId::head(0, 1), ComponentId::head(0, 3), ComponentId::head(0, 5),
                                        ComponentId::mlp(0),     ComponentId::mlp(1),     ComponentId::mlp(2),
                                        ComponentId::mlp(3)};
  for (const auto& r : low) {
    c.edges.push_back({ComponentId::token_embed(), r, Positions::All});
    c.edges.push_back({ComponentId::pos_embed(), r, Positions::All});
  }
  for (const auto& s : low) {
    for (const auto& r : low) {
      if (s.precedes(r)) c.edges.push_back({s, r, Positions::YY});
    }
    for (const auto& h : year_span_heads()) {
      c.edges.push_back({s, ComponentId::head_input(h.layer, h.index, Channel::K), Positions::YY});
      c.edges.push_back({s, ComponentId::head_input(h.layer, h.index, Channel::V), Positions::YY});
    }
  }
  for (const auto& h : year_span_heads()) {
    c.clean_inputs.push_back({ComponentId::head_input(h.layer, h.index, Channel::Q), Positions::End});
  }
  return c;
}

CircuitSpec CircuitSpec::complete(const ModelConfig& config) {
  CircuitSpec c;
  c.name = "complete";
  std::vector<ComponentId> senders = {ComponentId::token_embed(), ComponentId::pos_embed()};
  const auto body = all_heads_and_mlps(config);
  senders.insert(senders.end(), body.begin(), body.end());
  for (const auto& s : senders) {
    for (const auto& r : body) {
      if (s.precedes(r)) c.edges.push_back({s, r, Positions::All});
    }
    c.edges.push_back({s, ComponentId::logits(), Positions::All});
  }
  return c;
}

std::vector<ComponentId> CircuitSpec::components() const {
  std::set<ComponentId> seen;
  for (const auto& e : edges) {
    seen.insert(e.sender);
    if (e.receiver.kind != ComponentKind::Logits) seen.insert(e.receiver.owner());
  }
  for (const auto& ci : clean_inputs) seen.insert(ci.channel.owner());
  std::vector<ComponentId> out(seen.begin(), seen.end());
  std::stable_sort(out.begin(), out.end(), [](const ComponentId& a, const ComponentId& b) { return a.stage() < b.stage(); });
  return out;
}

std::vector<ComponentId> CircuitSpec::heads() const {
  std::vector<ComponentId> out;
  for (const auto& c : components()) {
    if (c.is_head()) out.push_back(c);
  }
  return out;
}

void CircuitSpec::validate(const ModelConfig& config) const {
  for (const auto& e : edges) {
    yearspan::validate(e.sender, config);
    yearspan::validate(e.receiver, config);
    if (!is_sender_kind(e.sender.kind)) throw std::invalid_argument("circuit edge has invalid sender " + e.sender.name());
    if (!is_receiver_kind(e.receiver.kind)) {
      throw std::invalid_argument("circuit edge has invalid receiver " + e.receiver.name());
    }
    if (!e.sender.precedes(e.receiver)) {
      throw std::invalid_argument("circuit edge " + e.sender.name() + " -> " + e.receiver.name() +
                                  " does not point downstream");
    }
  }
  for (const auto& ci : clean_inputs) {
    yearspan::validate(ci.channel, config);
    if (ci.channel.kind != ComponentKind::HeadInput) {
      throw std::invalid_argument("clean inputs must name a head input channel, not " + ci.channel.name());
    }
  }
}

ReplayGraph compile_circuit(const CircuitSpec& circuit, const ModelConfig& config) {
  circuit.validate(config);
  std::set<ComponentId> fed;
  for (const auto& e : circuit.edges) fed.insert(e.receiver.owner());
  for (const auto& ci : circuit.clean_inputs) fed.insert(ci.channel.owner());

  ReplayGraph g;
  std::map<ComponentId, int> index;
  for (const auto& c : circuit.components()) index.emplace(c, g.add_node(c, fed.count(c) == 0));
  for (const auto& e : circuit.edges) {
    const int to = e.receiver.kind == ComponentKind::Logits ? g.logits() : index.at(e.receiver.owner());
    g.add_edge(index.at(e.sender), to, receiver_channels(e.receiver), e.positions);
  }
  for (const auto& ci : circuit.clean_inputs) g.add_override(index.at(ci.channel.owner()), ci.channel.channel, ci.positions);
  g.finalize(config);
  return g;
}

std::vector<CircuitEdge> continuation(const CircuitSpec& circuit, const std::vector<ComponentId>& start) {
  std::set<ComponentId> reached;
  for (const auto& s : start) reached.insert(s.owner());
  auto edges = circuit.edges;
  std::stable_sort(edges.begin(), edges.end(),
                   [](const CircuitEdge& a, const CircuitEdge& b) { return a.sender.stage() < b.sender.stage(); });
  std::vector<CircuitEdge> out;
  for (const auto& e : edges) {
    if (!reached.count(e.sender)) continue;
    out.push_back(e);
    if (e.receiver.kind != ComponentKind::Logits) reached.insert(e.receiver.owner());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Running

Tensor patch_graph(const Gpt2Model& model, const ExamplePair& pair, const ReplayGraph& graph, BaseRun base) {
  const auto request = replay_cache_request(model.config(), {&graph});
  PairedDataset one;
  one.examples.push_back(pair);
  std::vector<float> resid;
  for_each_pair(model, one, request, base, [&](std::size_t, const ReplayContext& ctx) {
    resid = replay_end_residual(ctx, graph);
  });
  const std::size_t width = resid.size();
  const Tensor row({1, width}, std::move(resid));
  return model.logits_from_residual(row).reshaped({static_cast<std::size_t>(model.config().vocab_size)});
}

Tensor patch_paths(const Gpt2Model& model, const ExamplePair& pair, const PatchPlan& plan) {
  return patch_graph(model, pair, compile_paths(plan, model.config()), BaseRun::Clean);
}

std::vector<std::vector<std::vector<float>>> patched_residuals(const Gpt2Model& model, const PairedDataset& data,
                                                               const std::vector<ReplayGraph>& graphs,
                                                               BaseRun base) {
  std::vector<std::vector<std::vector<float>>> out(graphs.size(), std::vector<std::vector<float>>(data.size()));
  const auto request = replay_cache_request(model.config(), pointers(graphs));
  for_each_pair(model, data, request, base, [&](std::size_t i, const ReplayContext& ctx) {
    for (std::size_t g = 0; g < graphs.size(); ++g) out[g][i] = replay_end_residual(ctx, graphs[g]);
  });
  return out;
}

std::vector<std::vector<YearProbs>> patched_year_probs(const Gpt2Model& model, const Tokenizer& tok,
                                                       const PairedDataset& data,
                                                       const std::vector<ReplayGraph>& graphs, BaseRun base) {
  std::vector<std::vector<YearProbs>> out(graphs.size(), std::vector<YearProbs>(data.size()));
  if (graphs.empty()) return out;
  const auto request = replay_cache_request(model.config(), pointers(graphs));
  const auto width = static_cast<std::size_t>(model.config().d_model);
  for_each_pair(model, data, request, base, [&](std::size_t i, const ReplayContext& ctx) {
    Tensor rows({graphs.size(), width});
    for (std::size_t g = 0; g < graphs.size(); ++g) {
      const auto r = replay_end_residual(ctx, graphs[g]);
      std::copy(r.begin(), r.end(), rows.row(g).begin());
    }
    const Tensor logits = model.logits_from_residual(rows);
    for (std::size_t g = 0; g < graphs.size(); ++g) out[g][i] = year_probabilities(logits.row(g), tok);
  });
  return out;
}

Metrics patched_metrics(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                        const ReplayGraph& graph, BaseRun base) {
  const auto probs = patched_year_probs(model, tok, data, {graph}, base);
  return score(probs[0], start_years(data));
}

// ---------------------------------------------------------------------------
// Scans

const ScanEntry* ScanResult::find(const ComponentId& c) const {
  for (const auto& e : entries) {
    if (e.component == c) return &e;
  }
  return nullptr;
}

std::vector<ScanEntry> ScanResult::ranked() const {
  auto out = entries;
  std::stable_sort(out.begin(), out.end(),
                   [](const ScanEntry& a, const ScanEntry& b) { return std::abs(a.delta) > std::abs(b.delta); });
  return out;
}

ReplayGraph scan_graph(const ScanSpec& spec, const ComponentId& candidate, const ModelConfig& config) {
  ReplayGraph g;
  const int c = g.add_node(candidate, true);
  std::map<ComponentId, int> index;
  auto node = [&](const ComponentId& receiver) {
    if (receiver.kind == ComponentKind::Logits) return g.logits();
    const auto owner = receiver.owner();
    if (auto it = index.find(owner); it != index.end()) return it->second;
    const int id = g.add_node(owner, false);
    index.emplace(owner, id);
    return id;
  };
  bool connected = false;
  for (const auto& [receiver, pos] : spec.entries) {
    if (!candidate.precedes(receiver)) continue;
    g.add_edge(c, node(receiver), receiver_channels(receiver), pos);
    connected = true;
  }
  if (!connected) throw std::invalid_argument("scan candidate " + candidate.name() + " precedes no entry receiver");
  for (const auto& e : spec.continuation) {
    g.add_edge(node(e.sender), node(e.receiver), receiver_channels(e.receiver), e.positions);
  }
  g.finalize(config);
  return g;
}

ScanResult scan(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data, const ScanSpec& spec) {
  const auto& config = model.config();
  auto candidates = spec.candidates.empty() ? all_heads_and_mlps(config) : spec.candidates;
  std::vector<ComponentId> used;
  std::vector<ReplayGraph> graphs;
  for (const auto& c : candidates) {
    const bool reaches = std::any_of(spec.entries.begin(), spec.entries.end(),
                                     [&](const auto& entry) { return c.precedes(entry.first); });
    if (!reaches) continue;
    used.push_back(c);
    graphs.push_back(scan_graph(spec, c, config));
  }
  const auto years = start_years(data);
  ScanResult result;
  result.name = spec.name;
  result.baseline = mean_prob_diff(clean_year_probs(model, tok, data), years);
  const auto probs = patched_year_probs(model, tok, data, graphs, BaseRun::Clean);
  for (std::size_t g = 0; g < graphs.size(); ++g) {
    const double patched = mean_prob_diff(probs[g], years);
    result.entries.push_back({used[g], patched, patched - result.baseline});
  }
  return result;
}

ScanSpec direct_scan_spec(const std::vector<ComponentId>& chain, std::optional<std::vector<ComponentId>> downstream) {
  ScanSpec spec;
  const auto logits = ComponentId::logits();
  if (chain.empty()) {
    spec.name = "direct";
    spec.entries.push_back({logits, Positions::End});
    return spec;
  }
  spec.name = "via";
  for (const auto& c : chain) spec.name += " " + c.name();
  spec.entries.push_back({chain.front(), Positions::End});
  for (std::size_t i = 0; i + 1 < chain.size(); ++i) {
    if (!chain[i].precedes(chain[i + 1])) throw std::invalid_argument("receiver chain is not in topological order");
    spec.continuation.push_back({chain[i].owner(), chain[i + 1], Positions::End});
  }
  const auto last = chain.back().owner();
  std::vector<ComponentId> rest;
  if (downstream) {
    rest = *downstream;
  } else {
    for (int l = 8; l <= 11; ++l) rest.push_back(ComponentId::mlp(l));
  }
  std::erase_if(rest, [&](const ComponentId& d) { return !last.precedes(d); });
  for (const auto& d : rest) spec.continuation.push_back({last, d, Positions::End});
  for (const auto& a : rest) {
    for (const auto& b : rest) {
      if (a.precedes(b)) spec.continuation.push_back({a, b, Positions::End});
    }
    spec.continuation.push_back({a, logits, Positions::End});
  }
  spec.continuation.push_back({last, logits, Positions::End});
  return spec;
}

ScanResult scan_direct(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                       const std::vector<ComponentId>& chain, std::optional<std::vector<ComponentId>> downstream) {
  for (const auto& c : chain) {
    validate(c, model.config());
    if (c.kind != ComponentKind::Mlp && c.kind != ComponentKind::Head && c.kind != ComponentKind::HeadInput) {
      throw std::invalid_argument("receiver chain may contain heads, head inputs and MLPs only, not " + c.name());
    }
  }
  return scan(model, tok, data, direct_scan_spec(chain, std::move(downstream)));
}

ScanSpec value_scan_spec(const std::vector<ComponentId>& target_heads, const CircuitSpec& context) {
  ScanSpec spec;
  spec.name = "values";
  for (const auto& h : target_heads) {
    if (!h.is_head()) throw std::invalid_argument("value scan target must be a head, not " + h.name());
    spec.entries.push_back({ComponentId::head_input(h.layer, h.index, Channel::V), Positions::YY});
  }
  spec.continuation = continuation(context, target_heads);
  return spec;
}

ScanResult scan_values(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                       const std::vector<ComponentId>& target_heads, const CircuitSpec& context) {
  if (target_heads.empty()) return ScanResult{"values", 0.0, {}};
  return scan(model, tok, data, value_scan_spec(target_heads, context));
}

Metrics evaluate_circuit(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                         const CircuitSpec& circuit) {
  return patched_metrics(model, tok, data, compile_circuit(circuit, model.config()), BaseRun::Corrupt);
}

Metrics knockout_circuit(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                         const CircuitSpec& circuit) {
  return patched_metrics(model, tok, data, compile_circuit(circuit, model.config()), BaseRun::Clean);
}

// ---------------------------------------------------------------------------
// Neurons and head channels

ReplayGraph downstream_graph(const std::vector<ComponentId>& sources, const ModelConfig& config) {
  if (sources.empty()) throw std::invalid_argument("downstream_graph needs at least one source");
  ReplayGraph g;
  std::vector<int> roots;
  for (const auto& s : sources) roots.push_back(g.add_node(s, true));
  add_downstream(g, roots, config);
  g.finalize(config);
  return g;
}

ReplayGraph neuron_graph(int layer, const std::vector<int>& neurons, bool direct_to_logits, const ModelConfig& config) {
  ReplayGraph g;
  if (neurons.empty()) return g;
  std::vector<ComponentId> ids;
  for (int n : neurons) {
    const auto id = ComponentId::neuron(layer, n);
    validate(id, config);
    ids.push_back(id);
  }
  if (!direct_to_logits) return downstream_graph(ids, config);
  const int logits = g.logits();
  for (const auto& id : ids) g.add_edge(g.add_node(id, true), logits, kAllChannels, Positions::End);
  g.finalize(config);
  return g;
}

Metrics patch_neurons(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data, int layer,
                      const std::vector<int>& neurons, bool direct_to_logits) {
  return patched_metrics(model, tok, data, neuron_graph(layer, neurons, direct_to_logits, model.config()),
                         BaseRun::Clean);
}

ScanResult scan_neurons_direct(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data, int layer,
                               std::size_t limit) {
  const auto& config = model.config();
  validate(ComponentId::mlp(layer), config);
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto d_mlp = static_cast<std::size_t>(config.d_mlp);
  const auto vocab = static_cast<std::size_t>(config.vocab_size);
  const std::size_t count = limit == 0 ? d_mlp : std::min(limit, d_mlp);
  const auto& w = model.weights();
  const double eps = config.ln_eps;

  // Per example: centred final residual at END, its variance, the projection
  // U (g * xc), and each neuron's activation change.
  const std::size_t n = data.size();
  std::vector<std::vector<float>> centred(n);
  std::vector<double> variance(n);
  std::vector<std::vector<float>> act_delta(n);
  Tensor projected({n, vocab});
  std::vector<YearProbs> baseline_probs(n);
  CacheRequest request{ComponentId::neuron(layer, 0)};
  for_each_pair(model, data, request, BaseRun::Clean, [&](std::size_t i, const ReplayContext& ctx) {
    const auto end = ctx.end_pos;
    auto x = ctx.base.final_resid().row(end);
    double mean = 0.0;
    for (float v : x) mean += v;
    mean /= static_cast<double>(d);
    centred[i].resize(d);
    double var = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      centred[i][k] = static_cast<float>(x[k] - mean);
      var += static_cast<double>(centred[i][k]) * centred[i][k];
    }
    variance[i] = var / static_cast<double>(d);
    Tensor scaled({1, d});
    for (std::size_t k = 0; k < d; ++k) scaled[k] = centred[i][k] * w.lnf_gain[k];
    const Tensor proj = model.unembed_rows(scaled);
    std::copy(proj.data().begin(), proj.data().end(), projected.row(i).begin());
    const auto& src = ctx.source.neuron_activations(layer);
    const auto& base = ctx.base.neuron_activations(layer);
    act_delta[i].resize(d_mlp);
    for (std::size_t k = 0; k < d_mlp; ++k) act_delta[i][k] = src.at(end, k) - base.at(end, k);
    const Tensor xrow({1, d}, std::vector<float>(x.begin(), x.end()));
    baseline_probs[i] = year_probabilities(model.logits_from_residual(xrow).row(0), tok);
  });
  const Tensor bias_proj = model.unembed_rows(w.lnf_bias.reshaped({1, d}));
  const auto years = start_years(data);

  ScanResult result;
  result.name = "neurons m" + std::to_string(layer) + " direct";
  result.baseline = mean_prob_diff(baseline_probs, years);
  result.entries.resize(count);

  constexpr std::size_t block = 32;
  const std::size_t blocks = (count + block - 1) / block;
  const auto& ids = tok.two_digit_ids();
  parallel_for(blocks, [&](std::size_t b) {
    const std::size_t lo = b * block, hi = std::min(count, lo + block);
    // Centred, gain-scaled neuron directions and their vocabulary projections.
    Tensor dirs({hi - lo, d});
    std::vector<double> dir_sq(hi - lo);
    std::vector<std::vector<float>> dir_centred(hi - lo, std::vector<float>(d));
    for (std::size_t j = lo; j < hi; ++j) {
      const auto row = w.layers[static_cast<std::size_t>(layer)].w_out.row(j);
      double mean = 0.0;
      for (float v : row) mean += v;
      mean /= static_cast<double>(d);
      double sq = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const float c = static_cast<float>(row[k] - mean);
        dir_centred[j - lo][k] = c;
        sq += static_cast<double>(c) * c;
        dirs.at(j - lo, k) = c * w.lnf_gain[k];
      }
      dir_sq[j - lo] = sq / static_cast<double>(d);
    }
    const Tensor dir_proj = model.unembed_rows(dirs);
    std::vector<float> logits(vocab);
    for (std::size_t j = lo; j < hi; ++j) {
      std::vector<YearProbs> probs(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double a = act_delta[i][j];
        double cross = 0.0;
        for (std::size_t k = 0; k < d; ++k) cross += static_cast<double>(centred[i][k]) * dir_centred[j - lo][k];
        cross /= static_cast<double>(d);
        const double var = variance[i] + 2.0 * a * cross + a * a * dir_sq[j - lo];
        const float inv_sigma = static_cast<float>(1.0 / std::sqrt(var + eps));
        const auto base_row = projected.row(i);
        const auto dir_row = dir_proj.row(j - lo);
        const auto af = static_cast<float>(a);
        float mx = -std::numeric_limits<float>::infinity();
        for (std::size_t v = 0; v < vocab; ++v) {
          logits[v] = (base_row[v] + af * dir_row[v]) * inv_sigma + bias_proj[v];
          mx = std::max(mx, logits[v]);
        }
        double total = 0.0;
        for (std::size_t v = 0; v < vocab; ++v) total += std::exp(logits[v] - mx);
        for (std::size_t y = 0; y < 100; ++y) {
          probs[i][y] = std::exp(static_cast<double>(logits[static_cast<std::size_t>(ids[y])]) - mx) / total;
        }
      }
      const double patched = mean_prob_diff(probs, years);
      result.entries[j] = {ComponentId::neuron(layer, static_cast<int>(j)), patched, patched - result.baseline};
    }
  });
  return result;
}

ReplayGraph head_channel_graph(int layer, int head, Channel channel, Positions pos, const ModelConfig& config) {
  ReplayGraph g;
  const auto id = ComponentId::head(layer, head);
  validate(id, config);
  const int h = g.add_node(id, false);
  g.add_override(h, channel, pos);
  add_downstream(g, {h}, config);
  g.finalize(config);
  return g;
}

Metrics patch_head_channel(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data, int layer,
                           int head, Channel channel, Positions pos) {
  return patched_metrics(model, tok, data, head_channel_graph(layer, head, channel, pos, model.config()),
                         BaseRun::Clean);
}

}  // namespace yearspan
