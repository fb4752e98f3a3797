#pragma once

#include "yearspan/component.hpp"
#include "yearspan/model.hpp"

#include <cstdint>
#include <string_view>
#include <vector>

namespace yearspan {

// Which token positions an edge (or an input override) acts on.
enum class Positions { End, YY, All, AllButYY };

std::string_view to_string(Positions p);
Positions parse_positions(std::string_view s);
std::vector<std::size_t> resolve(Positions p, std::size_t yy_pos, std::size_t end_pos, std::size_t length);

inline constexpr std::uint8_t channel_bit(Channel c) { return static_cast<std::uint8_t>(1u << static_cast<unsigned>(c)); }
inline constexpr std::uint8_t kAllChannels = 0b111;

// A compiled intervention: nodes are component instances, edges carry the
// difference between an instance's replayed output and its base-run output.
//
// Source nodes emit (source run - base run). Recompute nodes rebuild their
// input from the base-run residual plus the deltas on their incoming edges,
// rerun the component (layernorm included), and emit (new - base). The
// logits node sums its incoming deltas into the base final residual at END.
// Off-graph components keep their base-run values.
struct ReplayGraph {
  struct Node {
    ComponentId component;  // TokenEmbed, PosEmbed, Head, Mlp, Neuron or Logits
    bool source = false;
  };
  struct Edge {
    int from = 0;
    int to = 0;
    std::uint8_t channels = kAllChannels;  // head receivers only
    Positions positions = Positions::End;
    friend auto operator<=>(const Edge&, const Edge&) = default;
  };
  // Replace a head's channel input with the source run's residual.
  struct Override {
    int node = 0;
    Channel channel = Channel::Q;
    Positions positions = Positions::All;
    friend auto operator<=>(const Override&, const Override&) = default;
  };

  std::vector<Node> nodes;
  std::vector<Edge> edges;
  std::vector<Override> overrides;

  int add_node(const ComponentId& component, bool source);
  // Returns the single logits node, creating it on first use.
  int logits();
  void add_edge(int from, int to, std::uint8_t channels, Positions positions);
  void add_override(int node, Channel channel, Positions positions);

  // Orders nodes topologically, drops duplicate edges and edges into source
  // nodes, and validates the result against the model configuration.
  void finalize(const ModelConfig& config);
  void validate(const ModelConfig& config) const;

  bool empty() const { return edges.empty() && overrides.empty(); }
  bool uses_neurons(int layer) const;
};

struct ReplayContext {
  const Gpt2Model& model;
  const ActivationCache& base;
  const ActivationCache& source;
  std::size_t yy_pos = 0;
  std::size_t end_pos = 0;
};

// Cache contents a replay needs from both runs.
CacheRequest replay_cache_request(const ModelConfig& config, const std::vector<const ReplayGraph*>& graphs);

// Final residual at END after the intervention (before the final layernorm).
std::vector<float> replay_end_residual(const ReplayContext& ctx, const ReplayGraph& graph);

}  // namespace yearspan
