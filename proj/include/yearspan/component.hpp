#pragma once

#include <compare>
#include <cstddef>
#include <functional>
#include <string>
#include <string_view>

namespace yearspan {

struct ModelConfig;

enum class ComponentKind { TokenEmbed, PosEmbed, Head, HeadInput, Mlp, Neuron, Logits };

enum class Channel { Q = 0, K = 1, V = 2 };

// Address of a node in the model's computational graph.
//
// Names follow the usual interpretability shorthand: "a7.h10" is head 10 of
// attention layer 7, "a7.h10.v" its value input, "m8" the layer-8 MLP,
// "m10.n42" neuron 42 of that MLP, plus "embed", "pos_embed" and "logits".
struct ComponentId {
  ComponentKind kind = ComponentKind::Logits;
  int layer = -1;
  int index = -1;
  Channel channel = Channel::Q;

  static ComponentId token_embed() { return {ComponentKind::TokenEmbed, -1, -1, Channel::Q}; }
  static ComponentId pos_embed() { return {ComponentKind::PosEmbed, -1, -1, Channel::Q}; }
  static ComponentId head(int layer, int head) { return {ComponentKind::Head, layer, head, Channel::Q}; }
  static ComponentId head_input(int layer, int head, Channel ch) { return {ComponentKind::HeadInput, layer, head, ch}; }
  static ComponentId mlp(int layer) { return {ComponentKind::Mlp, layer, -1, Channel::Q}; }
  static ComponentId neuron(int layer, int index) { return {ComponentKind::Neuron, layer, index, Channel::Q}; }
  static ComponentId logits() { return {ComponentKind::Logits, -1, -1, Channel::Q}; }

  static ComponentId parse(std::string_view name);
  std::string name() const;

  bool is_head() const { return kind == ComponentKind::Head; }
  bool is_mlp() const { return kind == ComponentKind::Mlp; }
  bool is_embed() const { return kind == ComponentKind::TokenEmbed || kind == ComponentKind::PosEmbed; }

  // The head a HeadInput belongs to, or the MLP a Neuron belongs to.
  ComponentId owner() const;

  // Position in a topological order of the residual stream: embeddings,
  // then per layer attention before MLP, then logits.
  int stage() const;
  bool precedes(const ComponentId& other) const { return stage() < other.stage(); }

  friend auto operator<=>(const ComponentId&, const ComponentId&) = default;
};

// Throws std::out_of_range if indices exceed the configuration.
void validate(const ComponentId& id, const ModelConfig& config);

std::string_view to_string(Channel ch);

}  // namespace yearspan

template <>
struct std::hash<yearspan::ComponentId> {
  std::size_t operator()(const yearspan::ComponentId& c) const noexcept {
    return (static_cast<std::size_t>(c.kind) * 1315423911u) ^ (static_cast<std::size_t>(c.layer + 1) << 20) ^
           (static_cast<std::size_t>(c.index + 1) << 4) ^ static_cast<std::size_t>(c.channel);
  }
};
