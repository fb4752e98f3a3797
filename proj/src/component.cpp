#include "yearspan/component.hpp"

#include "yearspan/model.hpp"

#include <charconv>
#include <stdexcept>

namespace yearspan {

namespace {

int parse_int(std::string_view s, std::string_view whole) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw std::invalid_argument("bad component name: " + std::string(whole));
  }
  return v;
}

}  // namespace

std::string_view to_string(Channel ch) {
  switch (ch) {
    case Channel::Q: return "q";
    case Channel::K: return "k";
    case Channel::V: return "v";
  }
  return "?";
}

std::string ComponentId::name() const {
  switch (kind) {
    case ComponentKind::TokenEmbed: return "embed";
    case ComponentKind::PosEmbed: return "pos_embed";
    case ComponentKind::Head: return "a" + std::to_string(layer) + ".h" + std::to_string(index);
    case ComponentKind::HeadInput:
      return "a" + std::to_string(layer) + ".h" + std::to_string(index) + "." + std::string(to_string(channel));
    case ComponentKind::Mlp: return "m" + std::to_string(layer);
    case ComponentKind::Neuron: return "m" + std::to_string(layer) + ".n" + std::to_string(index);
    case ComponentKind::Logits: return "logits";
  }
  return "?";
}

ComponentId ComponentId::parse(std::string_view name) {
  if (name == "embed") return token_embed();
  if (name == "pos_embed") return pos_embed();
  if (name == "logits") return logits();
  if (name.size() >= 2 && name[0] == 'a') {
    const auto dot = name.find(".h");
    if (dot == std::string_view::npos) throw std::invalid_argument("bad component name: " + std::string(name));
    const int layer = parse_int(name.substr(1, dot - 1), name);
    auto rest = name.substr(dot + 2);
    const auto ch_dot = rest.find('.');
    if (ch_dot == std::string_view::npos) return head(layer, parse_int(rest, name));
    const int h = parse_int(rest.substr(0, ch_dot), name);
    const auto ch = rest.substr(ch_dot + 1);
    if (ch == "q") return head_input(layer, h, Channel::Q);
    if (ch == "k") return head_input(layer, h, Channel::K);
    if (ch == "v") return head_input(layer, h, Channel::V);
    throw std::invalid_argument("bad channel in component name: " + std::string(name));
  }
  if (name.size() >= 2 && name[0] == 'm') {
    const auto dot = name.find(".n");
    if (dot == std::string_view::npos) return mlp(parse_int(name.substr(1), name));
    return neuron(parse_int(name.substr(1, dot - 1), name), parse_int(name.substr(dot + 2), name));
  }
  throw std::invalid_argument("bad component name: " + std::string(name));
}

ComponentId ComponentId::owner() const {
  if (kind == ComponentKind::HeadInput) return head(layer, index);
  if (kind == ComponentKind::Neuron) return mlp(layer);
  return *this;
}

int ComponentId::stage() const {
  switch (kind) {
    case ComponentKind::TokenEmbed:
    case ComponentKind::PosEmbed: return 0;
    case ComponentKind::Head:
    case ComponentKind::HeadInput: return 1 + 2 * layer;
    case ComponentKind::Mlp:
    case ComponentKind::Neuron: return 2 + 2 * layer;
    case ComponentKind::Logits: return 1 << 20;
  }
  return 0;
}

void validate(const ComponentId& id, const ModelConfig& config) {
  auto fail = [&] { throw std::out_of_range("component out of range for model: " + id.name()); };
  switch (id.kind) {
    case ComponentKind::TokenEmbed:
    case ComponentKind::PosEmbed:
    case ComponentKind::Logits: return;
    case ComponentKind::Head:
    case ComponentKind::HeadInput:
      if (id.layer < 0 || id.layer >= config.n_layers || id.index < 0 || id.index >= config.n_heads) fail();
      return;
    case ComponentKind::Mlp:
      if (id.layer < 0 || id.layer >= config.n_layers) fail();
      return;
    case ComponentKind::Neuron:
      if (id.layer < 0 || id.layer >= config.n_layers || id.index < 0 || id.index >= config.d_mlp) fail();
      return;
  }
}

}  // namespace yearspan
