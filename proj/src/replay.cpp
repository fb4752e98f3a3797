#include "yearspan/replay.hpp"

#include <algorithm>
#include <array>
#include <numeric>
#include <optional>
#include <stdexcept>

namespace yearspan {

std::string_view to_string(Positions p) {
  switch (p) {
    case Positions::End: return "end";
    case Positions::YY: return "yy";
    case Positions::All: return "all";
    case Positions::AllButYY: return "all-but-yy";
  }
  return "?";
}

Positions parse_positions(std::string_view s) {
  if (s == "end") return Positions::End;
  if (s == "yy") return Positions::YY;
  if (s == "all") return Positions::All;
  if (s == "all-but-yy") return Positions::AllButYY;
  throw std::invalid_argument("unknown position selector '" + std::string(s) + "'");
}

std::vector<std::size_t> resolve(Positions p, std::size_t yy_pos, std::size_t end_pos, std::size_t length) {
  if (yy_pos >= length || end_pos >= length) throw std::out_of_range("position selector outside the sequence");
  std::vector<std::size_t> out;
  switch (p) {
    case Positions::End: out.push_back(end_pos); break;
    case Positions::YY: out.push_back(yy_pos); break;
    case Positions::All:
      out.resize(length);
      std::iota(out.begin(), out.end(), std::size_t{0});
      break;
    case Positions::AllButYY:
      for (std::size_t t = 0; t < length; ++t) {
        if (t != yy_pos) out.push_back(t);
      }
      break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// ReplayGraph

int ReplayGraph::add_node(const ComponentId& component, bool source) {
  if (component.kind == ComponentKind::Logits) return logits();
  nodes.push_back({component, source});
  return static_cast<int>(nodes.size()) - 1;
}

int ReplayGraph::logits() {
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].component.kind == ComponentKind::Logits) return static_cast<int>(i);
  }
  nodes.push_back({ComponentId::logits(), false});
  return static_cast<int>(nodes.size()) - 1;
}

void ReplayGraph::add_edge(int from, int to, std::uint8_t channels, Positions positions) {
  edges.push_back({from, to, channels, positions});
}

void ReplayGraph::add_override(int node, Channel channel, Positions positions) {
  overrides.push_back({node, channel, positions});
}

bool ReplayGraph::uses_neurons(int layer) const {
  return std::any_of(nodes.begin(), nodes.end(), [&](const Node& n) {
    return n.component.kind == ComponentKind::Neuron && n.component.layer == layer;
  });
}

void ReplayGraph::finalize(const ModelConfig& config) {
  std::vector<int> order(nodes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return nodes[static_cast<std::size_t>(a)].component.stage() < nodes[static_cast<std::size_t>(b)].component.stage();
  });
  std::vector<int> remap(nodes.size());
  std::vector<Node> sorted;
  sorted.reserve(nodes.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    remap[static_cast<std::size_t>(order[i])] = static_cast<int>(i);
    sorted.push_back(nodes[static_cast<std::size_t>(order[i])]);
  }
  nodes = std::move(sorted);

  std::vector<Edge> kept;
  for (Edge e : edges) {
    if (e.from < 0 || e.to < 0 || static_cast<std::size_t>(e.from) >= remap.size() ||
        static_cast<std::size_t>(e.to) >= remap.size()) {
      throw std::invalid_argument("replay edge references a missing node");
    }
    e.from = remap[static_cast<std::size_t>(e.from)];
    e.to = remap[static_cast<std::size_t>(e.to)];
    const auto& receiver = nodes[static_cast<std::size_t>(e.to)];
    if (receiver.source) continue;
    if (receiver.component.kind != ComponentKind::Head) e.channels = kAllChannels;
    kept.push_back(e);
  }
  std::sort(kept.begin(), kept.end());
  kept.erase(std::unique(kept.begin(), kept.end()), kept.end());
  edges = std::move(kept);

  for (auto& o : overrides) {
    if (o.node < 0 || static_cast<std::size_t>(o.node) >= remap.size()) {
      throw std::invalid_argument("input override references a missing node");
    }
    o.node = remap[static_cast<std::size_t>(o.node)];
  }
  std::sort(overrides.begin(), overrides.end());
  overrides.erase(std::unique(overrides.begin(), overrides.end()), overrides.end());
  validate(config);
}

void ReplayGraph::validate(const ModelConfig& config) const {
  int logits_nodes = 0;
  for (const auto& n : nodes) {
    yearspan::validate(n.component, config);
    switch (n.component.kind) {
      case ComponentKind::Logits:
        ++logits_nodes;
        if (n.source) throw std::invalid_argument("the logits cannot be a patch source");
        break;
      case ComponentKind::HeadInput:
        throw std::invalid_argument("head input channels are edge receivers, not graph nodes");
      case ComponentKind::TokenEmbed:
      case ComponentKind::PosEmbed:
      case ComponentKind::Neuron:
        if (!n.source) throw std::invalid_argument(n.component.name() + " has no inputs and can only be a source");
        break;
      case ComponentKind::Head:
      case ComponentKind::Mlp: break;
    }
  }
  if (logits_nodes > 1) throw std::invalid_argument("replay graph has more than one logits node");
  for (const auto& e : edges) {
    if (e.from < 0 || e.to < 0 || static_cast<std::size_t>(e.from) >= nodes.size() ||
        static_cast<std::size_t>(e.to) >= nodes.size()) {
      throw std::invalid_argument("replay edge references a missing node");
    }
    const auto& s = nodes[static_cast<std::size_t>(e.from)].component;
    const auto& r = nodes[static_cast<std::size_t>(e.to)];
    if (s.kind == ComponentKind::Logits) throw std::invalid_argument("the logits cannot send");
    if (r.source) throw std::invalid_argument("edge into source node " + r.component.name());
    if (!s.precedes(r.component) || e.from >= e.to) {
      throw std::invalid_argument("edge " + s.name() + " -> " + r.component.name() + " does not point downstream");
    }
    if ((e.channels & kAllChannels) == 0) throw std::invalid_argument("edge selects no head channel");
  }
  for (const auto& o : overrides) {
    const auto& n = nodes[static_cast<std::size_t>(o.node)];
    if (n.component.kind != ComponentKind::Head || n.source) {
      throw std::invalid_argument("input overrides apply to recomputed heads only, not " + n.component.name());
    }
  }
}

CacheRequest replay_cache_request(const ModelConfig& config, const std::vector<const ReplayGraph*>& graphs) {
  CacheRequest req = all_components(config);
  for (const auto* g : graphs) {
    for (const auto& n : g->nodes) {
      if (n.component.kind == ComponentKind::Neuron) req.insert(ComponentId::neuron(n.component.layer, 0));
    }
  }
  return req;
}

// ---------------------------------------------------------------------------
// Replay

namespace {

class Replayer {
 public:
  Replayer(const ReplayContext& ctx, const ReplayGraph& graph)
      : ctx_(ctx),
        graph_(graph),
        length_(ctx.base.length()),
        width_(static_cast<std::size_t>(ctx.model.config().d_model)) {
    if (ctx.source.length() != length_) throw ModelError("replay: base and source runs differ in length");
    if (ctx.end_pos >= length_ || ctx.yy_pos >= length_) throw ModelError("replay: positions outside the sequence");
    incoming_.resize(graph.nodes.size());
    for (const auto& e : graph.edges) incoming_[static_cast<std::size_t>(e.to)].push_back(&e);
    overrides_.resize(graph.nodes.size());
    for (const auto& o : graph.overrides) overrides_[static_cast<std::size_t>(o.node)].push_back(&o);
  }

  std::vector<float> run() {
    deltas_.assign(graph_.nodes.size(), Tensor());
    auto final_row = ctx_.base.final_resid().row(ctx_.end_pos);
    std::vector<float> out(final_row.begin(), final_row.end());
    for (std::size_t i = 0; i < graph_.nodes.size(); ++i) {
      const auto& node = graph_.nodes[i];
      if (node.component.kind == ComponentKind::Logits) {
        for (const auto* e : incoming_[i]) {
          const Tensor& d = deltas_[static_cast<std::size_t>(e->from)];
          if (d.empty() || !covers(e->positions, ctx_.end_pos)) continue;
          auto row = d.row(ctx_.end_pos);
          for (std::size_t c = 0; c < width_; ++c) out[c] += row[c];
        }
      } else if (node.source) {
        deltas_[i] = source_delta(node.component);
      } else if (node.component.kind == ComponentKind::Mlp) {
        deltas_[i] = recompute_mlp(i);
      } else {
        deltas_[i] = recompute_head(i);
      }
    }
    return out;
  }

 private:
  const std::vector<std::size_t>& positions(Positions p) {
    auto& slot = resolved_[static_cast<std::size_t>(p)];
    if (!slot) slot = resolve(p, ctx_.yy_pos, ctx_.end_pos, length_);
    return *slot;
  }

  bool covers(Positions p, std::size_t t) {
    const auto& ps = positions(p);
    return std::binary_search(ps.begin(), ps.end(), t);
  }

  Tensor source_delta(const ComponentId& c) {
    if (c.kind == ComponentKind::Neuron) {
      const Tensor& src = ctx_.source.neuron_activations(c.layer);
      const Tensor& base = ctx_.base.neuron_activations(c.layer);
      const auto dir = ctx_.model.neuron_direction(c.layer, c.index);
      const auto n = static_cast<std::size_t>(c.index);
      Tensor d({length_, width_});
      for (std::size_t t = 0; t < length_; ++t) {
        const float a = src.at(t, n) - base.at(t, n);
        if (a == 0.0f) continue;
        auto row = d.row(t);
        for (std::size_t k = 0; k < width_; ++k) row[k] = a * dir[k];
      }
      return d;
    }
    return subtract(ctx_.source.output(c), ctx_.base.output(c));
  }

  void add_rows(Tensor& target, const Tensor& delta, Positions p, const std::vector<std::size_t>* row_of_position) {
    for (std::size_t t : positions(p)) {
      const std::size_t r = row_of_position ? (*row_of_position)[t] : t;
      auto dst = target.row(r);
      auto src = delta.row(t);
      for (std::size_t k = 0; k < width_; ++k) dst[k] += src[k];
    }
  }

  Tensor recompute_mlp(std::size_t i) {
    const int layer = graph_.nodes[i].component.layer;
    std::vector<bool> touched(length_, false);
    bool any = false;
    for (const auto* e : incoming_[i]) {
      if (deltas_[static_cast<std::size_t>(e->from)].empty()) continue;
      for (std::size_t t : positions(e->positions)) touched[t] = true;
      any = true;
    }
    if (!any) return Tensor();

    std::vector<std::size_t> rows;
    std::vector<std::size_t> row_of(length_, 0);
    for (std::size_t t = 0; t < length_; ++t) {
      if (!touched[t]) continue;
      row_of[t] = rows.size();
      rows.push_back(t);
    }
    const Tensor& resid = ctx_.base.resid_mid(layer);
    Tensor base_in({rows.size(), width_});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      auto src = resid.row(rows[r]);
      std::copy(src.begin(), src.end(), base_in.row(r).begin());
    }
    Tensor in = base_in;
    for (const auto* e : incoming_[i]) {
      const Tensor& d = deltas_[static_cast<std::size_t>(e->from)];
      if (!d.empty()) add_rows(in, d, e->positions, &row_of);
    }
    // Both sides go through the same row subset so unchanged rows cancel exactly.
    const Tensor changed = ctx_.model.mlp_from_resid(layer, in).out;
    const Tensor reference = ctx_.model.mlp_from_resid(layer, base_in).out;
    Tensor out({length_, width_});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      auto dst = out.row(rows[r]);
      auto a = changed.row(r);
      auto b = reference.row(r);
      for (std::size_t k = 0; k < width_; ++k) dst[k] = a[k] - b[k];
    }
    return out;
  }

  Tensor recompute_head(std::size_t i) {
    const auto& c = graph_.nodes[i].component;
    const Tensor& base = ctx_.base.resid_pre(c.layer);
    std::array<std::optional<Tensor>, 3> channel;
    auto writable = [&](std::size_t ch) -> Tensor& {
      if (!channel[ch]) channel[ch] = base;
      return *channel[ch];
    };
    for (const auto* o : overrides_[i]) {
      Tensor& t = writable(static_cast<std::size_t>(o->channel));
      const Tensor& src = ctx_.source.resid_pre(c.layer);
      for (std::size_t p : positions(o->positions)) {
        auto s = src.row(p);
        std::copy(s.begin(), s.end(), t.row(p).begin());
      }
    }
    for (const auto* e : incoming_[i]) {
      const Tensor& d = deltas_[static_cast<std::size_t>(e->from)];
      if (d.empty()) continue;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        if (e->channels & (1u << ch)) add_rows(writable(ch), d, e->positions, nullptr);
      }
    }
    if (!channel[0] && !channel[1] && !channel[2]) return Tensor();
    const Tensor& q = channel[0] ? *channel[0] : base;
    const Tensor& k = channel[1] ? *channel[1] : base;
    const Tensor& v = channel[2] ? *channel[2] : base;
    const auto result = ctx_.model.head_from_resid(c.layer, c.index, q, k, v);
    return subtract(result.out, ctx_.base.head_output(c.layer, c.index));
  }

  const ReplayContext& ctx_;
  const ReplayGraph& graph_;
  std::size_t length_;
  std::size_t width_;
  std::vector<std::vector<const ReplayGraph::Edge*>> incoming_;
  std::vector<std::vector<const ReplayGraph::Override*>> overrides_;
  std::vector<Tensor> deltas_;
  std::array<std::optional<std::vector<std::size_t>>, 4> resolved_;
};

}  // namespace

std::vector<float> replay_end_residual(const ReplayContext& ctx, const ReplayGraph& graph) {
  return Replayer(ctx, graph).run();
}

}  // namespace yearspan
