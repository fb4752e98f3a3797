#include "support.hpp"

#include "yearspan/patching.hpp"

#include <numeric>

using namespace yearspan;
using yearspan::testing::small_dataset;
using yearspan::testing::tiny_model;
using yearspan::testing::tokenizer;

namespace {

struct Runs {
  Gpt2Model::Run clean, corrupt;
};

Runs run_pair(const ExamplePair& pair) {
  auto request = all_components(tiny_model().config());
  request.insert(ComponentId::neuron(3, 0));
  return {tiny_model().forward_with_cache(pair.clean.tokens, request),
          tiny_model().forward_with_cache(pair.corrupt.tokens, request)};
}

Tensor masked(const Tensor& t, Positions pos, const YearSpanExample& ex) {
  Tensor out = Tensor::zeros(t.shape());
  for (std::size_t r : resolve(pos, ex.yy_pos, ex.end_pos, t.rows())) {
    std::copy(t.row(r).begin(), t.row(r).end(), out.row(r).begin());
  }
  return out;
}

// T x d_model write of a sender (neurons: activation times direction).
Tensor sender_output(const ActivationCache& cache, const ComponentId& id) {
  if (id.kind != ComponentKind::Neuron) return cache.output(id);
  const auto acts = cache.output(id);
  const auto dir = tiny_model().neuron_direction(id.layer, id.index);
  Tensor out({acts.size(), dir.size()});
  for (std::size_t t = 0; t < acts.size(); ++t) {
    for (std::size_t k = 0; k < dir.size(); ++k) out.at(t, k) = acts[t] * dir[k];
  }
  return out;
}

// Independent single-path evaluation: full-sequence recomputation of every
// intermediate receiver, no graph compilation.
Tensor naive_path_logits(const ExamplePair& pair, const Runs& runs, const PathSpec& path) {
  const auto& model = tiny_model();
  const auto& base = runs.clean.cache;
  const auto& src = runs.corrupt.cache;
  const auto& ex = pair.clean;
  Tensor delta = masked(subtract(sender_output(src, path.nodes[0]), sender_output(base, path.nodes[0])),
                        path.edge_positions(0), ex);
  for (std::size_t j = 1; j + 1 < path.nodes.size(); ++j) {
    const auto& r = path.nodes[j];
    const auto owner = r.owner();
    Tensor fresh;
    if (owner.is_head()) {
      const auto& resid = base.resid_pre(owner.layer);
      const bool all = r.kind == ComponentKind::Head;
      const Tensor patched = add(resid, delta);
      const Tensor& q = all || r.channel == Channel::Q ? patched : resid;
      const Tensor& k = all || r.channel == Channel::K ? patched : resid;
      const Tensor& v = all || r.channel == Channel::V ? patched : resid;
      fresh = model.head_from_resid(owner.layer, owner.index, q, k, v).out;
    } else {
      fresh = model.mlp_from_resid(owner.layer, add(base.resid_mid(owner.layer), delta)).out;
    }
    delta = masked(subtract(fresh, base.output(owner)), path.edge_positions(j), ex);
  }
  Tensor x = base.final_resid().slice_rows(ex.end_pos, ex.end_pos + 1);
  for (std::size_t k = 0; k < x.size(); ++k) x[k] += delta.at(ex.end_pos, k);
  return model.logits_from_residual(x).reshaped({static_cast<std::size_t>(model.config().vocab_size)});
}

ExamplePair example(std::size_t i = 0) { return small_dataset().examples.at(i); }

}  // namespace

TEST(Patching, NoOpPatchIsBitwiseIdentity) {
  const auto pair = example();
  const auto patched = patch_paths(tiny_model(), pair, PatchPlan{});
  const auto plain = tiny_model().forward_with_cache(pair.clean.tokens, {}, true).logits;
  EXPECT_EQ(patched.values(), plain.values());
}

TEST(Patching, AllDirectPathsReproduceCorruptLogits) {
  const auto pair = example(1);
  PatchPlan plan;
  plan.paths.push_back(PathSpec::direct(ComponentId::token_embed()));
  plan.paths.push_back(PathSpec::direct(ComponentId::pos_embed()));
  const auto& config = tiny_model().config();
  for (int l = 0; l < config.n_layers; ++l) {
    for (int h = 0; h < config.n_heads; ++h) plan.paths.push_back(PathSpec::direct(ComponentId::head(l, h)));
    plan.paths.push_back(PathSpec::direct(ComponentId::mlp(l)));
  }
  const auto patched = patch_paths(tiny_model(), pair, plan);
  const auto corrupt = tiny_model().forward_with_cache(pair.corrupt.tokens, {}, true).logits;
  EXPECT_LT(max_abs_diff(patched.data(), corrupt.row(0)), 1e-4f);
}

TEST(Patching, CompleteCircuitReproducesSourceRun) {
  const auto pair = example(2);
  const auto graph = compile_circuit(CircuitSpec::complete(tiny_model().config()), tiny_model().config());
  const auto patched = patch_graph(tiny_model(), pair, graph, BaseRun::Clean);
  const auto corrupt = tiny_model().forward_with_cache(pair.corrupt.tokens, {}, true).logits;
  EXPECT_LT(max_abs_diff(patched.data(), corrupt.row(0)), 1e-4f);
  const auto back = patch_graph(tiny_model(), pair, graph, BaseRun::Corrupt);
  const auto clean = tiny_model().forward_with_cache(pair.clean.tokens, {}, true).logits;
  EXPECT_LT(max_abs_diff(back.data(), clean.row(0)), 1e-4f);
}

TEST(Patching, SinglePathsMatchBruteForce) {
  const auto pair = example(3);
  const auto runs = run_pair(pair);
  const std::vector<PathSpec> paths = {
      PathSpec::direct(ComponentId::mlp(4)),
      PathSpec::direct(ComponentId::head(2, 7), Positions::End),
      PathSpec::through({ComponentId::head(1, 3), ComponentId::mlp(6), ComponentId::logits()}),
      PathSpec{{ComponentId::mlp(0), ComponentId::head_input(5, 1, Channel::V), ComponentId::logits()},
               {Positions::YY, Positions::End}},
      PathSpec{{ComponentId::mlp(0), ComponentId::head_input(5, 1, Channel::K), ComponentId::logits()},
               {Positions::All, Positions::End}},
      PathSpec{{ComponentId::head(0, 1), ComponentId::head_input(3, 3, Channel::Q), ComponentId::mlp(8),
                ComponentId::logits()},
               {Positions::End, Positions::End, Positions::End}},
      PathSpec{{ComponentId::token_embed(), ComponentId::mlp(0), ComponentId::head(4, 4), ComponentId::mlp(9),
                ComponentId::logits()},
               {Positions::YY, Positions::All, Positions::End, Positions::End}},
      PathSpec{{ComponentId::neuron(3, 17), ComponentId::mlp(7), ComponentId::logits()},
               {Positions::All, Positions::End}},
  };
  for (const auto& path : paths) {
    const auto engine = patch_paths(tiny_model(), pair, PatchPlan{{path}});
    const auto naive = naive_path_logits(pair, runs, path);
    EXPECT_LT(max_abs_diff(engine, naive), 1e-4f) << path.name();
  }
}

TEST(Patching, PathsWithDistinctRoutesAddAtTheLogits) {
  const auto pair = example(4);
  const auto runs = run_pair(pair);
  const PathSpec a = PathSpec::through({ComponentId::head(2, 2), ComponentId::mlp(9), ComponentId::logits()});
  const PathSpec b = PathSpec::through({ComponentId::head(2, 2), ComponentId::logits()});
  const PathSpec c = PathSpec::through({ComponentId::mlp(3), ComponentId::mlp(9), ComponentId::logits()});
  const auto both = patch_paths(tiny_model(), pair, PatchPlan{{a, b}});
  // Same sender on two routes: each route sees only its own perturbation.
  const auto& base = runs.clean.cache;
  const auto& model = tiny_model();
  const auto end = pair.clean.end_pos;
  Tensor x = base.final_resid().slice_rows(end, end + 1);
  const auto base_logits = model.logits_from_residual(x);
  auto residual_delta = [&](const PathSpec& p) {
    Tensor delta = masked(subtract(runs.corrupt.cache.output(p.nodes[0]), base.output(p.nodes[0])), Positions::End,
                          pair.clean);
    if (p.nodes.size() == 3) {
      const auto owner = p.nodes[1];
      const auto fresh = model.mlp_from_resid(owner.layer, add(base.resid_mid(owner.layer), delta)).out;
      delta = masked(subtract(fresh, base.output(owner)), Positions::End, pair.clean);
    }
    return delta;
  };
  const auto da = residual_delta(a);
  const auto db = residual_delta(b);
  for (std::size_t k = 0; k < x.size(); ++k) x[k] += da.at(end, k) + db.at(end, k);
  const auto expected = model.logits_from_residual(x);
  EXPECT_LT(max_abs_diff(both.data(), expected.data()), 1e-4f);
  EXPECT_GT(max_abs_diff(both.data(), base_logits.data()), 0.0f);

  // Two senders entering the same receiver share one recomputation.
  const auto shared = patch_paths(tiny_model(), pair, PatchPlan{{a, c}});
  Tensor joint = add(masked(subtract(runs.corrupt.cache.output(a.nodes[0]), base.output(a.nodes[0])), Positions::End,
                            pair.clean),
                     masked(subtract(runs.corrupt.cache.output(c.nodes[0]), base.output(c.nodes[0])), Positions::End,
                            pair.clean));
  const auto fresh = model.mlp_from_resid(9, add(base.resid_mid(9), joint)).out;
  const auto d9 = subtract(fresh, base.mlp_output(9));
  Tensor y = base.final_resid().slice_rows(end, end + 1);
  for (std::size_t k = 0; k < y.size(); ++k) y[k] += d9.at(end, k);
  EXPECT_LT(max_abs_diff(shared.data(), model.logits_from_residual(y).data()), 1e-4f);
}

TEST(Patching, CompilePathsSharesInstances) {
  const auto& config = tiny_model().config();
  const PathSpec a = PathSpec::through({ComponentId::head(2, 2), ComponentId::mlp(9), ComponentId::logits()});
  const PathSpec c = PathSpec::through({ComponentId::mlp(3), ComponentId::mlp(9), ComponentId::logits()});
  const PathSpec d = PathSpec::direct(ComponentId::mlp(9));
  const auto g = compile_paths(PatchPlan{{a, c}}, config);
  EXPECT_EQ(g.nodes.size(), 4u);  // a2.h2, m3, m9 (shared), logits
  const auto g2 = compile_paths(PatchPlan{{a, d}}, config);
  // m9 as a sender and as an intermediate on the same route: the sender wins.
  std::size_t m9 = 0;
  for (const auto& n : g2.nodes) m9 += n.component == ComponentId::mlp(9);
  EXPECT_EQ(m9, 1u);
  for (const auto& n : g2.nodes) {
    if (n.component == ComponentId::mlp(9)) EXPECT_TRUE(n.source);
  }
  EXPECT_THROW(compile_paths(PatchPlan{{PathSpec::through({ComponentId::mlp(9), ComponentId::mlp(3),
                                                           ComponentId::logits()})}},
                             config),
               std::invalid_argument);
  EXPECT_THROW(compile_paths(PatchPlan{{PathSpec::through({ComponentId::mlp(3)})}}, config), std::invalid_argument);
}

TEST(Patching, CircuitCompilation) {
  const auto& config = tiny_model().config();
  const auto ys = CircuitSpec::year_span();
  EXPECT_EQ(ys.heads(), year_span_heads());
  const auto g = compile_circuit(ys, config);
  std::size_t sources = 0;
  for (const auto& n : g.nodes) {
    if (n.source) {
      ++sources;
      EXPECT_TRUE(n.component.is_head());
    }
  }
  EXPECT_EQ(sources, 7u);
  const auto full = compile_circuit(CircuitSpec::full(), config);
  for (const auto& n : full.nodes) {
    if (n.component.is_head() && n.component.layer >= 5) EXPECT_FALSE(n.source) << n.component.name();
  }
  const auto cont = continuation(ys, {ComponentId::mlp(9)});
  for (const auto& e : cont) EXPECT_GE(e.sender.layer, 9);
  EXPECT_EQ(cont.size(), 6u);
}

TEST(Patching, DatasetRunnerMatchesSingleRuns) {
  const auto data = small_dataset(6, 9);
  const auto graph = compile_circuit(CircuitSpec::year_span(), tiny_model().config());
  const auto probs = patched_year_probs(tiny_model(), tokenizer(), data, {graph}, BaseRun::Corrupt);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto logits = patch_graph(tiny_model(), data.examples[i], graph, BaseRun::Corrupt);
    const auto expected = year_probabilities(logits.data(), tokenizer());
    for (std::size_t y = 0; y < 100; ++y) EXPECT_NEAR(probs[0][i][y], expected[y], 1e-7);
  }
}

TEST(Patching, ScanDeltasAreConsistent) {
  const auto data = small_dataset(8, 4);
  ScanSpec spec = direct_scan_spec({});
  spec.candidates = {ComponentId::head(9, 1), ComponentId::mlp(10), ComponentId::head(0, 0)};
  const auto result = scan(tiny_model(), tokenizer(), data, spec);
  ASSERT_EQ(result.entries.size(), 3u);
  const double baseline = evaluate(tiny_model(), tokenizer(), data).prob_diff_summary().mean;
  EXPECT_NEAR(result.baseline, baseline, 1e-9);
  for (const auto& e : result.entries) {
    PatchPlan plan{{PathSpec::direct(e.component)}};
    const auto m = patched_metrics(tiny_model(), tokenizer(), data, compile_paths(plan, tiny_model().config()),
                                   BaseRun::Clean);
    EXPECT_NEAR(e.patched, m.prob_diff_summary().mean, 1e-6) << e.component.name();
    EXPECT_NEAR(e.delta, e.patched - baseline, 1e-9);
  }
  const auto ranked = result.ranked();
  for (std::size_t i = 1; i < ranked.size(); ++i) EXPECT_GE(std::abs(ranked[i - 1].delta), std::abs(ranked[i].delta));
}

TEST(Patching, ViaMlpScanRespectsChain) {
  const auto spec = direct_scan_spec({ComponentId::mlp(8)});
  EXPECT_EQ(spec.entries.size(), 1u);
  const auto g = scan_graph(spec, ComponentId::head(5, 1), tiny_model().config());
  bool direct_edge = false;
  for (const auto& e : g.edges) {
    if (g.nodes[static_cast<std::size_t>(e.from)].component == ComponentId::head(5, 1) &&
        g.nodes[static_cast<std::size_t>(e.to)].component.kind == ComponentKind::Logits) {
      direct_edge = true;
    }
  }
  EXPECT_FALSE(direct_edge);
  EXPECT_THROW(scan_graph(spec, ComponentId::mlp(9), tiny_model().config()), std::invalid_argument);
}

TEST(Patching, NeuronFastScanMatchesGenericEngine) {
  const auto data = small_dataset(6, 2);
  const int layer = 10;
  const auto fast = scan_neurons_direct(tiny_model(), tokenizer(), data, layer, 12);
  ASSERT_EQ(fast.entries.size(), 12u);
  const double baseline = evaluate(tiny_model(), tokenizer(), data).prob_diff_summary().mean;
  EXPECT_NEAR(fast.baseline, baseline, 1e-6);
  for (int n : {0, 5, 11}) {
    const auto m = patch_neurons(tiny_model(), tokenizer(), data, layer, {n}, true);
    EXPECT_NEAR(fast.entries[static_cast<std::size_t>(n)].patched, m.prob_diff_summary().mean, 1e-5) << n;
  }
}

TEST(Patching, NeuronGroupEqualsWholeMlp) {
  const auto data = small_dataset(4, 6);
  const auto& config = tiny_model().config();
  std::vector<int> all(static_cast<std::size_t>(config.d_mlp));
  std::iota(all.begin(), all.end(), 0);
  const auto neurons = patch_neurons(tiny_model(), tokenizer(), data, 7, all, true);
  PatchPlan plan{{PathSpec::direct(ComponentId::mlp(7))}};
  const auto mlp = patched_metrics(tiny_model(), tokenizer(), data, compile_paths(plan, config), BaseRun::Clean);
  for (std::size_t i = 0; i < data.size(); ++i) EXPECT_NEAR(neurons.prob_diff[i], mlp.prob_diff[i], 1e-5);
}

TEST(Patching, HeadChannelAtAllPositionsEqualsHeadDownstream) {
  // Overriding every channel of a head everywhere equals the head's source
  // output fed into everything downstream.
  const auto pair = example(5);
  const auto& config = tiny_model().config();
  const auto base = downstream_graph({ComponentId::head(6, 3)}, config);
  const auto single = head_channel_graph(6, 3, Channel::V, Positions::All, config);
  EXPECT_EQ(single.overrides.size(), 1u);
  const auto a = patch_graph(tiny_model(), pair, base, BaseRun::Clean);
  auto full = base;
  full.nodes[0].source = false;
  for (auto ch : {Channel::Q, Channel::K, Channel::V}) full.add_override(0, ch, Positions::All);
  full.finalize(config);
  const auto b = patch_graph(tiny_model(), pair, full, BaseRun::Clean);
  EXPECT_LT(max_abs_diff(a, b), 1e-4f);
}
