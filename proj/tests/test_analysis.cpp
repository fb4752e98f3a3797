#include "support.hpp"

#include "yearspan/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

using namespace yearspan;
using yearspan::testing::small_dataset;
using yearspan::testing::tiny_model;
using yearspan::testing::tokenizer;

namespace {

double max_map_gap(const LensMap& a, const LensMap& b) {
  EXPECT_EQ(a.years, b.years);
  double m = 0.0;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t y = 0; y < 100; ++y) m = std::max(m, std::abs(a.values[r][y] - b.values[r][y]));
  }
  return m;
}

}  // namespace

TEST(Analysis, LensSumOfAllNeuronsEqualsMlpLens) {
  const auto data = small_dataset(10, 1);
  const auto mlp = lens_component(tiny_model(), tokenizer(), data, ComponentId::mlp(10));
  const auto means = neuron_means(tiny_model(), data, 10);
  std::vector<int> all(static_cast<std::size_t>(tiny_model().config().d_mlp));
  std::iota(all.begin(), all.end(), 0);
  const auto sum = lens_sum(tiny_model(), tokenizer(), means, all);
  EXPECT_LT(max_map_gap(mlp, sum), 1e-4);
  EXPECT_EQ(mlp.row_argmax, sum.row_argmax);
}

TEST(Analysis, LensSumIsAdditive) {
  const auto data = small_dataset(10, 2);
  const auto means = neuron_means(tiny_model(), data, 9);
  const auto a = lens_neuron(tiny_model(), tokenizer(), means, 3);
  const auto b = lens_neuron(tiny_model(), tokenizer(), means, 40);
  const auto ab = lens_sum(tiny_model(), tokenizer(), means, {3, 40});
  for (std::size_t r = 0; r < ab.rows(); ++r) {
    for (std::size_t y = 0; y < 100; ++y) EXPECT_NEAR(ab.values[r][y], a.values[r][y] + b.values[r][y], 1e-5);
  }
}

TEST(Analysis, NeuronLensIsRankOne) {
  const auto data = small_dataset(10, 3);
  const auto means = neuron_means(tiny_model(), data, 4);
  const auto lens = lens_neuron(tiny_model(), tokenizer(), means, 7);
  // Every row is the neuron's mean activation times one fixed pattern.
  std::size_t ref = 0;
  for (std::size_t r = 0; r < lens.rows(); ++r) {
    if (std::abs(means.means.at(r, 7)) > std::abs(means.means.at(ref, 7))) ref = r;
  }
  ASSERT_GT(std::abs(means.means.at(ref, 7)), 0.0f);
  for (std::size_t r = 0; r < lens.rows(); ++r) {
    const double ratio = means.means.at(r, 7) / means.means.at(ref, 7);
    for (std::size_t y = 0; y < 100; ++y) EXPECT_NEAR(lens.values[r][y], ratio * lens.values[ref][y], 1e-4);
  }
}

TEST(Analysis, HeadLensRowsMatchManualProjection) {
  const auto data = small_dataset(3, 4);
  const auto id = ComponentId::head(7, 10);
  const auto lens = lens_component(tiny_model(), tokenizer(), data, id);
  const auto& ex = data.examples[0].clean;
  const auto run = tiny_model().forward_with_cache(ex.tokens, {id});
  const auto out = run.cache.head_output(7, 10).row(ex.end_pos);
  const auto bias = tiny_model().output_bias(id);
  std::vector<float> v(out.begin(), out.end());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] -= bias[k];
  const auto proj = tiny_model().unembed(v);
  const auto& row = lens.row(ex.yy);
  ASSERT_EQ(lens.counts[static_cast<std::size_t>(std::find(lens.years.begin(), lens.years.end(), ex.yy) - lens.years.begin())], 1u);
  for (int y = 0; y < 100; ++y) {
    EXPECT_NEAR(row[static_cast<std::size_t>(y)], proj[static_cast<std::size_t>(tokenizer().two_digit_ids()[static_cast<std::size_t>(y)])], 1e-4);
  }
}

TEST(Analysis, DirectEffectGroupEqualsSum) {
  const auto data = small_dataset(8, 5);
  const std::vector<int> neurons = {1, 9, 33, 70, 100, 200, 250, 300, 350, 383};
  std::vector<std::vector<ComponentId>> sets;
  std::vector<ComponentId> group;
  for (int n : neurons) {
    sets.push_back({ComponentId::neuron(10, n)});
    group.push_back(ComponentId::neuron(10, n));
  }
  sets.push_back(group);
  sets.push_back({});
  const auto maps = direct_effects(tiny_model(), tokenizer(), data, sets);
  const auto& grouped = maps[neurons.size()];
  for (std::size_t r = 0; r < grouped.rows(); ++r) {
    for (std::size_t y = 0; y < 100; ++y) {
      double sum = 0.0;
      for (std::size_t i = 0; i < neurons.size(); ++i) sum += maps[i].values[r][y];
      EXPECT_NEAR(grouped.values[r][y], sum, 1e-4);
    }
  }
  for (const auto& row : maps.back().values) {
    for (double v : row) EXPECT_EQ(v, 0.0);
  }
}

TEST(Analysis, RecomputedDirectEffectMatchesPatchedLogits) {
  const auto data = small_dataset(2, 6);
  const auto id = ComponentId::mlp(11);
  const auto map = direct_effect(tiny_model(), tokenizer(), data, {id}, LayerNormMode::Recomputed);
  PatchPlan plan{{PathSpec::direct(id)}};
  for (const auto& pair : data.examples) {
    const auto patched = patch_paths(tiny_model(), pair, plan);
    const auto clean = tiny_model().forward_with_cache(pair.clean.tokens, {}, true).logits;
    const auto& row = map.row(pair.clean.yy);
    for (int y : {0, 17, 50, 99}) {
      const auto t = static_cast<std::size_t>(tokenizer().two_digit_ids()[static_cast<std::size_t>(y)]);
      EXPECT_NEAR(row[static_cast<std::size_t>(y)], clean.at(0, t) - patched[t], 1e-4);
    }
  }
}

TEST(Analysis, AttentionOutputs) {
  const auto data = small_dataset(12, 7);
  const auto curve = attention_to_yy_curve(tiny_model(), data, 7, 10);
  EXPECT_FALSE(curve.empty());
  for (const auto& [yy, v] : curve) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  const auto p = attention_pattern(tiny_model(), data.examples[0].clean, 7, 10);
  EXPECT_EQ(p.rows(), data.examples[0].clean.tokens.size());
  EXPECT_EQ(p.rows() - 1, data.examples[0].clean.end_pos);
  EXPECT_GT(p.at(p.rows() - 1, data.examples[0].clean.yy_pos), 0.0f);
}

TEST(Analysis, TopNeuronsOrdering) {
  ScanResult s;
  s.entries = {{ComponentId::neuron(10, 0), 0.0, 0.01},
               {ComponentId::neuron(10, 1), 0.0, -0.3},
               {ComponentId::neuron(10, 2), 0.0, 0.2},
               {ComponentId::mlp(3), 0.0, 0.9}};
  EXPECT_EQ(top_neurons(s, 10, 2), (std::vector<int>{1, 2}));
  EXPECT_EQ(top_neurons(s, 10, 10), (std::vector<int>{1, 2, 0}));
}

TEST(Analysis, PcaRecoversPlantedPlane) {
  std::mt19937 rng(7);
  std::normal_distribution<double> noise;
  const std::size_t d = 768;
  std::vector<double> u(d), v(d);
  for (auto& x : u) x = noise(rng);
  for (auto& x : v) x = noise(rng);
  auto normalize = [](std::vector<double>& w) {
    double n = 0.0;
    for (double x : w) n += x * x;
    for (double& x : w) x /= std::sqrt(n);
  };
  normalize(u);
  double dot = 0.0;
  for (std::size_t k = 0; k < d; ++k) dot += u[k] * v[k];
  for (std::size_t k = 0; k < d; ++k) v[k] -= dot * u[k];
  normalize(v);
  std::vector<std::pair<int, std::vector<float>>> points;
  for (int i = 0; i < 97; ++i) {
    const double t = 2.0 * std::numbers::pi * i / 97.0;
    std::vector<float> p(d);
    for (std::size_t k = 0; k < d; ++k) p[k] = static_cast<float>(3.0 + 5.0 * std::cos(t) * u[k] + 2.0 * std::sin(t) * v[k]);
    points.emplace_back(i + 2, std::move(p));
  }
  const auto r = pca2(points);
  // Orthonormal directions spanning the plane.
  for (int a = 0; a < 2; ++a) {
    double nu = 0.0, nv = 0.0, norm = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double x = r.directions.at(static_cast<std::size_t>(a), k);
      nu += x * u[k];
      nv += x * v[k];
      norm += x * x;
    }
    EXPECT_NEAR(norm, 1.0, 1e-6);
    EXPECT_NEAR(nu * nu + nv * nv, 1.0, 1e-6);
  }
  double cross = 0.0;
  for (std::size_t k = 0; k < d; ++k) cross += r.directions.at(0, k) * r.directions.at(1, k);
  EXPECT_NEAR(cross, 0.0, 1e-6);
  EXPECT_GE(r.explained[0], r.explained[1]);
  EXPECT_NEAR(r.explained[0] + r.explained[1], 1.0, 1e-6);
  double sum0 = 0.0;
  for (const auto& p : r.projections) sum0 += p[0];
  EXPECT_NEAR(sum0, 0.0, 1e-3);
  // Points placed around the ellipse in YY order are circularly ordered.
  EXPECT_GT(circular_ordering(r), 0.99);
}

TEST(Analysis, PcaRejectsDegenerateInput) {
  std::vector<std::pair<int, std::vector<float>>> same(5, {1, std::vector<float>(4, 2.0f)});
  EXPECT_THROW(pca2(same), std::invalid_argument);
  EXPECT_THROW(pca2({{1, {1.0f, 2.0f}}, {2, {3.0f, 1.0f}}}), std::invalid_argument);
}

TEST(Analysis, CircularRankCorrelation) {
  std::vector<double> angles, values;
  for (int i = 0; i < 40; ++i) {
    angles.push_back(2.0 * std::numbers::pi * i / 40.0 - std::numbers::pi);
    values.push_back(i);
  }
  EXPECT_NEAR(circular_rank_correlation(angles, values), 1.0, 1e-9);
  angles.push_back(0.123);
  values.push_back(40);
  EXPECT_GT(circular_rank_correlation(angles, values), 0.85);
  std::mt19937 rng(3);
  std::vector<double> shuffled = values;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  EXPECT_LT(circular_rank_correlation(angles, shuffled), 0.3);
}

TEST(Analysis, EndVectorsAndStaticEmbeddings) {
  const auto data = small_dataset(5, 8);
  const auto in = end_vectors(tiny_model(), data, ComponentId::mlp(8), VectorSite::Input);
  EXPECT_EQ(in.size(), 5u);
  EXPECT_EQ(in.front().second.size(), static_cast<std::size_t>(tiny_model().config().d_model));
  const auto emb = static_year_embeddings(tiny_model(), tokenizer());
  EXPECT_EQ(emb.size(), 97u);
  EXPECT_EQ(emb.front().first, 2);
  EXPECT_EQ(emb.back().first, 98);
}
