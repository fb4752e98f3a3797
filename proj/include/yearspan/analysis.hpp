#pragma once

#include "yearspan/model.hpp"
#include "yearspan/patching.hpp"
#include "yearspan/tasks.hpp"

#include <array>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace yearspan {

// Per start year YY (rows) x output year 00..99 (columns): mean weight a
// component's END output puts on each two-digit year token.
struct LensMap {
  std::string component;
  bool layernorm = false;  // true when the final layernorm was applied
  std::vector<int> years;
  std::vector<std::size_t> counts;
  std::vector<std::array<double, 100>> values;
  // Full-vocabulary argmax of each row's mean projection (empty when the
  // projection is not linear in the averaged output).
  std::vector<TokenId> row_argmax;

  std::size_t rows() const { return years.size(); }
  const std::array<double, 100>& row(int yy) const;
};

// Logit lens of heads and MLPs: the END output (without its constant bias)
// projected by the unembedding, no final layernorm. One pass over the
// clean prompts serves all components.
std::vector<LensMap> lens_components(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                                     const std::vector<ComponentId>& components);
LensMap lens_component(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                       const ComponentId& component);

// Mean END activation of every neuron of a layer, grouped by YY.
struct NeuronMeans {
  int layer = 0;
  std::vector<int> years;
  std::vector<std::size_t> counts;
  Tensor means;  // years x d_mlp
};
NeuronMeans neuron_means(const Gpt2Model& model, const PairedDataset& data, int layer);

// Activation times the neuron's fixed vocabulary direction, averaged per YY.
LensMap lens_neuron(const Gpt2Model& model, const Tokenizer& tok, const NeuronMeans& means, int neuron);
// Elementwise sum of the member neurons' lenses.
LensMap lens_sum(const Gpt2Model& model, const Tokenizer& tok, const NeuronMeans& means,
                 const std::vector<int>& neurons);

// Neuron indices of a neuron scan ordered by |delta| descending.
std::vector<int> top_neurons(const ScanResult& scan, int layer, std::size_t k);

Tensor attention_pattern(const Gpt2Model& model, const YearSpanExample& example, int layer, int head);
// Mean END -> YY attention of a head, per YY of the clean prompts.
std::map<int, double> attention_to_yy_curve(const Gpt2Model& model, const PairedDataset& data, int layer, int head);

enum class LayerNormMode {
  Frozen,      // final layernorm scale taken from the unpatched run (linear in the patch)
  Recomputed,  // final layernorm recomputed on the patched residual
};

// Unpatched END logits minus logits with each target set's direct path to
// the logits patched to the 01 run, on the year tokens, averaged per YY.
// All target sets share one pass over the data.
std::vector<LensMap> direct_effects(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                                    const std::vector<std::vector<ComponentId>>& target_sets,
                                    LayerNormMode mode = LayerNormMode::Frozen);
LensMap direct_effect(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                      const std::vector<ComponentId>& targets, LayerNormMode mode = LayerNormMode::Frozen);

struct PCAResult {
  Tensor directions;  // 2 x d
  std::vector<int> years;
  std::vector<std::array<double, 2>> projections;
  std::array<double, 2> explained{};  // fractions of total variance
};

// Top two principal directions of the mean-centred vectors.
PCAResult pca2(const std::vector<std::pair<int, std::vector<float>>>& vectors);

enum class VectorSite { Input, Output };
// Mean END vector per YY of the clean prompts: a component's output, or the
// residual it reads (resid_mid for an MLP, resid_pre for a head).
std::vector<std::pair<int, std::vector<float>>> end_vectors(const Gpt2Model& model, const PairedDataset& data,
                                                            const ComponentId& component, VectorSite site);
// Token embedding rows of the two-digit tokens "02".."98".
std::vector<std::pair<int, std::vector<float>>> static_year_embeddings(const Gpt2Model& model, const Tokenizer& tok);

// Rank correlation in [0, 1] between angles and a variable mapped onto the
// circle by rank: 1 when sorting by angle gives the values in cyclic order
// (either direction), near 0 for unrelated orders.
double circular_rank_correlation(const std::vector<double>& angles, const std::vector<double>& values);
// The statistic for the polar angles of a PCA's projections against YY.
double circular_ordering(const PCAResult& pca);

}  // namespace yearspan
