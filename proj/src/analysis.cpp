#include "yearspan/analysis.hpp"

#include "yearspan/parallel.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace yearspan {

namespace {

std::size_t u(int v) { return static_cast<std::size_t>(v); }

// Per-YY means of per-example vectors, summed in example order.
struct Grouped {
  std::vector<int> years;
  std::vector<std::size_t> counts;
  std::vector<std::vector<double>> sums;
};

Grouped group_by_year(const PairedDataset& data, const std::vector<std::vector<float>>& per_example) {
  std::map<int, std::size_t> slot;
  for (const auto& pair : data.examples) slot.emplace(pair.clean.yy, 0);
  Grouped g;
  for (auto& [yy, index] : slot) {
    index = g.years.size();
    g.years.push_back(yy);
  }
  const std::size_t width = per_example.empty() ? 0 : per_example.front().size();
  g.counts.assign(g.years.size(), 0);
  g.sums.assign(g.years.size(), std::vector<double>(width, 0.0));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t s = slot.at(data.examples[i].clean.yy);
    ++g.counts[s];
    for (std::size_t k = 0; k < width; ++k) g.sums[s][k] += per_example[i][k];
  }
  for (std::size_t s = 0; s < g.years.size(); ++s) {
    for (auto& v : g.sums[s]) v /= static_cast<double>(g.counts[s]);
  }
  return g;
}

Tensor to_rows(const std::vector<std::vector<double>>& rows, std::size_t width) {
  Tensor t({rows.size(), width});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t k = 0; k < width; ++k) t.at(r, k) = static_cast<float>(rows[r][k]);
  }
  return t;
}

// Fills values and row_argmax from a years x vocab projection.
void fill_from_projection(LensMap& map, const Tensor& projected, const Tokenizer& tok) {
  const auto& ids = tok.two_digit_ids();
  map.values.assign(map.years.size(), {});
  map.row_argmax.assign(map.years.size(), 0);
  for (std::size_t r = 0; r < map.years.size(); ++r) {
    const auto row = projected.row(r);
    for (std::size_t y = 0; y < 100; ++y) map.values[r][y] = row[u(ids[y])];
    map.row_argmax[r] = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
  }
}

std::vector<std::vector<float>> per_example_end(const Gpt2Model& model, const PairedDataset& data,
                                                const CacheRequest& request,
                                                const std::function<std::vector<float>(const ActivationCache&,
                                                                                       const YearSpanExample&)>& fn) {
  std::vector<std::vector<float>> out(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    const auto& ex = data.examples[i].clean;
    const auto run = model.forward_with_cache(ex.tokens, request, true);
    out[i] = fn(run.cache, ex);
  });
  return out;
}

std::vector<float> end_row(const Tensor& t, std::size_t end) {
  const auto r = t.row(end);
  return {r.begin(), r.end()};
}

}  // namespace

const std::array<double, 100>& LensMap::row(int yy) const {
  const auto it = std::find(years.begin(), years.end(), yy);
  if (it == years.end()) throw std::out_of_range("lens map " + component + " has no row for YY " + std::to_string(yy));
  return values[static_cast<std::size_t>(it - years.begin())];
}

std::vector<LensMap> lens_components(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                                     const std::vector<ComponentId>& components) {
  if (data.empty()) throw std::invalid_argument("lens needs a non-empty dataset");
  CacheRequest request;
  std::vector<Tensor> biases;
  for (const auto& c : components) {
    validate(c, model.config());
    if (!c.is_head() && !c.is_mlp()) throw std::invalid_argument("lens applies to heads and MLPs, not " + c.name());
    request.insert(c);
    biases.push_back(model.output_bias(c));
  }
  const std::size_t d = u(model.config().d_model);
  const auto outputs = per_example_end(model, data, request, [&](const ActivationCache& cache, const YearSpanExample& ex) {
    std::vector<float> all;
    all.reserve(components.size() * d);
    for (std::size_t c = 0; c < components.size(); ++c) {
      const auto out = cache.output(components[c]);
      const auto r = out.row(ex.end_pos);
      for (std::size_t k = 0; k < d; ++k) all.push_back(r[k] - biases[c][k]);
    }
    return all;
  });
  const auto grouped = group_by_year(data, outputs);
  std::vector<LensMap> maps;
  for (std::size_t c = 0; c < components.size(); ++c) {
    Tensor rows({grouped.years.size(), d});
    for (std::size_t r = 0; r < grouped.years.size(); ++r) {
      for (std::size_t k = 0; k < d; ++k) rows.at(r, k) = static_cast<float>(grouped.sums[r][c * d + k]);
    }
    LensMap map;
    map.component = components[c].name();
    map.years = grouped.years;
    map.counts = grouped.counts;
    fill_from_projection(map, model.unembed_rows(rows), tok);
    maps.push_back(std::move(map));
  }
  return maps;
}

LensMap lens_component(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                       const ComponentId& component) {
  return lens_components(model, tok, data, {component}).front();
}

NeuronMeans neuron_means(const Gpt2Model& model, const PairedDataset& data, int layer) {
  validate(ComponentId::mlp(layer), model.config());
  if (data.empty()) throw std::invalid_argument("neuron means need a non-empty dataset");
  const auto acts = per_example_end(model, data, {ComponentId::neuron(layer, 0)},
                                    [&](const ActivationCache& cache, const YearSpanExample& ex) {
                                      return end_row(cache.neuron_activations(layer), ex.end_pos);
                                    });
  const auto grouped = group_by_year(data, acts);
  NeuronMeans m;
  m.layer = layer;
  m.years = grouped.years;
  m.counts = grouped.counts;
  m.means = to_rows(grouped.sums, u(model.config().d_mlp));
  return m;
}

LensMap lens_sum(const Gpt2Model& model, const Tokenizer& tok, const NeuronMeans& means,
                 const std::vector<int>& neurons) {
  if (neurons.empty()) throw std::invalid_argument("lens_sum needs at least one neuron");
  const std::size_t d = u(model.config().d_model);
  for (int n : neurons) validate(ComponentId::neuron(means.layer, n), model.config());
  std::vector<std::vector<double>> rows(means.years.size(), std::vector<double>(d, 0.0));
  for (int n : neurons) {
    const auto dir = model.neuron_direction(means.layer, n);
    for (std::size_t r = 0; r < means.years.size(); ++r) {
      const double a = means.means.at(r, u(n));
      for (std::size_t k = 0; k < d; ++k) rows[r][k] += a * dir[k];
    }
  }
  LensMap map;
  map.component = neurons.size() == 1 ? ComponentId::neuron(means.layer, neurons.front()).name()
                                      : "m" + std::to_string(means.layer) + " sum of " +
                                            std::to_string(neurons.size()) + " neurons";
  map.years = means.years;
  map.counts = means.counts;
  fill_from_projection(map, model.unembed_rows(to_rows(rows, d)), tok);
  return map;
}

LensMap lens_neuron(const Gpt2Model& model, const Tokenizer& tok, const NeuronMeans& means, int neuron) {
  return lens_sum(model, tok, means, {neuron});
}

std::vector<int> top_neurons(const ScanResult& scan, int layer, std::size_t k) {
  std::vector<int> out;
  for (const auto& e : scan.ranked()) {
    if (out.size() >= k) break;
    if (e.component.kind == ComponentKind::Neuron && e.component.layer == layer) out.push_back(e.component.index);
  }
  return out;
}

Tensor attention_pattern(const Gpt2Model& model, const YearSpanExample& example, int layer, int head) {
  const auto id = ComponentId::head(layer, head);
  validate(id, model.config());
  const auto run = model.forward_with_cache(example.tokens, {id}, true);
  return run.cache.attention_pattern(layer, head);
}

std::map<int, double> attention_to_yy_curve(const Gpt2Model& model, const PairedDataset& data, int layer, int head) {
  const auto id = ComponentId::head(layer, head);
  validate(id, model.config());
  const auto attn = per_example_end(model, data, {id}, [&](const ActivationCache& cache, const YearSpanExample& ex) {
    return std::vector<float>{cache.attention_pattern(layer, head).at(ex.end_pos, ex.yy_pos)};
  });
  const auto grouped = group_by_year(data, attn);
  std::map<int, double> curve;
  for (std::size_t r = 0; r < grouped.years.size(); ++r) curve[grouped.years[r]] = grouped.sums[r][0];
  return curve;
}

std::vector<LensMap> direct_effects(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                                    const std::vector<std::vector<ComponentId>>& target_sets, LayerNormMode mode) {
  if (data.empty()) throw std::invalid_argument("direct effects need a non-empty dataset");
  const auto& config = model.config();
  const std::size_t d = u(config.d_model);
  const std::size_t sets = target_sets.size();
  std::vector<ReplayGraph> graphs;
  for (const auto& targets : target_sets) {
    ReplayGraph g;
    if (!targets.empty()) {
      const int logits = g.logits();
      for (const auto& t : targets) {
        validate(t, config);
        if (!t.is_head() && !t.is_mlp() && t.kind != ComponentKind::Neuron) {
          throw std::invalid_argument("direct effects apply to heads, MLPs and neurons, not " + t.name());
        }
        g.add_edge(g.add_node(t, true), logits, kAllChannels, Positions::End);
      }
    }
    g.finalize(config);
    graphs.push_back(std::move(g));
  }
  std::vector<const ReplayGraph*> ptrs;
  for (const auto& g : graphs) ptrs.push_back(&g);
  const auto request = replay_cache_request(config, ptrs);
  const auto& gain = model.weights().lnf_gain;
  const auto& ids = tok.two_digit_ids();

  // Frozen: per example and set, the residual-space vector whose unembedding
  // is the logit difference. Recomputed: the 100 year-token differences.
  std::vector<std::vector<float>> per_example(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    const auto& pair = data.examples[i];
    const auto clean = model.forward_with_cache(pair.clean.tokens, request, true);
    const auto corrupt = model.forward_with_cache(pair.corrupt.tokens, request, true);
    const ReplayContext ctx{model, clean.cache, corrupt.cache, pair.clean.yy_pos, pair.clean.end_pos};
    const auto x = clean.cache.final_resid().row(pair.clean.end_pos);
    auto& out = per_example[i];
    if (mode == LayerNormMode::Frozen) {
      double mean = 0.0;
      for (float v : x) mean += v;
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (float v : x) var += (v - mean) * (v - mean);
      var /= static_cast<double>(d);
      const double inv_sigma = 1.0 / std::sqrt(var + config.ln_eps);
      out.reserve(sets * d);
      for (const auto& g : graphs) {
        const auto patched = replay_end_residual(ctx, g);
        double dm = 0.0;
        for (std::size_t k = 0; k < d; ++k) dm += static_cast<double>(x[k]) - patched[k];
        dm /= static_cast<double>(d);
        for (std::size_t k = 0; k < d; ++k) {
          out.push_back(static_cast<float>((static_cast<double>(x[k]) - patched[k] - dm) * inv_sigma * gain[k]));
        }
      }
    } else {
      Tensor rows({sets + 1, d});
      std::copy(x.begin(), x.end(), rows.row(0).begin());
      for (std::size_t s = 0; s < sets; ++s) {
        const auto patched = replay_end_residual(ctx, graphs[s]);
        std::copy(patched.begin(), patched.end(), rows.row(s + 1).begin());
      }
      const Tensor logits = model.logits_from_residual(rows);
      out.reserve(sets * 100);
      for (std::size_t s = 0; s < sets; ++s) {
        for (std::size_t y = 0; y < 100; ++y) {
          out.push_back(logits.at(0, u(ids[y])) - logits.at(s + 1, u(ids[y])));
        }
      }
    }
  });

  const auto grouped = group_by_year(data, per_example);
  std::vector<LensMap> maps;
  for (std::size_t s = 0; s < sets; ++s) {
    LensMap map;
    for (const auto& t : target_sets[s]) map.component += (map.component.empty() ? "" : "+") + t.name();
    map.layernorm = true;
    map.years = grouped.years;
    map.counts = grouped.counts;
    if (mode == LayerNormMode::Frozen) {
      Tensor rows({grouped.years.size(), d});
      for (std::size_t r = 0; r < grouped.years.size(); ++r) {
        for (std::size_t k = 0; k < d; ++k) rows.at(r, k) = static_cast<float>(grouped.sums[r][s * d + k]);
      }
      fill_from_projection(map, model.unembed_rows(rows), tok);
    } else {
      map.values.assign(grouped.years.size(), {});
      for (std::size_t r = 0; r < grouped.years.size(); ++r) {
        for (std::size_t y = 0; y < 100; ++y) map.values[r][y] = grouped.sums[r][s * 100 + y];
      }
    }
    maps.push_back(std::move(map));
  }
  return maps;
}

LensMap direct_effect(const Gpt2Model& model, const Tokenizer& tok, const PairedDataset& data,
                      const std::vector<ComponentId>& targets, LayerNormMode mode) {
  return direct_effects(model, tok, data, {targets}, mode).front();
}

PCAResult pca2(const std::vector<std::pair<int, std::vector<float>>>& vectors) {
  if (vectors.size() < 3) throw std::invalid_argument("PCA needs at least 3 vectors");
  const std::size_t n = vectors.size();
  const std::size_t d = vectors.front().second.size();
  if (d < 2) throw std::invalid_argument("PCA needs vectors of dimension >= 2");
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    if (vectors[i].second.size() != d) throw std::invalid_argument("PCA vectors differ in dimension");
    for (std::size_t k = 0; k < d; ++k) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = vectors[i].second[k];
  }
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  const double total = cov.trace();
  const double scale = x.cwiseAbs().maxCoeff();
  if (!(total > 1e-24 * std::max(1.0, scale * scale))) throw std::invalid_argument("PCA input is degenerate (all vectors equal)");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw std::runtime_error("PCA eigendecomposition failed");

  PCAResult result;
  result.directions = Tensor({2, d});
  const auto dim = static_cast<Eigen::Index>(d);
  for (int c = 0; c < 2; ++c) {
    Eigen::VectorXd v = solver.eigenvectors().col(dim - 1 - c);
    for (Eigen::Index k = 0; k < dim; ++k) {
      if (std::abs(v(k)) > 1e-12) {
        if (v(k) < 0) v = -v;
        break;
      }
    }
    for (Eigen::Index k = 0; k < dim; ++k) result.directions.at(u(c), static_cast<std::size_t>(k)) = static_cast<float>(v(k));
    result.explained[u(c)] = std::max(0.0, solver.eigenvalues()(dim - 1 - c)) / total;
    const Eigen::VectorXd proj = x * v;
    result.projections.resize(n);
    for (std::size_t i = 0; i < n; ++i) result.projections[i][u(c)] = proj(static_cast<Eigen::Index>(i));
  }
  for (const auto& [yy, vec] : vectors) result.years.push_back(yy);
  return result;
}

std::vector<std::pair<int, std::vector<float>>> end_vectors(const Gpt2Model& model, const PairedDataset& data,
                                                            const ComponentId& component, VectorSite site) {
  validate(component, model.config());
  if (!component.is_head() && !component.is_mlp()) {
    throw std::invalid_argument("end vectors are read from heads and MLPs, not " + component.name());
  }
  CacheRequest request;
  if (site == VectorSite::Output) request.insert(component);
  const auto rows = per_example_end(model, data, request, [&](const ActivationCache& cache, const YearSpanExample& ex) {
    if (site == VectorSite::Output) return end_row(cache.output(component), ex.end_pos);
    return end_row(component.is_mlp() ? cache.resid_mid(component.layer) : cache.resid_pre(component.layer),
                   ex.end_pos);
  });
  const auto grouped = group_by_year(data, rows);
  std::vector<std::pair<int, std::vector<float>>> out;
  for (std::size_t r = 0; r < grouped.years.size(); ++r) {
    out.emplace_back(grouped.years[r], std::vector<float>(grouped.sums[r].begin(), grouped.sums[r].end()));
  }
  return out;
}

std::vector<std::pair<int, std::vector<float>>> static_year_embeddings(const Gpt2Model& model, const Tokenizer& tok) {
  std::vector<std::pair<int, std::vector<float>>> out;
  const auto& emb = model.weights().token_embedding;
  for (int yy = 2; yy <= 98; ++yy) out.emplace_back(yy, end_row(emb, u(tok.two_digit_ids()[u(yy)])));
  return out;
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double circular_rank_correlation(const std::vector<double>& angles, const std::vector<double>& values) {
  const std::size_t n = angles.size();
  if (n != values.size() || n < 3) throw std::invalid_argument("circular rank correlation needs >= 3 paired values");
  const auto circ = ranks(angles);
  const auto lin = ranks(values);
  const double nn = static_cast<double>(n);
  // Both rank sequences are placed on the circle; the statistic is the
  // squared mean resultant of their difference (same orientation) or sum
  // (opposite orientation), whichever is larger.
  double cd = 0.0, sd = 0.0, cs = 0.0, ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = 2.0 * std::numbers::pi * circ[i] / nn;
    const double b = 2.0 * std::numbers::pi * lin[i] / nn;
    cd += std::cos(a - b);
    sd += std::sin(a - b);
    cs += std::cos(a + b);
    ss += std::sin(a + b);
  }
  return std::max(cd * cd + sd * sd, cs * cs + ss * ss) / (nn * nn);
}

double circular_ordering(const PCAResult& pca) {
  std::vector<double> angles, years;
  for (std::size_t i = 0; i < pca.projections.size(); ++i) {
    angles.push_back(std::atan2(pca.projections[i][1], pca.projections[i][0]));
    years.push_back(pca.years[i]);
  }
  return circular_rank_correlation(angles, years);
}

}  // namespace yearspan
