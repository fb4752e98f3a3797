#include "yearspan/model.hpp"

#include "yearspan/safetensors.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <limits>

namespace yearspan {

namespace {

namespace fs = std::filesystem;

class TensorSource {
 public:
  explicit TensorSource(const safetensors::Archive& archive) : archive_(archive) {
    for (const auto& [name, info] : archive.entries()) {
      if (name.rfind("transformer.", 0) == 0) prefix_ = "transformer.";
    }
  }

  bool has(const std::string& name) const { return archive_.contains(prefix_ + name) || archive_.contains(name); }

  Tensor get(const std::string& name, const Shape& expected) const {
    const std::string full = archive_.contains(prefix_ + name) ? prefix_ + name : name;
    if (!archive_.contains(full)) {
      throw ModelError("checkpoint " + archive_.path().string() + " is missing tensor " + name);
    }
    Tensor t = archive_.read_float(full);
    if (t.shape() != expected) {
      throw ModelError("tensor " + name + " has shape " + to_string(t.shape()) + ", expected " + to_string(expected));
    }
    return t;
  }

 private:
  const safetensors::Archive& archive_;
  std::string prefix_;
};

std::size_t u(int v) { return static_cast<std::size_t>(v); }

}  // namespace

ModelConfig ModelConfig::from_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ModelError("cannot open model config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ModelError("malformed model config " + path.string() + ": " + e.what());
  }
  ModelConfig c;
  c.n_layers = j.value("n_layer", c.n_layers);
  c.n_heads = j.value("n_head", c.n_heads);
  c.d_model = j.value("n_embd", c.d_model);
  c.d_head = c.d_model / c.n_heads;
  c.d_mlp = j.contains("n_inner") && !j["n_inner"].is_null() ? j["n_inner"].get<int>() : 4 * c.d_model;
  c.n_ctx = j.value("n_positions", c.n_ctx);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.ln_eps = j.value("layer_norm_epsilon", c.ln_eps);
  c.validate();
  return c;
}

void ModelConfig::validate() const {
  if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_head <= 0 || d_mlp <= 0 || n_ctx <= 0 || vocab_size <= 0) {
    throw ModelError("model config dimensions must be positive");
  }
  if (n_heads * d_head != d_model) throw ModelError("n_heads * d_head must equal d_model");
  if (!(ln_eps > 0.0f)) throw ModelError("layernorm eps must be positive");
}

fs::path checkpoint_file(const fs::path& checkpoint) {
  if (fs::is_directory(checkpoint)) return checkpoint / "model.safetensors";
  return checkpoint;
}

ModelConfig checkpoint_config(const fs::path& checkpoint) {
  const fs::path dir = fs::is_directory(checkpoint) ? checkpoint : checkpoint.parent_path();
  if (fs::exists(dir / "config.json")) return ModelConfig::from_json(dir / "config.json");
  return ModelConfig::gpt2_small();
}

Weights Weights::load(const fs::path& checkpoint, const ModelConfig& config) {
  config.validate();
  const fs::path file = checkpoint_file(checkpoint);
  if (!fs::exists(file)) throw ModelError("checkpoint not found: " + file.string());
  safetensors::Archive archive(file);
  TensorSource src(archive);

  const std::size_t d = u(config.d_model), dh = u(config.d_head), dm = u(config.d_mlp);
  const std::size_t vocab = u(config.vocab_size), ctx = u(config.n_ctx);

  Weights w;
  w.config = config;
  w.token_embedding = src.get("wte.weight", {vocab, d});
  w.position_embedding = src.get("wpe.weight", {ctx, d});
  w.lnf_gain = src.get("ln_f.weight", {d});
  w.lnf_bias = src.get("ln_f.bias", {d});
  w.unembedding = archive.contains("lm_head.weight") ? src.get("lm_head.weight", {vocab, d}) : w.token_embedding;

  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "h." + std::to_string(l) + ".";
    LayerWeights lw;
    lw.ln1_gain = src.get(p + "ln_1.weight", {d});
    lw.ln1_bias = src.get(p + "ln_1.bias", {d});
    const Tensor c_attn = src.get(p + "attn.c_attn.weight", {d, 3 * d});
    const Tensor c_attn_b = src.get(p + "attn.c_attn.bias", {3 * d});
    const Tensor c_proj = src.get(p + "attn.c_proj.weight", {d, d});
    lw.b_o = src.get(p + "attn.c_proj.bias", {d});
    const Tensor c_attn_b2 = c_attn_b.reshaped({1, 3 * d});
    for (int h = 0; h < config.n_heads; ++h) {
      const std::size_t off = u(h) * dh;
      lw.w_q.push_back(c_attn.slice_cols(off, off + dh));
      lw.w_k.push_back(c_attn.slice_cols(d + off, d + off + dh));
      lw.w_v.push_back(c_attn.slice_cols(2 * d + off, 2 * d + off + dh));
      lw.b_q.push_back(c_attn_b2.slice_cols(off, off + dh).reshaped({dh}));
      lw.b_k.push_back(c_attn_b2.slice_cols(d + off, d + off + dh).reshaped({dh}));
      lw.b_v.push_back(c_attn_b2.slice_cols(2 * d + off, 2 * d + off + dh).reshaped({dh}));
      lw.w_o.push_back(c_proj.slice_rows(off, off + dh));
    }
    lw.ln2_gain = src.get(p + "ln_2.weight", {d});
    lw.ln2_bias = src.get(p + "ln_2.bias", {d});
    lw.w_in = src.get(p + "mlp.c_fc.weight", {d, dm});
    lw.b_in = src.get(p + "mlp.c_fc.bias", {dm});
    lw.w_out = src.get(p + "mlp.c_proj.weight", {dm, d});
    lw.b_out = src.get(p + "mlp.c_proj.bias", {d});
    w.layers.push_back(std::move(lw));
  }
  return w;
}

CacheRequest all_components(const ModelConfig& config) {
  CacheRequest req{ComponentId::token_embed(), ComponentId::pos_embed()};
  for (int l = 0; l < config.n_layers; ++l) {
    for (int h = 0; h < config.n_heads; ++h) req.insert(ComponentId::head(l, h));
    req.insert(ComponentId::mlp(l));
  }
  return req;
}

// ---------------------------------------------------------------------------
// ActivationCache

bool ActivationCache::has(const ComponentId& id) const {
  const auto l = static_cast<std::size_t>(id.layer);
  switch (id.kind) {
    case ComponentKind::TokenEmbed:
    case ComponentKind::PosEmbed: return embeds_cached_;
    case ComponentKind::Head: return l < heads_.size() && !heads_[l][u(id.index)].empty();
    case ComponentKind::HeadInput: return l < head_inputs_.size() && !head_inputs_[l][u(id.index)][0].empty();
    case ComponentKind::Mlp: return l < mlps_.size() && !mlps_[l].empty();
    case ComponentKind::Neuron: return l < neurons_.size() && !neurons_[l].empty();
    case ComponentKind::Logits: return false;
  }
  return false;
}

Tensor ActivationCache::output(const ComponentId& id) const {
  if (!has(id)) throw ModelError("component not in activation cache: " + id.name());
  switch (id.kind) {
    case ComponentKind::TokenEmbed: return token_embed_;
    case ComponentKind::PosEmbed: return pos_embed_;
    case ComponentKind::Head: return heads_[u(id.layer)][u(id.index)];
    case ComponentKind::HeadInput: return head_inputs_[u(id.layer)][u(id.index)][static_cast<std::size_t>(id.channel)];
    case ComponentKind::Mlp: return mlps_[u(id.layer)];
    case ComponentKind::Neuron: {
      const Tensor& acts = neurons_[u(id.layer)];
      Tensor col({acts.rows()});
      for (std::size_t t = 0; t < acts.rows(); ++t) col[t] = acts.at(t, u(id.index));
      return col;
    }
    case ComponentKind::Logits: break;
  }
  throw ModelError("component not in activation cache: " + id.name());
}

const Tensor& ActivationCache::head_output(int layer, int head) const {
  if (!has(ComponentId::head(layer, head))) throw ModelError("head not cached: " + ComponentId::head(layer, head).name());
  return heads_[u(layer)][u(head)];
}

const Tensor& ActivationCache::mlp_output(int layer) const {
  if (!has(ComponentId::mlp(layer))) throw ModelError("MLP not cached: m" + std::to_string(layer));
  return mlps_[u(layer)];
}

const Tensor& ActivationCache::neuron_activations(int layer) const {
  if (!has(ComponentId::neuron(layer, 0))) throw ModelError("neurons not cached for layer " + std::to_string(layer));
  return neurons_[u(layer)];
}

const Tensor& ActivationCache::attention_pattern(int layer, int head) const {
  if (!has(ComponentId::head(layer, head))) {
    throw ModelError("attention pattern not cached: " + ComponentId::head(layer, head).name());
  }
  return patterns_[u(layer)][u(head)];
}

// ---------------------------------------------------------------------------
// Gpt2Model

Gpt2Model::Gpt2Model(Weights weights) : weights_(std::move(weights)) { weights_.config.validate(); }

Gpt2Model Gpt2Model::load(const fs::path& checkpoint) { return load(checkpoint, checkpoint_config(checkpoint)); }

Gpt2Model Gpt2Model::load(const fs::path& checkpoint, const ModelConfig& config) {
  return Gpt2Model(Weights::load(checkpoint, config));
}

void Gpt2Model::check_tokens(std::span<const TokenId> tokens) const {
  if (tokens.empty()) throw ModelError("forward: empty input");
  if (tokens.size() > u(config().n_ctx)) {
    throw ModelError("forward: input of " + std::to_string(tokens.size()) + " tokens exceeds context " +
                     std::to_string(config().n_ctx));
  }
  for (TokenId t : tokens) {
    if (t < 0 || t >= config().vocab_size) throw ModelError("forward: token id out of range " + std::to_string(t));
  }
}

Tensor Gpt2Model::embed_tokens(std::span<const TokenId> tokens) const {
  const std::size_t d = u(config().d_model);
  Tensor out({tokens.size(), d});
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    auto src = weights_.token_embedding.row(u(tokens[t]));
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  return out;
}

Tensor Gpt2Model::embed_positions(std::size_t length) const {
  return weights_.position_embedding.slice_rows(0, length);
}

Tensor Gpt2Model::ln1(int layer, const Tensor& resid) const {
  const auto& lw = weights_.layers[u(layer)];
  return layernorm(resid, lw.ln1_gain, lw.ln1_bias, config().ln_eps);
}

Tensor Gpt2Model::ln2(int layer, const Tensor& resid) const {
  const auto& lw = weights_.layers[u(layer)];
  return layernorm(resid, lw.ln2_gain, lw.ln2_bias, config().ln_eps);
}

HeadResult Gpt2Model::head_from_normed(int layer, int head, const Tensor& normed_q, const Tensor& normed_k,
                                       const Tensor& normed_v) const {
  const auto& lw = weights_.layers[u(layer)];
  const auto h = u(head);
  HeadResult r;
  r.q = add_row_vector(matmul(normed_q, lw.w_q[h]), lw.b_q[h]);
  r.k = add_row_vector(matmul(normed_k, lw.w_k[h]), lw.b_k[h]);
  r.v = add_row_vector(matmul(normed_v, lw.w_v[h]), lw.b_v[h]);

  const std::size_t len = r.q.rows();
  Tensor scores = matmul_transposed(r.q, r.k);
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(config().d_head));
  r.pattern = Tensor({len, len});
  std::vector<float> lane;
  for (std::size_t i = 0; i < len; ++i) {
    lane.assign(i + 1, 0.0f);
    for (std::size_t j = 0; j <= i; ++j) lane[j] = scores.at(i, j) * inv_sqrt;
    const auto probs = softmax(lane);
    for (std::size_t j = 0; j <= i; ++j) r.pattern.at(i, j) = probs[j];
  }
  const Tensor z = matmul(r.pattern, r.v);
  const Tensor bias_share = scale(lw.b_o, 1.0f / static_cast<float>(config().n_heads));
  r.out = add_row_vector(matmul(z, lw.w_o[h]), bias_share);
  return r;
}

HeadResult Gpt2Model::head_from_resid(int layer, int head, const Tensor& resid_q, const Tensor& resid_k,
                                      const Tensor& resid_v) const {
  const Tensor nq = ln1(layer, resid_q);
  const Tensor nk = &resid_k == &resid_q ? nq : ln1(layer, resid_k);
  const Tensor nv = &resid_v == &resid_q ? nq : (&resid_v == &resid_k ? nk : ln1(layer, resid_v));
  return head_from_normed(layer, head, nq, nk, nv);
}

MlpResult Gpt2Model::mlp_from_resid(int layer, const Tensor& resid_rows) const {
  const auto& lw = weights_.layers[u(layer)];
  MlpResult r;
  r.post = gelu(add_row_vector(matmul(ln2(layer, resid_rows), lw.w_in), lw.b_in));
  r.out = add_row_vector(matmul(r.post, lw.w_out), lw.b_out);
  return r;
}

std::span<const float> Gpt2Model::neuron_direction(int layer, int neuron) const {
  validate(ComponentId::neuron(layer, neuron), config());
  return weights_.layers[u(layer)].w_out.row(u(neuron));
}

Tensor Gpt2Model::output_bias(const ComponentId& id) const {
  const std::size_t d = u(config().d_model);
  switch (id.kind) {
    case ComponentKind::Head:
      return scale(weights_.layers[u(id.layer)].b_o, 1.0f / static_cast<float>(config().n_heads));
    case ComponentKind::Mlp: return weights_.layers[u(id.layer)].b_out;
    default: return Tensor({d});
  }
}

Gpt2Model::Run Gpt2Model::forward_with_cache(std::span<const TokenId> tokens, const CacheRequest& wanted,
                                             bool last_position_logits_only) const {
  check_tokens(tokens);
  for (const auto& id : wanted) validate(id, config());
  const auto& cfg = config();
  const std::size_t len = tokens.size();
  const std::size_t n_layers = u(cfg.n_layers), n_heads = u(cfg.n_heads);

  Run run;
  ActivationCache& cache = run.cache;
  cache.tokens_.assign(tokens.begin(), tokens.end());
  cache.heads_.assign(n_layers, std::vector<Tensor>(n_heads));
  cache.patterns_.assign(n_layers, std::vector<Tensor>(n_heads));
  cache.head_inputs_.assign(n_layers, std::vector<std::array<Tensor, 3>>(n_heads));
  cache.mlps_.assign(n_layers, Tensor());
  cache.neurons_.assign(n_layers, Tensor());

  Tensor tok = embed_tokens(tokens);
  Tensor pos = embed_positions(len);
  Tensor resid = add(tok, pos);
  if (wanted.count(ComponentId::token_embed()) || wanted.count(ComponentId::pos_embed())) {
    cache.token_embed_ = std::move(tok);
    cache.pos_embed_ = std::move(pos);
    cache.embeds_cached_ = true;
  }

  auto wants_neurons = [&](int layer) {
    auto it = wanted.lower_bound(ComponentId::neuron(layer, 0));
    return it != wanted.end() && it->kind == ComponentKind::Neuron && it->layer == layer;
  };

  for (std::size_t l = 0; l < n_layers; ++l) {
    const int layer = static_cast<int>(l);
    cache.resid_pre_.push_back(resid);
    const Tensor normed = ln1(layer, resid);
    Tensor mid = resid;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const int head = static_cast<int>(h);
      HeadResult hr = head_from_normed(layer, head, normed, normed, normed);
      add_inplace(mid, hr.out);
      if (wanted.count(ComponentId::head(layer, head))) {
        cache.heads_[l][h] = std::move(hr.out);
        cache.patterns_[l][h] = std::move(hr.pattern);
      }
      const bool probe = wanted.count(ComponentId::head_input(layer, head, Channel::Q)) ||
                         wanted.count(ComponentId::head_input(layer, head, Channel::K)) ||
                         wanted.count(ComponentId::head_input(layer, head, Channel::V));
      if (probe) cache.head_inputs_[l][h] = {std::move(hr.q), std::move(hr.k), std::move(hr.v)};
    }
    cache.resid_mid_.push_back(mid);
    MlpResult mr = mlp_from_resid(layer, mid);
    resid = add(mid, mr.out);
    if (wanted.count(ComponentId::mlp(layer))) cache.mlps_[l] = std::move(mr.out);
    if (wants_neurons(layer)) cache.neurons_[l] = std::move(mr.post);
  }
  cache.resid_pre_.push_back(resid);

  run.logits = last_position_logits_only ? logits_from_residual(resid.slice_rows(len - 1, len))
                                         : logits_from_residual(resid);
  return run;
}

Tensor Gpt2Model::forward(std::span<const TokenId> tokens) const {
  return forward_with_cache(tokens, {}).logits;
}

Tensor Gpt2Model::head_contribution(const ActivationCache& cache, int layer, int head, std::size_t pos) const {
  const Tensor& out = cache.head_output(layer, head);
  if (pos >= out.rows()) throw ModelError("head_contribution: position out of range");
  auto row = out.row(pos);
  return Tensor({row.size()}, std::vector<float>(row.begin(), row.end()));
}

Tensor Gpt2Model::unembed(std::span<const float> residual) const {
  if (residual.size() != u(config().d_model)) throw ShapeError("unembed: residual must have d_model entries");
  Tensor row({1, residual.size()}, std::vector<float>(residual.begin(), residual.end()));
  return matmul_transposed(row, weights_.unembedding).reshaped({u(config().vocab_size)});
}

Tensor Gpt2Model::unembed_rows(const Tensor& residual_rows) const {
  return matmul_transposed(residual_rows.reshaped({residual_rows.rows(), residual_rows.cols()}), weights_.unembedding);
}

Tensor Gpt2Model::logits_from_residual(const Tensor& residual_rows) const {
  return unembed_rows(layernorm(residual_rows, weights_.lnf_gain, weights_.lnf_bias, config().ln_eps));
}

}  // namespace yearspan
