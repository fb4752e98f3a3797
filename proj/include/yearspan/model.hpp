#pragma once

#include "yearspan/component.hpp"
#include "yearspan/tensor.hpp"
#include "yearspan/tokenizer.hpp"

#include <array>
#include <filesystem>
#include <memory>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace yearspan {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int n_layers = 12;
  int n_heads = 12;
  int d_model = 768;
  int d_head = 64;
  int d_mlp = 3072;
  int n_ctx = 1024;
  int vocab_size = 50257;
  float ln_eps = 1e-5f;

  static ModelConfig gpt2_small() { return {}; }
  // Reads a Hugging Face style config.json (n_layer, n_head, n_embd, ...).
  static ModelConfig from_json(const std::filesystem::path& path);
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  // Per-head projection slices: w_q[h] is d_model x d_head, w_o[h] is d_head x d_model.
  std::vector<Tensor> w_q, w_k, w_v, w_o;
  std::vector<Tensor> b_q, b_k, b_v;
  Tensor b_o;
  Tensor ln2_gain, ln2_bias;
  Tensor w_in, b_in;    // d_model x d_mlp, d_mlp
  Tensor w_out, b_out;  // d_mlp x d_model, d_model
};

struct Weights {
  ModelConfig config;
  Tensor token_embedding;     // vocab x d_model
  Tensor position_embedding;  // n_ctx x d_model
  std::vector<LayerWeights> layers;
  Tensor lnf_gain, lnf_bias;
  Tensor unembedding;         // vocab x d_model (tied to token_embedding in GPT-2)

  // Accepts a .safetensors file or a directory containing model.safetensors.
  // Tensor names follow the published GPT-2 archive, with or without a
  // "transformer." prefix. Missing or mis-shaped tensors are errors.
  static Weights load(const std::filesystem::path& checkpoint, const ModelConfig& config);
};

// Locates model.safetensors/config.json for a checkpoint path (file or dir).
std::filesystem::path checkpoint_file(const std::filesystem::path& checkpoint);
ModelConfig checkpoint_config(const std::filesystem::path& checkpoint);

struct HeadResult {
  Tensor out;      // T x d_model, includes this head's share of the output bias
  Tensor pattern;  // T x T, rows are query positions
  Tensor q, k, v;  // T x d_head
};

struct MlpResult {
  Tensor out;   // rows x d_model
  Tensor post;  // rows x d_mlp, post-nonlinearity neuron activations
};

// Per-position outputs recorded during one forward pass. Residual checkpoints
// are always kept; component outputs only when requested.
class ActivationCache {
 public:
  ActivationCache() = default;

  std::size_t length() const { return tokens_.size(); }
  const std::vector<TokenId>& tokens() const { return tokens_; }

  bool has(const ComponentId& id) const;
  // T x d_model for embeddings, heads and MLPs; length-T vector for a neuron;
  // T x d_head for a head input channel.
  Tensor output(const ComponentId& id) const;
  const Tensor& head_output(int layer, int head) const;
  const Tensor& mlp_output(int layer) const;
  const Tensor& neuron_activations(int layer) const;  // T x d_mlp
  const Tensor& attention_pattern(int layer, int head) const;
  const Tensor& token_embedding() const { return token_embed_; }
  const Tensor& position_embedding() const { return pos_embed_; }

  // resid_pre(l) is the input to layer l; resid_pre(n_layers) is the final residual.
  const Tensor& resid_pre(int layer) const { return resid_pre_.at(static_cast<std::size_t>(layer)); }
  const Tensor& resid_mid(int layer) const { return resid_mid_.at(static_cast<std::size_t>(layer)); }
  const Tensor& final_resid() const { return resid_pre_.back(); }

 private:
  friend class Gpt2Model;

  std::vector<TokenId> tokens_;
  Tensor token_embed_, pos_embed_;
  std::vector<Tensor> resid_pre_, resid_mid_;
  std::vector<std::vector<Tensor>> heads_, patterns_;
  std::vector<std::vector<std::array<Tensor, 3>>> head_inputs_;
  std::vector<Tensor> mlps_, neurons_;
  bool embeds_cached_ = false;
};

using CacheRequest = std::set<ComponentId>;

// Every head, MLP and embedding output (no neurons or channel probes).
CacheRequest all_components(const ModelConfig& config);

// GPT-2 forward pass decomposed into embeddings, per-head attention writes,
// MLPs and the unembedding. Immutable after construction.
class Gpt2Model {
 public:
  explicit Gpt2Model(Weights weights);
  static Gpt2Model load(const std::filesystem::path& checkpoint);
  static Gpt2Model load(const std::filesystem::path& checkpoint, const ModelConfig& config);

  const ModelConfig& config() const { return weights_.config; }
  const Weights& weights() const { return weights_; }

  // Logits at every position, T x vocab.
  Tensor forward(std::span<const TokenId> tokens) const;

  struct Run {
    Tensor logits;  // T x vocab, or 1 x vocab when only the last position was requested
    ActivationCache cache;
  };
  Run forward_with_cache(std::span<const TokenId> tokens, const CacheRequest& wanted,
                         bool last_position_logits_only = false) const;

  // Additive write of one head into the residual stream at a position.
  Tensor head_contribution(const ActivationCache& cache, int layer, int head, std::size_t pos) const;

  // Raw projection onto the vocabulary without the final layernorm.
  Tensor unembed(std::span<const float> residual) const;
  // Batched projection: rows x d_model -> rows x vocab, no layernorm.
  Tensor unembed_rows(const Tensor& residual_rows) const;
  // Final layernorm followed by the unembedding.
  Tensor logits_from_residual(const Tensor& residual_rows) const;

  // Building blocks shared by the forward pass and patched replays.
  Tensor embed_tokens(std::span<const TokenId> tokens) const;
  Tensor embed_positions(std::size_t length) const;
  Tensor ln1(int layer, const Tensor& resid) const;
  Tensor ln2(int layer, const Tensor& resid) const;
  // Attention head on already-normalized inputs per channel.
  HeadResult head_from_normed(int layer, int head, const Tensor& normed_q, const Tensor& normed_k,
                              const Tensor& normed_v) const;
  // Attention head on raw residual inputs per channel (layernorm applied here).
  HeadResult head_from_resid(int layer, int head, const Tensor& resid_q, const Tensor& resid_k,
                             const Tensor& resid_v) const;
  MlpResult mlp_from_resid(int layer, const Tensor& resid_rows) const;
  // Direction a single neuron writes into the residual stream per unit activation.
  std::span<const float> neuron_direction(int layer, int neuron) const;
  // Constant part of a component's output (head share of the output bias, MLP output bias).
  Tensor output_bias(const ComponentId& id) const;

 private:
  void check_tokens(std::span<const TokenId> tokens) const;

  Weights weights_;
};

}  // namespace yearspan
