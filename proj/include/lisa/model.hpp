#pragma once

// Tiny GPT-2 style decoder with an explicit layer index space:
//   0         embedding group (token + positional tables)
//   1..N_L    transformer blocks (norms, attention, MLP, biases)
//   N_L+1     head group (final norm + output projection)

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lisa/errors.hpp"
#include "lisa/rng.hpp"
#include "lisa/tensor.hpp"

namespace lisa {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 0;
  std::size_t model_dim = 64;
  std::size_t num_heads = 4;
  std::size_t num_blocks = 4;
  double mlp_ratio = 4.0;
  bool tie_embeddings = false;

  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(std::llround(static_cast<double>(model_dim) * mlp_ratio));
  }
  std::size_t num_layers() const { return num_blocks + 2; }

  void validate() const {
    if (vocab_size == 0) throw ConfigError("model: vocab_size must be positive");
    if (max_seq_len == 0) throw ConfigError("model: max_seq_len must be positive");
    if (model_dim == 0 || num_heads == 0) throw ConfigError("model: model_dim and num_heads must be positive");
    if (model_dim % num_heads != 0) {
      throw ConfigError("model: model_dim " + std::to_string(model_dim) + " not divisible by num_heads " +
                        std::to_string(num_heads));
    }
    if (num_blocks < 1) throw ConfigError("model: num_blocks must be at least 1");
    if (!(mlp_ratio > 0.0) || !std::isfinite(mlp_ratio)) throw ConfigError("model: mlp_ratio must be positive");
    const double hidden = static_cast<double>(model_dim) * mlp_ratio;
    if (std::abs(hidden - std::round(hidden)) > 1e-9) {
      throw ConfigError("model: model_dim * mlp_ratio must be a whole number");
    }
  }

  static ModelConfig desk(std::size_t vocab, std::size_t seq) {
    return {.vocab_size = vocab, .max_seq_len = seq, .model_dim = 64, .num_heads = 4, .num_blocks = 4};
  }

  static ModelConfig gpt2_small() {
    return {.vocab_size = 50257, .max_seq_len = 1024, .model_dim = 768, .num_heads = 12,
            .num_blocks = 12, .mlp_ratio = 4.0, .tie_embeddings = true};
  }

  bool operator==(const ModelConfig&) const = default;
};

struct Param {
  std::string name;
  Tensor tensor;
  bool decay = false;  // subject to weight decay when decay_matrices_only is set
};

struct LayerGroup {
  std::string name;
  std::vector<Param> params;
  bool trainable = true;

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.tensor.numel();
    return n;
  }
};

struct LoraAdapter {
  Tensor a;  // [rank x in]
  Tensor b;  // [out x rank]
  std::size_t rank = 0;
  double alpha = 0.0;
  double scale() const { return alpha / static_cast<double>(rank); }
};

struct Linear {
  std::string name;
  Tensor weight;  // [out x in]
  Tensor bias;    // [out], may be undefined
  std::optional<LoraAdapter> adapter;

  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }
};

// Weight plus the adapter's low-rank update, W + (alpha/r) B A.
inline std::vector<double> effective_weight(const Linear& lin) {
  std::vector<double> w(lin.weight.data().begin(), lin.weight.data().end());
  if (!lin.adapter) return w;
  const auto& ad = *lin.adapter;
  const std::size_t out = lin.out_features(), in = lin.in_features(), r = ad.rank;
  const double s = ad.scale();
  auto pa = ad.a.data();
  auto pb = ad.b.data();
  for (std::size_t i = 0; i < out; ++i)
    for (std::size_t k = 0; k < r; ++k) {
      const double coef = s * pb[i * r + k];
      for (std::size_t j = 0; j < in; ++j) w[i * in + j] += coef * pa[k * in + j];
    }
  return w;
}

inline Tensor apply_linear(Tape& tape, const Tensor& x, const Linear& lin) {
  Tensor y = ops::linear(tape, x, lin.weight, lin.bias);
  if (!lin.adapter) return y;
  Tensor low = ops::linear(tape, ops::linear(tape, x, lin.adapter->a), lin.adapter->b);
  return ops::add(tape, y, ops::scale(tape, low, lin.adapter->scale()));
}

struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> tokens;   // [batch * seq], row-major
  std::vector<std::int32_t> targets;  // same layout, kIgnoreTarget for unscored positions
};

// Attention probabilities per block, [batch][head][t][s].
struct ForwardTrace {
  std::vector<std::vector<double>> attention;
};

class TransformerModel {
 public:
  struct Block {
    Tensor ln1_gain, ln1_bias;
    Linear q, k, v, o;
    Tensor ln2_gain, ln2_bias;
    Linear fc1, fc2;
  };

  static TransformerModel build(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    TransformerModel m(cfg);
    std::mt19937_64 gen(seed);
    for (auto& group : m.groups_) {
      for (auto& p : group.params) {
        if (p.name.ends_with(".gain")) {
          std::fill(p.tensor.data().begin(), p.tensor.data().end(), 1.0);
        } else if (p.tensor.rank() == 2) {
          fill_normal(p.tensor.data(), kInitStd, gen);
        }
      }
    }
    return m;
  }

  TransformerModel(TransformerModel&&) = default;
  TransformerModel& operator=(TransformerModel&&) = default;
  TransformerModel(const TransformerModel&) = delete;
  TransformerModel& operator=(const TransformerModel&) = delete;

  // Independent deep copy, adapters and trainable flags included.
  TransformerModel clone() const {
    TransformerModel copy(cfg_);
    for (std::size_t l = 0; l < groups_.size(); ++l) {
      copy.groups_[l].trainable = groups_[l].trainable;
      for (std::size_t i = 0; i < groups_[l].params.size(); ++i) {
        const Tensor& src = groups_[l].params[i].tensor;
        Tensor& dst = copy.groups_[l].params[i].tensor;
        std::copy(src.data().begin(), src.data().end(), dst.data().begin());
        dst.set_requires_grad(src.requires_grad());
      }
    }
    auto src_lin = linears();
    auto dst_lin = copy.linears();
    copy.adapter_groups_.assign(groups_.size(), LayerGroup{});
    for (std::size_t l = 0; l < adapter_groups_.size(); ++l) {
      copy.adapter_groups_[l].name = adapter_groups_[l].name;
      copy.adapter_groups_[l].trainable = adapter_groups_[l].trainable;
    }
    for (std::size_t i = 0; i < src_lin.size(); ++i) {
      if (!src_lin[i].second->adapter) continue;
      const auto& ad = *src_lin[i].second->adapter;
      LoraAdapter c{ad.a.clone(), ad.b.clone(), ad.rank, ad.alpha};
      dst_lin[i].second->adapter = c;
      auto& group = copy.adapter_groups_[src_lin[i].first];
      group.params.push_back({"lora/" + dst_lin[i].second->name + ".A", c.a, true});
      group.params.push_back({"lora/" + dst_lin[i].second->name + ".B", c.b, true});
    }
    if (adapter_groups_.empty()) copy.adapter_groups_.clear();
    return copy;
  }

  const ModelConfig& config() const { return cfg_; }
  std::size_t num_layers() const { return groups_.size(); }
  std::size_t num_blocks() const { return cfg_.num_blocks; }

  std::vector<LayerGroup>& groups() { return groups_; }
  const std::vector<LayerGroup>& groups() const { return groups_; }

  // Adapter parameters, indexed like groups(); empty when no adapters are attached.
  std::vector<LayerGroup>& adapter_groups() { return adapter_groups_; }
  const std::vector<LayerGroup>& adapter_groups() const { return adapter_groups_; }

  const std::vector<Param>& layer_params(std::size_t layer) const {
    if (layer >= groups_.size()) {
      throw IndexError("layer index " + std::to_string(layer) + " outside [0, " +
                       std::to_string(groups_.size() - 1) + "]");
    }
    return groups_[layer].params;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& g : groups_) n += g.numel();
    return n;
  }

  std::size_t adapter_parameter_count() const {
    std::size_t n = 0;
    for (const auto& g : adapter_groups_) n += g.numel();
    return n;
  }

  bool has_adapters() const { return !adapter_groups_.empty(); }

  // Every linear projection with the layer index that owns it. Block
  // projections come first (q, k, v, o, fc1, fc2 per block), then the head
  // projection when it is not tied to the token embedding.
  std::vector<std::pair<std::size_t, Linear*>> linears() {
    std::vector<std::pair<std::size_t, Linear*>> out;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      for (Linear* lin : {&blocks_[b].q, &blocks_[b].k, &blocks_[b].v, &blocks_[b].o,
                          &blocks_[b].fc1, &blocks_[b].fc2}) {
        out.emplace_back(b + 1, lin);
      }
    }
    if (!cfg_.tie_embeddings) out.emplace_back(cfg_.num_blocks + 1, &head_);
    return out;
  }
  std::vector<std::pair<std::size_t, const Linear*>> linears() const {
    std::vector<std::pair<std::size_t, const Linear*>> out;
    for (auto [l, lin] : const_cast<TransformerModel*>(this)->linears()) out.emplace_back(l, lin);
    return out;
  }

  const Block& block(std::size_t index) const { return blocks_.at(index); }
  const Linear& head() const { return head_; }
  const Tensor& token_embedding() const { return wte_; }
  const Tensor& position_embedding() const { return wpe_; }

  // Logits [batch*seq x vocab].
  Tensor forward(Tape& tape, const TokenBatch& batch, ForwardTrace* trace = nullptr) const {
    check_batch(batch);
    std::vector<std::int32_t> positions(batch.batch * batch.seq);
    for (std::size_t i = 0; i < positions.size(); ++i) {
      positions[i] = static_cast<std::int32_t>(i % batch.seq);
    }
    Tensor x = ops::add(tape, ops::embedding_lookup(tape, wte_, batch.tokens),
                        ops::embedding_lookup(tape, wpe_, positions));
    for (const auto& blk : blocks_) {
      Tensor h = ops::layer_norm(tape, x, blk.ln1_gain, blk.ln1_bias);
      Tensor q = apply_linear(tape, h, blk.q);
      Tensor k = apply_linear(tape, h, blk.k);
      Tensor v = apply_linear(tape, h, blk.v);
      std::vector<double>* probs = nullptr;
      if (trace) probs = &trace->attention.emplace_back();
      Tensor att = ops::causal_attention(tape, q, k, v, batch.batch, batch.seq, cfg_.num_heads, probs);
      x = ops::add(tape, x, apply_linear(tape, att, blk.o));
      Tensor h2 = ops::layer_norm(tape, x, blk.ln2_gain, blk.ln2_bias);
      Tensor m = ops::gelu(tape, apply_linear(tape, h2, blk.fc1));
      x = ops::add(tape, x, apply_linear(tape, m, blk.fc2));
    }
    Tensor hf = ops::layer_norm(tape, x, lnf_gain_, lnf_bias_);
    return apply_linear(tape, hf, head_);
  }

  Tensor loss(Tape& tape, const TokenBatch& batch) const {
    if (batch.targets.size() != batch.tokens.size()) {
      throw ShapeError("batch has " + std::to_string(batch.targets.size()) + " targets for " +
                       std::to_string(batch.tokens.size()) + " tokens");
    }
    return ops::cross_entropy(tape, forward(tape, batch), batch.targets);
  }

  static constexpr double kInitStd = 0.02;

 private:
  explicit TransformerModel(const ModelConfig& cfg) : cfg_(cfg) {
    const std::size_t d = cfg.model_dim, hidden = cfg.mlp_hidden();
    auto matrix = [](std::size_t r, std::size_t c) { return Tensor::zeros({r, c}, true); };
    auto vec = [](std::size_t n) { return Tensor::zeros({n}, true); };
    auto lin = [&](std::string name, std::size_t in, std::size_t out, bool bias) {
      return Linear{std::move(name), matrix(out, in), bias ? vec(out) : Tensor{}, std::nullopt};
    };

    wte_ = matrix(cfg.vocab_size, d);
    wpe_ = matrix(cfg.max_seq_len, d);
    groups_.push_back({"embedding", {{"embedding.wte", wte_, true}, {"embedding.wpe", wpe_, true}}, true});

    for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
      const std::string p = "block." + std::to_string(b + 1) + ".";
      Block blk{vec(d), vec(d),
                lin(p + "attn.q", d, d, true), lin(p + "attn.k", d, d, true),
                lin(p + "attn.v", d, d, true), lin(p + "attn.o", d, d, true),
                vec(d), vec(d),
                lin(p + "mlp.fc1", d, hidden, true), lin(p + "mlp.fc2", hidden, d, true)};
      LayerGroup g{"block." + std::to_string(b + 1), {}, true};
      g.params.push_back({p + "ln1.gain", blk.ln1_gain, false});
      g.params.push_back({p + "ln1.bias", blk.ln1_bias, false});
      for (const Linear* l : {&blk.q, &blk.k, &blk.v, &blk.o}) {
        g.params.push_back({l->name + ".weight", l->weight, true});
        g.params.push_back({l->name + ".bias", l->bias, false});
      }
      g.params.push_back({p + "ln2.gain", blk.ln2_gain, false});
      g.params.push_back({p + "ln2.bias", blk.ln2_bias, false});
      for (const Linear* l : {&blk.fc1, &blk.fc2}) {
        g.params.push_back({l->name + ".weight", l->weight, true});
        g.params.push_back({l->name + ".bias", l->bias, false});
      }
      groups_.push_back(std::move(g));
      blocks_.push_back(std::move(blk));
    }

    lnf_gain_ = vec(d);
    lnf_bias_ = vec(d);
    LayerGroup head{"head", {{"head.ln.gain", lnf_gain_, false}, {"head.ln.bias", lnf_bias_, false}}, true};
    if (cfg.tie_embeddings) {
      // The projection aliases wte and is owned by the embedding group.
      head_ = Linear{"head.proj", wte_, Tensor{}, std::nullopt};
    } else {
      head_ = lin("head.proj", d, cfg.vocab_size, false);
      head.params.push_back({"head.proj.weight", head_.weight, true});
    }
    groups_.push_back(std::move(head));
  }

  void check_batch(const TokenBatch& batch) const {
    if (batch.batch == 0 || batch.seq == 0) throw ShapeError("empty token batch");
    if (batch.tokens.size() != batch.batch * batch.seq) {
      throw ShapeError("token batch holds " + std::to_string(batch.tokens.size()) + " tokens, expected " +
                       std::to_string(batch.batch * batch.seq));
    }
    if (batch.seq > cfg_.max_seq_len) {
      throw LengthError("sequence length " + std::to_string(batch.seq) + " exceeds max_seq_len " +
                        std::to_string(cfg_.max_seq_len));
    }
  }

  ModelConfig cfg_;
  Tensor wte_, wpe_;
  std::vector<Block> blocks_;
  Tensor lnf_gain_, lnf_bias_;
  Linear head_;
  std::vector<LayerGroup> groups_;
  std::vector<LayerGroup> adapter_groups_;
};

}  // namespace lisa
