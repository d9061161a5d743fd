#pragma once

// Layerwise weight norms and the analytic training-memory accountant.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "lisa/errors.hpp"
#include "lisa/lora.hpp"
#include "lisa/model.hpp"
#include "lisa/optim.hpp"

namespace lisa {

// ---------------------------------------------------------------------------
// Weight norms

inline double l2_norm(std::span<const Param> params) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double x : p.tensor.data()) sq += x * x;
  return std::sqrt(sq);
}

// L2 norm of every layer group's parameters, concatenated. Adapted
// projections contribute their effective weight W + (alpha/r) B A.
inline std::vector<double> layer_norms(const TransformerModel& model) {
  std::unordered_map<const TensorStorage*, const Linear*> adapted;
  for (auto [layer, lin] : model.linears())
    if (lin->adapter) adapted[lin->weight.id()] = lin;

  std::vector<double> norms;
  norms.reserve(model.num_layers());
  for (const auto& group : model.groups()) {
    double sq = 0.0;
    for (const auto& p : group.params) {
      if (auto it = adapted.find(p.tensor.id()); it != adapted.end()) {
        for (double x : effective_weight(*it->second)) sq += x * x;
      } else {
        for (double x : p.tensor.data()) sq += x * x;
      }
    }
    norms.push_back(std::sqrt(sq));
  }
  return norms;
}

inline std::vector<std::string> layer_names(const TransformerModel& model) {
  std::vector<std::string> names;
  for (const auto& g : model.groups()) names.push_back(g.name);
  return names;
}

// Per-layer mean over recorded steps of the layer's weight norm.
struct NormReport {
  std::vector<std::string> layer_names;
  std::vector<std::size_t> steps;
  std::vector<std::vector<double>> series;  // [recorded step][layer]
  std::vector<double> mean;                 // [layer]

  bool operator==(const NormReport&) const = default;
};

inline NormReport finalize_norm_report(std::vector<std::string> names, std::vector<std::size_t> steps,
                                       std::vector<std::vector<double>> series) {
  if (series.empty()) throw ContractError("finalize_norm_report: no recorded steps");
  if (steps.size() != series.size()) throw ShapeError("finalize_norm_report: steps and series differ in length");
  const std::size_t layers = names.size();
  std::vector<double> total(layers, 0.0);
  for (const auto& row : series) {
    if (row.size() != layers) throw ShapeError("finalize_norm_report: ragged norm series");
    for (std::size_t l = 0; l < layers; ++l) total[l] += row[l];
  }
  for (double& t : total) t /= static_cast<double>(series.size());
  return {std::move(names), std::move(steps), std::move(series), std::move(total)};
}

// ---------------------------------------------------------------------------
// Architecture description used for parameter and byte accounting

struct LinearShape {
  std::string name;
  std::size_t in = 0;
  std::size_t out = 0;
  bool bias = false;
};

struct ArchSpec {
  std::string name;
  std::size_t vocab = 0;
  std::size_t max_seq = 0;
  std::size_t dim = 0;
  std::size_t blocks = 0;
  std::size_t heads = 0;
  std::size_t kv_heads = 0;
  std::size_t mlp_hidden = 0;
  bool gated_mlp = false;
  bool linear_bias = true;
  bool norm_bias = true;
  std::size_t norms_per_block = 2;
  bool learned_positions = true;
  bool tied_embeddings = false;
  bool head_bias = false;

  std::size_t kv_dim() const { return dim / heads * kv_heads; }
  std::size_t norm_params() const { return norm_bias ? 2 * dim : dim; }
  std::size_t num_layers() const { return blocks + 2; }

  std::vector<LinearShape> block_linears() const {
    std::vector<LinearShape> out{{"attn.q", dim, dim, linear_bias},
                                 {"attn.k", dim, kv_dim(), linear_bias},
                                 {"attn.v", dim, kv_dim(), linear_bias},
                                 {"attn.o", dim, dim, linear_bias}};
    if (gated_mlp) {
      out.push_back({"mlp.gate", dim, mlp_hidden, linear_bias});
      out.push_back({"mlp.up", dim, mlp_hidden, linear_bias});
      out.push_back({"mlp.down", mlp_hidden, dim, linear_bias});
    } else {
      out.push_back({"mlp.fc1", dim, mlp_hidden, linear_bias});
      out.push_back({"mlp.fc2", mlp_hidden, dim, linear_bias});
    }
    return out;
  }

  std::size_t block_params() const {
    std::size_t n = norms_per_block * norm_params();
    for (const auto& l : block_linears()) n += l.in * l.out + (l.bias ? l.out : 0);
    return n;
  }
  std::size_t embedding_params() const { return vocab * dim + (learned_positions ? max_seq * dim : 0); }
  std::size_t head_params() const {
    return norm_params() + (tied_embeddings ? 0 : vocab * dim) + (head_bias ? vocab : 0);
  }
  std::size_t layer_params(std::size_t layer) const {
    if (layer == 0) return embedding_params();
    if (layer == blocks + 1) return head_params();
    if (layer > blocks + 1) throw IndexError("layer index outside the architecture");
    return block_params();
  }
  std::size_t total_params() const { return embedding_params() + blocks * block_params() + head_params(); }

  // Adapter parameters r (d_in + d_out) summed over a block's projections.
  std::size_t block_lora_params(std::size_t rank) const {
    std::size_t n = 0;
    for (const auto& l : block_linears()) n += rank * (l.in + l.out);
    return n;
  }
  std::size_t head_lora_params(std::size_t rank) const { return rank * (dim + vocab); }

  // Activation elements one token keeps alive for the backward pass of one
  // block, without checkpointing:
  //   norm inputs            norms_per_block * dim
  //   attention input        dim
  //   q, k, v                dim + 2 kv_dim
  //   attention probs        heads * seq
  //   o-projection input     dim
  //   MLP input              dim (shared with attention input for 1 norm/block)
  //   MLP interior           2 hidden (fc1 out, act out) or 3 hidden (gate, up, product)
  std::size_t block_activation_elements(std::size_t seq) const {
    std::size_t n = norms_per_block * dim + dim + dim + 2 * kv_dim() + heads * seq + dim;
    if (norms_per_block > 1) n += dim;
    n += (gated_mlp ? 3 : 2) * mlp_hidden;
    return n;
  }
  // Final norm input and output plus the logits.
  std::size_t head_activation_elements() const { return 2 * dim + vocab; }

  static ArchSpec from_model(const ModelConfig& cfg) {
    ArchSpec s;
    s.name = "model";
    s.vocab = cfg.vocab_size;
    s.max_seq = cfg.max_seq_len;
    s.dim = cfg.model_dim;
    s.blocks = cfg.num_blocks;
    s.heads = cfg.num_heads;
    s.kv_heads = cfg.num_heads;
    s.mlp_hidden = cfg.mlp_hidden();
    s.tied_embeddings = cfg.tie_embeddings;
    return s;
  }

  bool operator==(const ArchSpec&) const = default;
};

// Public architecture facts for the reference model families.
inline const std::vector<ArchSpec>& arch_presets() {
  static const std::vector<ArchSpec> presets = [] {
    std::vector<ArchSpec> v;
    ArchSpec gpt2{"gpt2-small", 50257, 1024, 768, 12, 12, 12, 3072};
    gpt2.tied_embeddings = true;
    v.push_back(gpt2);

    auto llama_like = [](std::string name, std::size_t vocab, std::size_t seq, std::size_t dim,
                         std::size_t blocks, std::size_t heads, std::size_t kv, std::size_t hidden) {
      ArchSpec s{std::move(name), vocab, seq, dim, blocks, heads, kv, hidden};
      s.gated_mlp = true;
      s.linear_bias = false;
      s.norm_bias = false;
      s.learned_positions = false;
      return s;
    };
    v.push_back(llama_like("tinyllama", 32000, 2048, 2048, 22, 32, 4, 5632));

    ArchSpec phi{"phi-2", 51200, 2048, 2560, 32, 32, 32, 10240};
    phi.norms_per_block = 1;
    phi.learned_positions = false;
    phi.head_bias = true;
    v.push_back(phi);

    v.push_back(llama_like("mistral-7b", 32000, 32768, 4096, 32, 32, 8, 14336));
    v.push_back(llama_like("llama-2-7b", 32000, 4096, 4096, 32, 32, 32, 11008));
    v.push_back(llama_like("llama-2-70b", 32000, 4096, 8192, 80, 64, 8, 28672));
    return v;
  }();
  return presets;
}

inline const ArchSpec& arch_preset(const std::string& name) {
  for (const auto& s : arch_presets())
    if (s.name == name) return s;
  std::string known;
  for (const auto& s : arch_presets()) known += (known.empty() ? "" : ", ") + s.name;
  throw ConfigError("unknown model preset '" + name + "' (known: " + known + ")");
}

// ---------------------------------------------------------------------------
// Memory accounting

// Byte widths per stored value.
struct Precision {
  std::size_t weight = 8;
  std::size_t grad = 8;
  std::size_t moment = 8;
  std::size_t activation = 8;

  // 8 and 4 are uniform. 2 is the usual mixed-precision layout: 16-bit
  // weights, gradients and activations with fp32 Adam moments.
  static Precision for_bytes_per_param(std::size_t bytes) {
    switch (bytes) {
      case 8: return {8, 8, 8, 8};
      case 4: return {4, 4, 4, 4};
      case 2: return {2, 2, 4, 2};
      default: throw ConfigError("bytes_per_param must be 2, 4 or 8");
    }
  }
  bool operator==(const Precision&) const = default;
};

struct MemoryEstimate {
  std::size_t weights = 0;      // all base weights
  std::size_t gradients = 0;    // trainable base parameters
  std::size_t optimizer = 0;    // Adam moments of base parameters holding state
  std::size_t adapters = 0;     // adapter weights + gradients + moments
  std::size_t activations = 0;  // live layers x per-layer footprint x batch x seq
  std::size_t total = 0;
  std::size_t trainable_params = 0;
  std::size_t moment_params = 0;

  bool operator==(const MemoryEstimate&) const = default;
};

inline constexpr const char* kActivationModel =
    "activations = batch * seq * activation_bytes * sum over live layers of per-token elements; "
    "block: norms*dim + 3*dim + (dim + 2*kv_dim) + heads*seq + [dim if 2 norms] + (2|3)*mlp_hidden "
    "+ rank per adapted projection; head: 2*dim + vocab; embedding: 0. "
    "A layer is live when it has trainable weights or adapters; frozen layers keep no activations.";

struct AdapterLayout {
  std::size_t rank = 0;
  bool include_head = false;
};

// Byte estimate for one configuration of trainable layers.
inline MemoryEstimate estimate_active(const ArchSpec& spec, const ActiveSet& trainable,
                                      const ActiveSet& moment_layers, std::optional<AdapterLayout> adapters,
                                      const Precision& prec, std::size_t batch, std::size_t seq) {
  MemoryEstimate e;
  e.weights = spec.total_params() * prec.weight;
  std::size_t train = 0, moments = 0, adapter_params = 0, act = 0;
  const std::size_t n_targets = spec.block_linears().size();
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const bool is_block = l >= 1 && l <= spec.blocks;
    const bool is_head = l == spec.blocks + 1;
    std::size_t layer_adapters = 0, layer_adapter_act = 0;
    if (adapters) {
      if (is_block) {
        layer_adapters = spec.block_lora_params(adapters->rank);
        layer_adapter_act = adapters->rank * n_targets;
      } else if (is_head && adapters->include_head) {
        layer_adapters = spec.head_lora_params(adapters->rank);
        layer_adapter_act = adapters->rank;
      }
    }
    const bool live = trainable.count(l) > 0 || layer_adapters > 0;
    if (trainable.count(l)) train += spec.layer_params(l);
    if (moment_layers.count(l)) moments += spec.layer_params(l);
    adapter_params += layer_adapters;
    if (live) {
      std::size_t per_token = layer_adapter_act;
      if (is_block) per_token += spec.block_activation_elements(seq);
      if (is_head) per_token += spec.head_activation_elements();
      act += per_token;
    }
  }
  e.gradients = train * prec.grad;
  e.optimizer = 2 * moments * prec.moment;
  e.adapters = adapter_params * (prec.weight + prec.grad + 2 * prec.moment);
  e.activations = act * batch * seq * prec.activation;
  e.total = e.weights + e.gradients + e.optimizer + e.adapters + e.activations;
  e.trainable_params = train + adapter_params;
  e.moment_params = moments + adapter_params;
  return e;
}

struct MemoryMethod {
  enum class Kind { full, lora, lisa };
  Kind kind = Kind::full;
  std::size_t rank = 0;
  bool lora_head = false;
  std::size_t gamma = 0;
  std::vector<std::size_t> always_active;  // empty: embedding and head
  MomentPolicy policy = MomentPolicy::discard;

  static MemoryMethod full() { return {}; }
  static MemoryMethod lora(std::size_t r, bool head = false) {
    MemoryMethod m;
    m.kind = Kind::lora;
    m.rank = r;
    m.lora_head = head;
    return m;
  }
  static MemoryMethod lisa(std::size_t gamma, MomentPolicy policy = MomentPolicy::discard) {
    MemoryMethod m;
    m.kind = Kind::lisa;
    m.gamma = gamma;
    m.policy = policy;
    return m;
  }
};

// Peak estimate for a training method. LISA is evaluated at its worst-case
// mask: the always-active groups plus the gamma largest middle blocks (all
// blocks are the same size here).
inline MemoryEstimate estimate_memory(const ArchSpec& spec, const MemoryMethod& method,
                                      std::size_t bytes_per_param, std::size_t batch, std::size_t seq) {
  const Precision prec = Precision::for_bytes_per_param(bytes_per_param);
  ActiveSet all;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) all.insert(l);
  switch (method.kind) {
    case MemoryMethod::Kind::full:
      return estimate_active(spec, all, all, std::nullopt, prec, batch, seq);
    case MemoryMethod::Kind::lora:
      if (method.rank < 1) throw ConfigError("lora estimate needs rank >= 1");
      return estimate_active(spec, {}, {}, AdapterLayout{method.rank, method.lora_head}, prec, batch, seq);
    case MemoryMethod::Kind::lisa: {
      if (method.gamma > spec.blocks) throw ConfigError("gamma exceeds the number of blocks");
      ActiveSet active;
      if (method.always_active.empty()) {
        active = {0, spec.blocks + 1};
      } else {
        active.insert(method.always_active.begin(), method.always_active.end());
      }
      std::size_t added = 0;
      for (std::size_t l = 1; l <= spec.blocks && added < method.gamma; ++l) {
        if (active.insert(l).second) ++added;
      }
      const ActiveSet& moments = method.policy == MomentPolicy::retain ? all : active;
      return estimate_active(spec, active, moments, std::nullopt, prec, batch, seq);
    }
  }
  throw ContractError("unknown memory method");
}

}  // namespace lisa
