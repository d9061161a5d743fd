#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>

#include "lisa/errors.hpp"
#include "lisa/model.hpp"
#include "lisa/rng.hpp"

namespace lisa {

struct LoraConfig {
  std::size_t rank = 4;
  double alpha = 0.0;         // <= 0 means alpha = rank
  bool include_head = false;  // also adapt the (untied) output projection

  double effective_alpha() const { return alpha > 0.0 ? alpha : static_cast<double>(rank); }

  void validate() const {
    if (rank < 1) throw ConfigError("lora: rank must be at least 1");
  }

  bool operator==(const LoraConfig&) const = default;
};

inline constexpr double kLoraInitStd = 0.02;

inline bool is_lora_target(const TransformerModel& model, std::size_t layer, const LoraConfig& cfg) {
  return layer <= model.num_blocks() || cfg.include_head;
}

// Attaches rank-r adapters to every attention and MLP projection (and the
// head projection when requested). A ~ N(0, 0.02), B = 0, so outputs are
// unchanged. Base parameters are frozen; adapter groups become trainable.
inline void attach_adapters(TransformerModel& model, const LoraConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (model.has_adapters()) throw ContractError("attach_adapters: model already carries adapters");
  if (cfg.include_head && model.config().tie_embeddings) {
    throw ConfigError("lora: include_head needs an untied head projection");
  }
  auto targets = model.linears();
  for (auto [layer, lin] : targets) {
    if (!is_lora_target(model, layer, cfg)) continue;
    if (cfg.rank > std::min(lin->in_features(), lin->out_features())) {
      throw ConfigError("lora: rank " + std::to_string(cfg.rank) + " exceeds min(d_in, d_out) of " + lin->name);
    }
  }

  std::mt19937_64 gen(seed);
  auto& adapters = model.adapter_groups();
  adapters.assign(model.num_layers(), LayerGroup{});
  for (std::size_t l = 0; l < model.num_layers(); ++l) adapters[l].name = model.groups()[l].name;

  for (auto [layer, lin] : targets) {
    if (!is_lora_target(model, layer, cfg)) continue;
    LoraAdapter ad{Tensor::zeros({cfg.rank, lin->in_features()}, true),
                   Tensor::zeros({lin->out_features(), cfg.rank}, true), cfg.rank, cfg.effective_alpha()};
    fill_normal(ad.a.data(), kLoraInitStd, gen);
    adapters[layer].params.push_back({"lora/" + lin->name + ".A", ad.a, true});
    adapters[layer].params.push_back({"lora/" + lin->name + ".B", ad.b, true});
    lin->adapter = std::move(ad);
  }
  for (auto& g : model.groups()) {
    g.trainable = false;
    for (auto& p : g.params) {
      p.tensor.set_requires_grad(false);
      p.tensor.clear_grad();
    }
  }
}

// Folds W' = W + (alpha/r) B A into every adapted projection and removes the
// adapters. Base groups become trainable again.
inline void merge_adapters(TransformerModel& model) {
  if (!model.has_adapters()) throw ContractError("merge_adapters: no adapters attached");
  for (auto [layer, lin] : model.linears()) {
    if (!lin->adapter) continue;
    auto merged = effective_weight(*lin);
    std::copy(merged.begin(), merged.end(), lin->weight.data().begin());
    lin->adapter.reset();
  }
  model.adapter_groups().clear();
  for (auto& g : model.groups()) {
    g.trainable = true;
    for (auto& p : g.params) p.tensor.set_requires_grad(true);
  }
}

// Sum of r (d_in + d_out) over the projections that would be adapted.
inline std::size_t lora_parameter_count(const TransformerModel& model, const LoraConfig& cfg) {
  std::size_t n = 0;
  for (auto [layer, lin] : model.linears()) {
    if (!is_lora_target(model, layer, cfg)) continue;
    n += cfg.rank * (lin->in_features() + lin->out_features());
  }
  return n;
}

}  // namespace lisa
