#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lisa/errors.hpp"
#include "lisa/model.hpp"
#include "lisa/tensor.hpp"

namespace lisa {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  bool decay_matrices_only = true;

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("optimizer: lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("optimizer: beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optimizer: beta2 must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("optimizer: eps must be positive");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
      throw ConfigError("optimizer: weight_decay must be non-negative");
    }
  }

  bool operator==(const AdamWConfig&) const = default;
};

// What happens to the Adam moments of a group while it is frozen.
enum class MomentPolicy { discard, retain };

inline const char* to_string(MomentPolicy p) { return p == MomentPolicy::discard ? "discard" : "retain"; }

struct MomentBuffers {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

struct StateBytes {
  std::size_t moments = 0;   // 2 x elements x 8
  std::size_t counters = 0;  // one 8-byte step counter per parameter tensor
  std::size_t total() const { return moments + counters; }
};

// AdamW with decoupled weight decay:
//   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
//   theta <- theta (1 - lr wd) - lr mhat / (sqrt(vhat) + eps)
// Buffers are created lazily the first time a parameter is stepped.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  void step(std::span<LayerGroup> groups) {
    for (auto& group : groups) {
      if (!group.trainable) continue;
      for (auto& param : group.params) {
        if (!param.tensor.has_grad()) {
          throw ContractError("adamw_step: trainable parameter " + param.name + " has no gradient");
        }
      }
    }
    for (auto& group : groups) {
      if (!group.trainable) continue;
      for (auto& param : group.params) update(param);
    }
  }

  // Drops the moments and step counters of every parameter in the group.
  void drop_state(const LayerGroup& group) {
    for (const auto& p : group.params) state_.erase(p.tensor.id());
  }

  const MomentBuffers* state_of(const Tensor& t) const {
    auto it = state_.find(t.id());
    return it == state_.end() ? nullptr : &it->second.buffers;
  }
  MomentBuffers* mutable_state_of(const Tensor& t) {
    auto it = state_.find(t.id());
    return it == state_.end() ? nullptr : &it->second.buffers;
  }
  void set_state(const Tensor& t, MomentBuffers buffers) {
    if (buffers.m.size() != t.numel() || buffers.v.size() != t.numel()) {
      throw ShapeError("optimizer state does not match parameter size");
    }
    state_[t.id()] = Entry{t, std::move(buffers)};
  }

  std::size_t moment_holding_count() const {
    std::size_t n = 0;
    for (const auto& [id, e] : state_) n += e.buffers.m.size();
    return n;
  }

  StateBytes state_bytes() const {
    return {2 * moment_holding_count() * sizeof(double), state_.size() * sizeof(std::uint64_t)};
  }

 private:
  struct Entry {
    Tensor param;  // pins the storage the key points at
    MomentBuffers buffers;
  };

  void update(Param& param) {
    Tensor& t = param.tensor;
    auto [it, fresh] = state_.try_emplace(t.id());
    Entry& e = it->second;
    if (fresh) {
      e.param = t;
      e.buffers.m.assign(t.numel(), 0.0);
      e.buffers.v.assign(t.numel(), 0.0);
    }
    auto& st = e.buffers;
    st.step += 1;
    const double t_step = static_cast<double>(st.step);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_step);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_step);
    const bool decays = cfg_.weight_decay > 0.0 && (param.decay || !cfg_.decay_matrices_only);
    const double keep = decays ? 1.0 - cfg_.lr * cfg_.weight_decay : 1.0;

    auto p = t.data();
    auto g = std::as_const(t).grad();
    if (!all_finite(g)) throw NumericError("adamw_step: non-finite gradient for " + param.name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
      st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = st.m[i] / bc1;
      const double vhat = st.v[i] / bc2;
      p[i] = p[i] * keep - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }

  AdamWConfig cfg_;
  std::unordered_map<const TensorStorage*, Entry> state_;
};

using ActiveSet = std::set<std::size_t>;

// Marks groups in `active` trainable and all others frozen. Frozen parameters
// stop requesting gradients; under MomentPolicy::discard their optimizer
// state is dropped so a later reactivation starts from t = 0, m = v = 0.
inline void set_trainable_mask(std::span<LayerGroup> groups, const ActiveSet& active,
                               MomentPolicy policy, AdamW& optimizer) {
  for (std::size_t l : active) {
    if (l >= groups.size()) {
      throw IndexError("active layer " + std::to_string(l) + " outside [0, " +
                       std::to_string(groups.size() - 1) + "]");
    }
  }
  for (std::size_t l = 0; l < groups.size(); ++l) {
    auto& group = groups[l];
    group.trainable = active.count(l) > 0;
    for (auto& p : group.params) {
      p.tensor.set_requires_grad(group.trainable);
      if (!group.trainable) p.tensor.clear_grad();
    }
    if (!group.trainable && policy == MomentPolicy::discard) optimizer.drop_state(group);
  }
}

inline void zero_grads(std::span<LayerGroup> groups) {
  for (auto& g : groups)
    for (auto& p : g.params) p.tensor.zero_grad();
}

inline std::size_t trainable_count(std::span<const LayerGroup> groups) {
  std::size_t n = 0;
  for (const auto& g : groups)
    if (g.trainable) n += g.numel();
  return n;
}

}  // namespace lisa
