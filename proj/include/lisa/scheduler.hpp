#pragma once

// Layerwise importance sampling: every K steps a fresh set of active layers
// is drawn. Layers 0 (embedding) and N_L+1 (head) are always active by
// default; the N_L middle blocks are sampled.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "lisa/errors.hpp"
#include "lisa/optim.hpp"
#include "lisa/rng.hpp"

namespace lisa {

enum class SampleMode { bernoulli, fixed_gamma };

inline const char* to_string(SampleMode m) { return m == SampleMode::bernoulli ? "bernoulli" : "fixed_gamma"; }

struct FreezeSchedule {
  SampleMode mode = SampleMode::fixed_gamma;
  std::size_t num_middle = 0;          // N_L
  std::size_t gamma = 2;               // fixed_gamma: exact count; bernoulli: expected count
  std::vector<double> probabilities;   // bernoulli only, one per layer (N_L + 2)
  std::size_t period = 1;              // K
  std::size_t total_steps = 1;         // T
  std::uint64_t seed = 0;
  std::vector<std::size_t> always_active;

  static FreezeSchedule fixed(std::size_t num_middle, std::size_t gamma, std::size_t period,
                              std::size_t total_steps, std::uint64_t seed) {
    FreezeSchedule s;
    s.mode = SampleMode::fixed_gamma;
    s.num_middle = num_middle;
    s.gamma = gamma;
    s.period = period;
    s.total_steps = total_steps;
    s.seed = seed;
    s.always_active = {0, num_middle + 1};
    s.validate();
    return s;
  }

  // p = {1, gamma/N_L, ..., gamma/N_L, 1}.
  static FreezeSchedule bernoulli(std::size_t num_middle, std::size_t gamma, std::size_t period,
                                  std::size_t total_steps, std::uint64_t seed) {
    FreezeSchedule s = fixed(num_middle, gamma, period, total_steps, seed);
    s.mode = SampleMode::bernoulli;
    s.probabilities = uniform_middle_probabilities(num_middle, gamma);
    s.validate();
    return s;
  }

  static FreezeSchedule with_probabilities(std::vector<double> p, std::size_t period,
                                           std::size_t total_steps, std::uint64_t seed) {
    if (p.size() < 3) throw ConfigError("schedule: need probabilities for at least 3 layers");
    FreezeSchedule s;
    s.mode = SampleMode::bernoulli;
    s.num_middle = p.size() - 2;
    s.gamma = 0;
    s.probabilities = std::move(p);
    s.period = period;
    s.total_steps = total_steps;
    s.seed = seed;
    s.always_active = {0, s.num_middle + 1};
    s.validate();
    return s;
  }

  static std::vector<double> uniform_middle_probabilities(std::size_t num_middle, std::size_t gamma) {
    std::vector<double> p(num_middle + 2, static_cast<double>(gamma) / static_cast<double>(num_middle));
    p.front() = 1.0;
    p.back() = 1.0;
    return p;
  }

  std::size_t num_layers() const { return num_middle + 2; }
  std::size_t num_periods() const { return (total_steps + period - 1) / period; }

  // Steps in period i; the last period is truncated when K does not divide T.
  std::size_t period_length(std::size_t i) const {
    const std::size_t start = i * period;
    return std::min(period, total_steps - start);
  }

  void validate() const {
    if (num_middle < 1) throw ConfigError("schedule: need at least one middle layer");
    if (period < 1) throw ConfigError("schedule: period K must be at least 1");
    if (total_steps < 1) throw ConfigError("schedule: total steps T must be at least 1");
    for (std::size_t l : always_active) {
      if (l >= num_layers()) {
        throw ConfigError("schedule: always_active index " + std::to_string(l) + " outside [0, " +
                          std::to_string(num_layers() - 1) + "]");
      }
    }
    if (mode == SampleMode::fixed_gamma) {
      if (gamma > num_middle) {
        throw ConfigError("schedule: gamma " + std::to_string(gamma) + " exceeds N_L " +
                          std::to_string(num_middle));
      }
      const std::size_t pinned_middle = static_cast<std::size_t>(std::count_if(
          always_active.begin(), always_active.end(), [&](std::size_t l) { return l >= 1 && l <= num_middle; }));
      if (gamma > num_middle - pinned_middle) {
        throw ConfigError("schedule: gamma exceeds the number of samplable middle layers");
      }
    } else {
      if (probabilities.size() != num_layers()) {
        throw ConfigError("schedule: expected " + std::to_string(num_layers()) + " probabilities, got " +
                          std::to_string(probabilities.size()));
      }
      for (double p : probabilities) {
        if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("schedule: probabilities must lie in [0, 1]");
      }
    }
  }

  bool operator==(const FreezeSchedule&) const = default;
};

struct ActiveMask {
  std::size_t period = 0;
  std::vector<std::size_t> active;  // sorted ascending

  bool contains(std::size_t layer) const { return std::binary_search(active.begin(), active.end(), layer); }
  ActiveSet as_set() const { return {active.begin(), active.end()}; }
  bool operator==(const ActiveMask&) const = default;
};

// Deterministic in (seed, period): the draw for period i uses a counter-based
// stream keyed on i, so masks can be replayed in any order.
inline ActiveMask sample_mask(const FreezeSchedule& sched, std::size_t period) {
  if (period >= sched.num_periods()) {
    throw IndexError("period " + std::to_string(period) + " outside [0, " +
                     std::to_string(sched.num_periods()) + ")");
  }
  CounterRng rng(sched.seed, period);
  std::vector<bool> on(sched.num_layers(), false);
  for (std::size_t l : sched.always_active) on[l] = true;

  if (sched.mode == SampleMode::bernoulli) {
    for (std::size_t l = 0; l < sched.num_layers(); ++l) {
      const double u = rng.uniform();
      // Freeze when U(0,1) > p; keeping u < p gives p(1) = 1 and p(0) = 0 exactly.
      if (u < sched.probabilities[l]) on[l] = true;
    }
  } else {
    std::vector<std::size_t> pool;
    for (std::size_t l = 1; l <= sched.num_middle; ++l)
      if (!on[l]) pool.push_back(l);
    for (std::size_t j = 0; j < sched.gamma; ++j) {
      const std::size_t pick = j + static_cast<std::size_t>(rng.below(pool.size() - j));
      std::swap(pool[j], pool[pick]);
      on[pool[j]] = true;
    }
  }

  ActiveMask mask{period, {}};
  for (std::size_t l = 0; l < on.size(); ++l)
    if (on[l]) mask.active.push_back(l);
  return mask;
}

// p(l) = lora_norm(l) / full_norm(l), clipped into [0, 1].
inline std::vector<double> probabilities_from_norms(const std::vector<double>& lora_norms,
                                                    const std::vector<double>& full_norms) {
  if (lora_norms.size() != full_norms.size()) {
    throw ShapeError("probabilities_from_norms: " + std::to_string(lora_norms.size()) + " LoRA norms vs " +
                     std::to_string(full_norms.size()) + " full norms");
  }
  std::vector<double> p(full_norms.size());
  for (std::size_t l = 0; l < p.size(); ++l) {
    if (!(full_norms[l] > 0.0)) {
      throw DomainError("probabilities_from_norms: full-parameter norm of layer " + std::to_string(l) +
                        " is not positive");
    }
    p[l] = std::clamp(lora_norms[l] / full_norms[l], 0.0, 1.0);
  }
  return p;
}

}  // namespace lisa
