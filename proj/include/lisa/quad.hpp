#pragma once

// Convex check: LISA-style Adam on a diagonal least-squares problem with a
// quadratic regularizer, measuring the running average suboptimality
//   R(T) = (1/T) sum_{t=1..T} f_reg(w_t) - f_reg*.
// The coordinates are split into equal contiguous blocks that play the role
// of middle layers; layers 0 and N+1 exist but are empty.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lisa/errors.hpp"
#include "lisa/model.hpp"
#include "lisa/optim.hpp"
#include "lisa/scheduler.hpp"

namespace lisa {

// f(w) = 1/2 sum_i (x_i w_i - y_i)^2, f_reg(w) = f(w) + 1/2 sum_i s_i w_i^2.
struct QuadraticProblem {
  std::size_t blocks = 4;
  std::vector<double> x;   // diagonal of the data matrix
  std::vector<double> y;   // targets
  std::vector<double> s;   // diagonal of S, must be >= 0
  std::vector<double> w0;  // starting point

  std::size_t dim() const { return x.size(); }
  std::size_t block_size() const { return dim() / blocks; }

  void validate() const {
    if (x.empty()) throw ConfigError("quad: dimension must be positive");
    if (y.size() != dim() || s.size() != dim() || w0.size() != dim()) {
      throw ConfigError("quad: x, y, s and w0 must have the same length");
    }
    if (blocks < 1 || dim() % blocks != 0) {
      throw ConfigError("quad: dimension " + std::to_string(dim()) + " does not split into " +
                        std::to_string(blocks) + " equal blocks");
    }
    for (double v : s) {
      if (!(v >= 0.0)) throw ConfigError("quad: S must be positive semidefinite (diagonal entries >= 0)");
    }
  }

  double f_reg(std::span<const double> w) const {
    double total = 0.0;
    for (std::size_t i = 0; i < dim(); ++i) {
      const double r = x[i] * w[i] - y[i];
      total += 0.5 * r * r + 0.5 * s[i] * w[i] * w[i];
    }
    return total;
  }

  void gradient(std::span<const double> w, std::size_t begin, std::span<double> g) const {
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t j = begin + i;
      g[i] = x[j] * (x[j] * w[j] - y[j]) + s[j] * w[j];
    }
  }

  // Coordinate-wise minimizer; coordinates with x_i = s_i = 0 are flat and
  // stay at w0.
  std::vector<double> minimizer() const {
    std::vector<double> w(dim());
    for (std::size_t i = 0; i < dim(); ++i) {
      const double denom = x[i] * x[i] + s[i];
      w[i] = denom > 0.0 ? x[i] * y[i] / denom : w0[i];
    }
    return w;
  }

  double optimum() const { return f_reg(minimizer()); }

  // x ~ U[x_min, x_max], y ~ N(0, 1), S = reg * I, w0 = 0.
  static QuadraticProblem make_default(std::size_t dim = 32, std::size_t blocks = 4, double reg = 0.1,
                                       std::uint64_t seed = 0, double x_min = 0.5, double x_max = 2.0) {
    QuadraticProblem p;
    p.blocks = blocks;
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> ux(x_min, x_max);
    std::normal_distribution<double> ny(0.0, 1.0);
    for (std::size_t i = 0; i < dim; ++i) {
      p.x.push_back(ux(gen));
      p.y.push_back(ny(gen));
    }
    p.s.assign(dim, reg);
    p.w0.assign(dim, 0.0);
    p.validate();
    return p;
  }
};

enum class LrSchedule { constant, inv_sqrt };

struct QuadRow {
  std::size_t steps = 0;
  double avg_suboptimality = 0.0;  // R(T)
  double scaled = 0.0;             // R(T) * sqrt(T)
};

struct QuadResult {
  std::vector<QuadRow> rows;
  std::vector<double> final_w;
};

// Runs max(steps_list) LISA-Adam steps and reports R(T) for every T in the
// list. With LrSchedule::inv_sqrt the rate at global step t is lr / sqrt(t).
inline QuadResult quad_check(const QuadraticProblem& problem, const FreezeSchedule& schedule,
                             std::vector<std::size_t> steps_list, AdamWConfig opt,
                             LrSchedule lr_schedule = LrSchedule::inv_sqrt,
                             MomentPolicy policy = MomentPolicy::discard) {
  problem.validate();
  if (steps_list.empty()) throw ConfigError("quad: steps list is empty");
  std::sort(steps_list.begin(), steps_list.end());
  if (steps_list.front() < 1) throw ConfigError("quad: step counts must be positive");
  if (schedule.num_middle != problem.blocks) {
    throw ConfigError("quad: schedule has " + std::to_string(schedule.num_middle) + " middle layers, problem has " +
                      std::to_string(problem.blocks) + " blocks");
  }
  const std::size_t total = steps_list.back();
  if (schedule.total_steps < total) throw ConfigError("quad: schedule is shorter than the longest step count");

  const std::size_t bs = problem.block_size();
  std::vector<LayerGroup> groups(problem.blocks + 2);
  groups.front().name = "empty.first";
  groups.back().name = "empty.last";
  for (std::size_t b = 0; b < problem.blocks; ++b) {
    std::vector<double> init(problem.w0.begin() + b * bs, problem.w0.begin() + (b + 1) * bs);
    groups[b + 1].name = "block." + std::to_string(b + 1);
    groups[b + 1].params.push_back({"w." + std::to_string(b + 1), Tensor({bs}, std::move(init), true), false});
  }
  auto current_w = [&] {
    std::vector<double> w;
    for (std::size_t b = 1; b <= problem.blocks; ++b) {
      auto d = groups[b].params[0].tensor.data();
      w.insert(w.end(), d.begin(), d.end());
    }
    return w;
  };

  opt.weight_decay = 0.0;  // the regularizer is part of the objective
  AdamW adam(opt);
  const double f_star = problem.optimum();
  QuadResult result;
  double running = 0.0;
  std::size_t next = 0;
  for (std::size_t t = 1; t <= total; ++t) {
    const std::size_t step0 = t - 1;
    if (step0 % schedule.period == 0) {
      set_trainable_mask(groups, sample_mask(schedule, step0 / schedule.period).as_set(), policy, adam);
    }
    const auto w = current_w();
    for (std::size_t b = 1; b <= problem.blocks; ++b) {
      if (!groups[b].trainable) continue;
      problem.gradient(w, (b - 1) * bs, groups[b].params[0].tensor.grad_buffer());
    }
    adam.set_lr(lr_schedule == LrSchedule::inv_sqrt ? opt.lr / std::sqrt(static_cast<double>(t)) : opt.lr);
    adam.step(groups);
    running += problem.f_reg(current_w()) - f_star;
    while (next < steps_list.size() && steps_list[next] == t) {
      const double r = running / static_cast<double>(t);
      result.rows.push_back({t, r, r * std::sqrt(static_cast<double>(t))});
      ++next;
    }
  }
  result.final_w = current_w();
  return result;
}

}  // namespace lisa
