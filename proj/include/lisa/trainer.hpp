#pragma once

// One training loop shared by full-parameter, LoRA and LISA runs. The three
// entry points differ only in which groups are trainable during each period.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lisa/data.hpp"
#include "lisa/instrument.hpp"
#include "lisa/lora.hpp"
#include "lisa/model.hpp"
#include "lisa/optim.hpp"
#include "lisa/runlog.hpp"
#include "lisa/scheduler.hpp"

namespace lisa {

enum class NormCadence { every_step, every_period };

// Period boundary hook: called once the period's trainable set is in place
// (end = false) and again after its last step (end = true).
using PeriodObserver = std::function<void(std::size_t period, bool end, const TransformerModel&, const AdamW&)>;

struct TrainOptions {
  std::size_t steps = 100;
  std::size_t batch_size = 8;
  std::uint64_t data_seed = 0;  // minibatch order
  AdamWConfig optimizer;
  NormCadence norm_cadence = NormCadence::every_step;
  std::size_t memory_bytes_per_param = 8;
  PeriodObserver observer;  // optional
};

namespace detail {

// Decides the trainable groups for a period; returns the period length.
struct PeriodPlan {
  std::vector<std::size_t> active;
  std::size_t length = 0;
};

template <class Planner>
RunLog train_loop(TransformerModel& model, const Dataset& data, const TrainOptions& opts, std::string method,
                  AdamW& optimizer, std::vector<LayerGroup>& stepped, Planner&& plan_period,
                  std::optional<AdapterLayout> adapters, MomentPolicy policy) {
  if (opts.steps < 1) throw ConfigError("steps must be at least 1");
  RunLog log;
  log.method = std::move(method);
  BatchStream stream(data, opts.batch_size, opts.data_seed);
  const ArchSpec spec = ArchSpec::from_model(model.config());
  const Precision prec = Precision::for_bytes_per_param(opts.memory_bytes_per_param);

  std::vector<std::size_t> norm_steps;
  std::vector<std::vector<double>> norm_series;
  ActiveSet ever_active;
  std::size_t step = 0, period = 0;

  while (step < opts.steps && log.status == RunStatus::completed) {
    PeriodPlan plan = plan_period(period, step);
    const ActiveSet active(plan.active.begin(), plan.active.end());
    ever_active.insert(active.begin(), active.end());
    const ActiveSet& moments = policy == MomentPolicy::retain ? ever_active : active;
    const ActiveSet trainable_base = adapters ? ActiveSet{} : active;
    PeriodRecord rec{period, step + 1, plan.length, plan.active,
                     estimate_active(spec, trainable_base, adapters ? ActiveSet{} : moments, adapters, prec,
                                     opts.batch_size, model.config().max_seq_len)};
    log.periods.push_back(std::move(rec));
    if (opts.observer) opts.observer(period, false, model, optimizer);

    for (std::size_t k = 0; k < plan.length && step < opts.steps; ++k) {
      const auto t0 = std::chrono::steady_clock::now();
      TokenBatch batch = stream.batch(step);
      Tape tape;
      Tensor loss = model.loss(tape, batch);
      const double value = loss.item();
      ++step;
      if (!std::isfinite(value)) {
        log.status = RunStatus::diverged;
        log.message = "non-finite loss at step " + std::to_string(step);
        break;
      }
      try {
        tape.backward(loss);
        optimizer.step(stepped);
      } catch (const NumericError& e) {
        log.status = RunStatus::diverged;
        log.message = "step " + std::to_string(step) + ": " + e.what();
        break;
      }
      zero_grads(stepped);
      log.steps.push_back({step, value, optimizer.config().lr});
      const bool period_end = k + 1 == plan.length || step == opts.steps;
      if (opts.norm_cadence == NormCadence::every_step || period_end) {
        norm_steps.push_back(step);
        norm_series.push_back(layer_norms(model));
      }
      log.step_seconds.push_back(
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    if (opts.observer) opts.observer(period, true, model, optimizer);
    ++period;
  }
  if (!norm_series.empty()) {
    log.norms = finalize_norm_report(layer_names(model), std::move(norm_steps), std::move(norm_series));
  }
  return log;
}

inline std::vector<std::size_t> all_layers(const TransformerModel& model) {
  std::vector<std::size_t> out(model.num_layers());
  for (std::size_t l = 0; l < out.size(); ++l) out[l] = l;
  return out;
}

}  // namespace detail

inline RunLog run_full(TransformerModel& model, const Dataset& data, const TrainOptions& opts) {
  AdamW optimizer(opts.optimizer);
  ActiveSet all;
  for (std::size_t l = 0; l < model.num_layers(); ++l) all.insert(l);
  set_trainable_mask(model.groups(), all, MomentPolicy::retain, optimizer);
  auto plan = [&](std::size_t, std::size_t) { return detail::PeriodPlan{detail::all_layers(model), opts.steps}; };
  return detail::train_loop(model, data, opts, "full", optimizer, model.groups(), plan, std::nullopt,
                            MomentPolicy::retain);
}

// Resamples the active set at the start of every period of `schedule`.
inline RunLog run_lisa(TransformerModel& model, const Dataset& data, const TrainOptions& opts,
                       const FreezeSchedule& schedule, MomentPolicy policy = MomentPolicy::discard) {
  schedule.validate();
  if (schedule.num_layers() != model.num_layers()) {
    throw ConfigError("schedule covers " + std::to_string(schedule.num_layers()) + " layers, model has " +
                      std::to_string(model.num_layers()));
  }
  if (schedule.total_steps != opts.steps) throw ConfigError("schedule total_steps differs from run steps");
  AdamW optimizer(opts.optimizer);
  auto plan = [&](std::size_t period, std::size_t) {
    ActiveMask mask = sample_mask(schedule, period);
    set_trainable_mask(model.groups(), mask.as_set(), policy, optimizer);
    return detail::PeriodPlan{mask.active, schedule.period_length(period)};
  };
  return detail::train_loop(model, data, opts, "lisa", optimizer, model.groups(), plan, std::nullopt, policy);
}

// Attaches adapters (base frozen) and trains only the adapter groups.
inline RunLog run_lora(TransformerModel& model, const Dataset& data, const TrainOptions& opts,
                       const LoraConfig& cfg, std::uint64_t adapter_seed) {
  if (!model.has_adapters()) attach_adapters(model, cfg, adapter_seed);
  AdamW optimizer(opts.optimizer);
  std::vector<std::size_t> adapted;
  for (std::size_t l = 0; l < model.adapter_groups().size(); ++l) {
    auto& g = model.adapter_groups()[l];
    g.trainable = !g.params.empty();
    if (g.trainable) adapted.push_back(l);
  }
  auto plan = [&](std::size_t, std::size_t) { return detail::PeriodPlan{adapted, opts.steps}; };
  return detail::train_loop(model, data, opts, "lora", optimizer, model.adapter_groups(), plan,
                            AdapterLayout{cfg.rank, cfg.include_head}, MomentPolicy::retain);
}

}  // namespace lisa
