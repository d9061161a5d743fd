#pragma once

// Config-driven runs, sweeps, the convex check and plot-data merging.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lisa/checkpoint.hpp"
#include "lisa/config.hpp"
#include "lisa/data.hpp"
#include "lisa/quad.hpp"
#include "lisa/rng.hpp"
#include "lisa/runlog.hpp"
#include "lisa/trainer.hpp"

namespace lisa {

namespace fs = std::filesystem;

inline constexpr const char* kOutputRootEnv = "LISA_OUTPUT_ROOT";

// Relative output paths resolve against $LISA_OUTPUT_ROOT when it is set,
// otherwise against the working directory.
inline fs::path resolve_output(const std::string& output) {
  const fs::path p(output);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) return fs::path(root) / p;
  return p;
}

struct SeedPlan {
  std::uint64_t model = 0;
  std::uint64_t data_order = 0;
  std::uint64_t schedule = 0;
  std::uint64_t adapters = 0;
};

// Independent streams derived from the run seed. Full and LISA runs with the
// same seed share model init and batch order.
inline SeedPlan derive_seeds(const RunConfig& c) {
  SeedPlan s;
  s.model = c.seed;
  s.data_order = splitmix64(c.seed ^ 0xDA7A0000ull);
  s.schedule = c.schedule && c.schedule->seed ? *c.schedule->seed : splitmix64(c.seed ^ 0x5C4ED000ull);
  s.adapters = splitmix64(c.seed ^ 0x10BA0000ull);
  return s;
}

inline FreezeSchedule build_schedule(const ScheduleConfig& sc, std::size_t num_middle, std::size_t steps,
                                     std::uint64_t seed) {
  FreezeSchedule s;
  if (sc.mode == SampleMode::bernoulli && !sc.probabilities.empty()) {
    s = FreezeSchedule::with_probabilities(sc.probabilities, sc.period, steps, seed);
  } else if (sc.mode == SampleMode::bernoulli) {
    s = FreezeSchedule::bernoulli(num_middle, sc.gamma, sc.period, steps, seed);
  } else {
    s = FreezeSchedule::fixed(num_middle, sc.gamma, sc.period, steps, seed);
  }
  if (!sc.always_active.empty()) s.always_active = sc.always_active;
  try {
    s.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("/schedule: ") + e.what());
  }
  return s;
}

inline TrainOptions train_options(const RunConfig& c) {
  TrainOptions o;
  o.steps = c.steps;
  o.batch_size = c.batch_size;
  o.data_seed = derive_seeds(c).data_order;
  o.optimizer = c.optimizer;
  o.norm_cadence = c.norm_cadence;
  o.memory_bytes_per_param = c.memory_bytes_per_param;
  return o;
}

// Vocabulary and split sizes, kept next to the logs.
inline json data_summary(const Dataset& data) {
  json j = {{"kind", to_string(data.descriptor.kind)},
            {"vocab_size", data.vocab_size},
            {"train_samples", data.train.size()},
            {"validation_samples", data.validation.size()}};
  if (!data.symbols.empty()) j["symbols"] = data.symbols;
  return j;
}

// Trains according to `c` and writes the run into `dir`.
inline RunLog run_config(const RunConfig& c, const fs::path& dir) {
  const Dataset data = make_dataset(c.data);
  const ModelConfig mc = resolve_model(c, data);
  const SeedPlan seeds = derive_seeds(c);
  TransformerModel model = TransformerModel::build(mc, seeds.model);
  const TrainOptions opts = train_options(c);

  RunLog log;
  switch (c.method) {
    case Method::full:
      log = run_full(model, data, opts);
      break;
    case Method::lisa:
      log = run_lisa(model, data, opts, build_schedule(*c.schedule, mc.num_blocks, c.steps, seeds.schedule),
                     c.schedule->moment_policy);
      break;
    case Method::lora:
      log = run_lora(model, data, opts, *c.lora, seeds.adapters);
      break;
  }
  log.config = to_json(c);
  log.seed = c.seed;
  export_run(log, dir,
             {{"data.json", data_summary(data).dump(2, ' ', false, json::error_handler_t::replace) + "\n"},
              {"model.ckpt", serialize_checkpoint(model, c.lora, nullptr)}});
  return log;
}

inline RunLog run(const std::string& config_path) {
  const RunConfig c = load_run_config(config_path);
  return run_config(c, resolve_output(c.output));
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis { gamma, period, seed, rank };

inline SweepAxis parse_axis(const std::string& name) {
  return parse_enum<SweepAxis>(name, "--axis",
                               {{"gamma", SweepAxis::gamma}, {"K", SweepAxis::period},
                                {"seed", SweepAxis::seed}, {"rank", SweepAxis::rank}});
}

inline const char* to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::gamma: return "gamma";
    case SweepAxis::period: return "K";
    case SweepAxis::seed: return "seed";
    case SweepAxis::rank: return "rank";
  }
  return "?";
}

inline RunConfig apply_axis(RunConfig c, SweepAxis axis, std::uint64_t value) {
  switch (axis) {
    case SweepAxis::gamma:
      if (c.method != Method::lisa) throw ConfigError("sweep: axis gamma needs method lisa");
      c.schedule->gamma = value;
      break;
    case SweepAxis::period:
      if (c.method != Method::lisa) throw ConfigError("sweep: axis K needs method lisa");
      if (value < 1) throw ConfigError("sweep: K must be at least 1");
      c.schedule->period = value;
      break;
    case SweepAxis::seed:
      c.seed = value;
      break;
    case SweepAxis::rank:
      if (c.method != Method::lora) throw ConfigError("sweep: axis rank needs method lora");
      if (value < 1) throw ConfigError("sweep: rank must be at least 1");
      c.lora->rank = value;
      c.lora->alpha = static_cast<double>(value);
      break;
  }
  return c;
}

struct SweepRow {
  std::uint64_t axis_value = 0;
  std::string status;  // completed, diverged or error
  std::string message;
  double final_loss = 0.0;
  double mean_trainable_params = 0.0;
  std::size_t peak_estimated_bytes = 0;
};

// Trainable parameter count averaged over executed steps.
inline double mean_trainable_params(const RunLog& log) {
  if (log.steps.empty()) return 0.0;
  double total = 0.0;
  for (const auto& p : log.periods) {
    const std::size_t last = std::min(p.first_step + p.length - 1, log.steps.back().step);
    if (last >= p.first_step) total += static_cast<double>(p.memory.trainable_params) * (last - p.first_step + 1);
  }
  return total / static_cast<double>(log.steps.size());
}

inline std::size_t peak_estimated_bytes(const RunLog& log) {
  std::size_t peak = 0;
  for (const auto& p : log.periods) peak = std::max(peak, p.memory.total);
  return peak;
}

inline std::string sweep_summary_csv(const std::vector<SweepRow>& rows) {
  std::string s = "axis_value,final_loss,mean_trainable_params,peak_estimated_bytes,status,message\n";
  for (const auto& r : rows) {
    std::string msg = r.message;
    std::replace(msg.begin(), msg.end(), ',', ';');
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    s += std::to_string(r.axis_value) + ",";
    if (r.status != "error") {
      s += format_double(r.final_loss) + "," + format_double(r.mean_trainable_params) + "," +
           std::to_string(r.peak_estimated_bytes);
    } else {
      s += ",,";
    }
    s += "," + r.status + "," + msg + "\n";
  }
  return s;
}

// One run per value into <output>/<axis>_<value>/, then <output>/summary.csv.
// A failing run is recorded in its row and the sweep continues.
inline std::vector<SweepRow> sweep(const RunConfig& base, SweepAxis axis, const std::vector<std::uint64_t>& values) {
  if (values.empty()) throw ConfigError("sweep: no values given");
  apply_axis(base, axis, values.front());  // rejects an axis the method does not have
  const fs::path root = resolve_output(base.output);
  std::vector<SweepRow> rows;
  for (std::uint64_t v : values) {
    SweepRow row;
    row.axis_value = v;
    try {
      RunConfig c = apply_axis(base, axis, v);
      c.output = (fs::path(base.output) / (std::string(to_string(axis)) + "_" + std::to_string(v))).string();
      const RunLog log = run_config(c, resolve_output(c.output));
      row.status = to_string(log.status);
      row.message = log.message;
      row.final_loss = log.final_loss();
      row.mean_trainable_params = mean_trainable_params(log);
      row.peak_estimated_bytes = peak_estimated_bytes(log);
    } catch (const std::exception& e) {
      row.status = "error";
      row.message = e.what();
    }
    rows.push_back(std::move(row));
  }
  fs::create_directories(root);
  write_file((root / "summary.csv").string(), sweep_summary_csv(rows));
  return rows;
}

// ---------------------------------------------------------------------------
// Convex check from a config file

struct QuadConfig {
  std::size_t dim = 32;
  std::size_t blocks = 4;
  double regularization = 0.1;
  double x_min = 0.5;
  double x_max = 2.0;
  std::uint64_t seed = 0;
  ScheduleConfig schedule{SampleMode::fixed_gamma, 1, 5, std::nullopt, {}, {}, MomentPolicy::discard};
  AdamWConfig optimizer{.lr = 0.3};
  LrSchedule lr_schedule = LrSchedule::inv_sqrt;
  std::vector<std::size_t> steps{100, 1000, 10000};
  std::string output = "runs/quad";
};

inline json to_json(const QuadConfig& q) {
  return {{"schema_version", kSchemaVersion},
          {"quad",
           {{"dim", q.dim}, {"blocks", q.blocks}, {"regularization", q.regularization},
            {"x_min", q.x_min}, {"x_max", q.x_max}, {"seed", q.seed},
            {"lr_schedule", q.lr_schedule == LrSchedule::inv_sqrt ? "inv_sqrt" : "constant"}, {"steps", q.steps}}},
          {"schedule", to_json(q.schedule)},
          {"optimizer", to_json(q.optimizer)},
          {"output", q.output}};
}

inline QuadConfig quad_config_from_json(const json& j) {
  FieldReader r(j, "");
  QuadConfig q;
  const int version = r.require<int>("schema_version");
  if (version != kSchemaVersion) throw ConfigError("/schema_version: unsupported version " + std::to_string(version));
  if (r.has("quad")) {
    FieldReader qr(r.sub("quad"), "/quad");
    q.dim = qr.get<std::size_t>("dim", q.dim);
    q.blocks = qr.get<std::size_t>("blocks", q.blocks);
    q.regularization = qr.get<double>("regularization", q.regularization);
    q.x_min = qr.get<double>("x_min", q.x_min);
    q.x_max = qr.get<double>("x_max", q.x_max);
    q.seed = qr.get<std::uint64_t>("seed", q.seed);
    q.lr_schedule = parse_enum<LrSchedule>(qr.get<std::string>("lr_schedule", "inv_sqrt"), qr.field("lr_schedule"),
                                           {{"inv_sqrt", LrSchedule::inv_sqrt}, {"constant", LrSchedule::constant}});
    q.steps = qr.get<std::vector<std::size_t>>("steps", q.steps);
    qr.finish();
  }
  if (r.has("schedule")) q.schedule = schedule_config_from_json(r.sub("schedule"), "/schedule");
  if (r.has("optimizer")) q.optimizer = adamw_config_from_json(r.sub("optimizer"), "/optimizer");
  q.output = r.get<std::string>("output", q.output);
  r.finish();
  if (q.regularization < 0.0) throw ConfigError("/quad/regularization: S must be positive semidefinite");
  if (!(q.x_min <= q.x_max)) throw ConfigError("/quad/x_min: must not exceed x_max");
  return q;
}

inline QuadResult run_quad_config(const QuadConfig& q) {
  const QuadraticProblem problem = QuadraticProblem::make_default(q.dim, q.blocks, q.regularization, q.seed,
                                                                  q.x_min, q.x_max);
  std::size_t longest = 1;
  for (std::size_t t : q.steps) longest = std::max(longest, t);
  const std::uint64_t seed = q.schedule.seed.value_or(splitmix64(q.seed ^ 0x5C4ED000ull));
  const FreezeSchedule sched = build_schedule(q.schedule, q.blocks, longest, seed);
  return quad_check(problem, sched, q.steps, q.optimizer, q.lr_schedule, q.schedule.moment_policy);
}

inline std::string quad_table_csv(const QuadResult& r) {
  std::string s = "T,avg_suboptimality,scaled_by_sqrt_T\n";
  for (const auto& row : r.rows) {
    s += std::to_string(row.steps) + "," + format_double(row.avg_suboptimality) + "," + format_double(row.scaled) + "\n";
  }
  return s;
}

// Runs the check and writes quad.csv plus a manifest under the output path.
inline QuadResult quad_check_file(const std::string& config_path) {
  const json j = parse_json_text(read_file(config_path), config_path);
  QuadConfig q;
  try {
    q = quad_config_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(config_path + ": " + e.what());
  }
  QuadResult result = run_quad_config(q);
  const fs::path dir = resolve_output(q.output);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
  const std::string table = quad_table_csv(result);
  write_file((dir / "quad.csv").string(), table);
  const json manifest = {{"format", "lisa-quad"},
                         {"version", kVersion},
                         {"config_hash", config_hash(to_json(q))},
                         {"config", to_json(q)},
                         {"files", {{"quad.csv", sha256_hex(table)}}}};
  write_file((dir / "manifest.json").string(), manifest.dump(2) + "\n");
  return result;
}

// ---------------------------------------------------------------------------
// Plot data

struct PlotData {
  std::string loss_csv;
  std::string norms_csv;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::size_t step_stride(const RunLog& log) {
  if (log.steps.size() < 2) return 1;
  const std::size_t stride = log.steps[1].step - log.steps[0].step;
  for (std::size_t i = 2; i < log.steps.size(); ++i) {
    if (log.steps[i].step - log.steps[i - 1].step != stride) return 0;  // irregular
  }
  return stride;
}

}  // namespace detail

// Merges runs into one loss table (step, loss per run) and one layer-norm
// table (layer, norm per run). Runs of unequal length are padded with empty
// cells. When the step grids differ, the table uses the coarsest grid and a
// warning is recorded.
inline PlotData plot_data(const std::vector<RunLog>& runs, std::vector<std::string> names) {
  if (runs.empty()) throw ConfigError("plot-data: need at least one run");
  if (names.size() != runs.size()) throw ShapeError("plot-data: one name per run required");
  const bool single = runs.size() == 1;
  PlotData out;

  std::size_t coarse = 1;
  std::vector<std::size_t> strides;
  for (const auto& r : runs) {
    strides.push_back(detail::step_stride(r));
    coarse = std::max(coarse, strides.back());
  }
  std::set<std::size_t> grid;
  const bool uniform = std::all_of(strides.begin(), strides.end(), [&](std::size_t s) { return s == strides[0]; });
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (uniform || strides[i] == coarse) {
      for (const auto& s : runs[i].steps) grid.insert(s.step);
    }
  }
  if (!uniform) {
    for (std::size_t i = 0; i < runs.size(); ++i) {
      if (strides[i] != coarse) {
        out.warnings.push_back("run " + names[i] + " resampled from step stride " + std::to_string(strides[i]) +
                               " to the coarsest stride " + std::to_string(coarse));
      }
    }
  }

  out.loss_csv = "step";
  for (const auto& n : names) out.loss_csv += single ? ",loss" : ",loss_" + n;
  out.loss_csv += "\n";
  std::vector<std::map<std::size_t, double>> by_step(runs.size());
  for (std::size_t i = 0; i < runs.size(); ++i)
    for (const auto& s : runs[i].steps) by_step[i][s.step] = s.loss;
  for (std::size_t step : grid) {
    out.loss_csv += std::to_string(step);
    for (const auto& m : by_step) {
      auto it = m.find(step);
      out.loss_csv += "," + (it == m.end() ? std::string() : format_double(it->second));
    }
    out.loss_csv += "\n";
  }

  std::size_t layers = 0;
  const std::vector<std::string>* layer_names = nullptr;
  for (const auto& r : runs) {
    if (r.norms && r.norms->mean.size() > layers) {
      layers = r.norms->mean.size();
      layer_names = &r.norms->layer_names;
    }
  }
  out.norms_csv = "layer_index,layer_name";
  for (const auto& n : names) out.norms_csv += single ? ",mean_weight_norm" : ",norm_" + n;
  out.norms_csv += "\n";
  for (std::size_t l = 0; l < layers; ++l) {
    out.norms_csv += std::to_string(l) + "," + (*layer_names)[l];
    for (const auto& r : runs) {
      const bool has = r.norms && l < r.norms->mean.size();
      out.norms_csv += "," + (has ? format_double(r.norms->mean[l]) : std::string());
    }
    out.norms_csv += "\n";
  }
  return out;
}

inline PlotData plot_data(const std::vector<fs::path>& dirs, const fs::path& out_dir) {
  std::vector<RunLog> runs;
  std::vector<std::string> names;
  for (const auto& d : dirs) {
    runs.push_back(import_run(d));
    std::string name = d.filename().string();
    if (name.empty()) name = d.parent_path().filename().string();
    if (std::find(names.begin(), names.end(), name) != names.end()) name += "_" + std::to_string(names.size());
    names.push_back(name);
  }
  PlotData data = plot_data(runs, names);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + out_dir.string() + "': " + ec.message());
  write_file((out_dir / "loss.csv").string(), data.loss_csv);
  write_file((out_dir / "norms.csv").string(), data.norms_csv);
  std::string warn = "warning\n";
  for (const auto& w : data.warnings) warn += w + "\n";
  write_file((out_dir / "warnings.csv").string(), warn);
  return data;
}

}  // namespace lisa
