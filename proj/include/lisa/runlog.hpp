#pragma once

// Run logs and their on-disk form: loss.csv, norms.csv, norm_series.csv,
// masks.jsonl, timing.csv and manifest.json. Every file except timing.csv is
// a pure function of the run config, and the manifest records its SHA-256.

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "lisa/errors.hpp"
#include "lisa/instrument.hpp"
#include "lisa/sha256.hpp"

#ifndef LISA_VERSION
#define LISA_VERSION "v0.1.0"
#endif

namespace lisa {

using json = nlohmann::json;

inline constexpr const char* kVersion = LISA_VERSION;

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  bool operator==(const StepRecord&) const = default;
};

struct PeriodRecord {
  std::size_t period = 0;
  std::size_t first_step = 0;
  std::size_t length = 0;
  std::vector<std::size_t> active;
  MemoryEstimate memory;
  bool operator==(const PeriodRecord&) const = default;
};

enum class RunStatus { completed, diverged };

inline const char* to_string(RunStatus s) { return s == RunStatus::completed ? "completed" : "diverged"; }

inline constexpr std::size_t kFinalLossWindow = 20;

struct RunLog {
  std::string method;
  json config;  // snapshot of the run config
  std::uint64_t seed = 0;
  RunStatus status = RunStatus::completed;
  std::string message;  // why a run stopped early
  std::vector<StepRecord> steps;
  std::vector<PeriodRecord> periods;
  std::optional<NormReport> norms;
  std::vector<double> step_seconds;  // wall clock, not hashed

  // Mean of the last `window` logged losses. Single minibatch losses are
  // noisy, so comparisons between runs use this smoothed value.
  double final_loss(std::size_t window = kFinalLossWindow) const {
    if (steps.empty()) return 0.0;
    const std::size_t n = std::min(std::max<std::size_t>(window, 1), steps.size());
    double total = 0.0;
    for (std::size_t i = steps.size() - n; i < steps.size(); ++i) total += steps[i].loss;
    return total / static_cast<double>(n);
  }

  bool operator==(const RunLog&) const = default;
};

// Shortest decimal form that parses back to the same double.
inline std::string format_double(double x) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  if (ec != std::errc{}) throw std::runtime_error("format_double failed");
  return {buf, end};
}

inline double parse_double(std::string_view s, const std::string& where) {
  double x = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
  if (ec != std::errc{} || end != s.data() + s.size()) {
    throw DataError(where + ": cannot parse number '" + std::string(s) + "'");
  }
  return x;
}

inline std::size_t parse_size(std::string_view s, const std::string& where) {
  std::size_t x = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
  if (ec != std::errc{} || end != s.data() + s.size()) {
    throw DataError(where + ": cannot parse integer '" + std::string(s) + "'");
  }
  return x;
}

inline json memory_to_json(const MemoryEstimate& m) {
  return {{"weights", m.weights},         {"gradients", m.gradients},
          {"optimizer", m.optimizer},     {"adapters", m.adapters},
          {"activations", m.activations}, {"total", m.total},
          {"trainable_params", m.trainable_params}, {"moment_params", m.moment_params}};
}

inline MemoryEstimate memory_from_json(const json& j) {
  MemoryEstimate m;
  m.weights = j.at("weights").get<std::size_t>();
  m.gradients = j.at("gradients").get<std::size_t>();
  m.optimizer = j.at("optimizer").get<std::size_t>();
  m.adapters = j.at("adapters").get<std::size_t>();
  m.activations = j.at("activations").get<std::size_t>();
  m.total = j.at("total").get<std::size_t>();
  m.trainable_params = j.at("trainable_params").get<std::size_t>();
  m.moment_params = j.at("moment_params").get<std::size_t>();
  return m;
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

namespace detail {

inline std::string loss_csv(const RunLog& log) {
  std::string s = "step,loss,lr\n";
  for (const auto& r : log.steps) s += std::to_string(r.step) + "," + format_double(r.loss) + "," + format_double(r.lr) + "\n";
  return s;
}

inline std::string norms_csv(const NormReport& n) {
  std::string s = "layer_index,layer_name,mean_weight_norm\n";
  for (std::size_t l = 0; l < n.mean.size(); ++l) {
    s += std::to_string(l) + "," + n.layer_names[l] + "," + format_double(n.mean[l]) + "\n";
  }
  return s;
}

inline std::string norm_series_csv(const NormReport& n) {
  std::string s = "step";
  for (const auto& name : n.layer_names) s += "," + name;
  s += "\n";
  for (std::size_t i = 0; i < n.series.size(); ++i) {
    s += std::to_string(n.steps[i]);
    for (double x : n.series[i]) s += "," + format_double(x);
    s += "\n";
  }
  return s;
}

inline std::string masks_jsonl(const RunLog& log) {
  std::string s;
  for (const auto& p : log.periods) {
    json j = {{"period", p.period},
              {"first_step", p.first_step},
              {"length", p.length},
              {"active", p.active},
              {"memory_bytes", memory_to_json(p.memory)}};
    s += j.dump() + "\n";
  }
  return s;
}

inline std::string timing_csv(const RunLog& log) {
  std::string s = "step,seconds\n";
  for (std::size_t i = 0; i < log.step_seconds.size(); ++i) {
    s += std::to_string(log.steps.at(i).step) + "," + format_double(log.step_seconds[i]) + "\n";
  }
  return s;
}

}  // namespace detail

inline std::string config_hash(const json& config) { return sha256_hex(config.dump()); }

// Writes the run into `dir` (created if missing). `extra` files (name, bytes)
// are written and hashed alongside the logs. A run with no steps writes only
// the manifest.
inline void export_run(const RunLog& log, const std::filesystem::path& dir,
                       const std::vector<std::pair<std::string, std::string>>& extra = {}) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());

  json files = json::object();
  auto emit = [&](const std::string& name, const std::string& bytes, bool hashed) {
    write_file((dir / name).string(), bytes);
    files[name] = hashed ? json(sha256_hex(bytes)) : json(nullptr);
  };
  if (!log.steps.empty()) {
    emit("loss.csv", detail::loss_csv(log), true);
    emit("masks.jsonl", detail::masks_jsonl(log), true);
    if (log.norms) {
      emit("norms.csv", detail::norms_csv(*log.norms), true);
      emit("norm_series.csv", detail::norm_series_csv(*log.norms), true);
    }
    emit("timing.csv", detail::timing_csv(log), false);
    for (const auto& [name, bytes] : extra) emit(name, bytes, true);
  }
  json manifest = {{"format", "lisa-run"},
                   {"format_version", 1},
                   {"version", kVersion},
                   {"method", log.method},
                   {"seed", log.seed},
                   {"status", to_string(log.status)},
                   {"message", log.message},
                   {"steps", log.steps.size()},
                   {"config_hash", config_hash(log.config)},
                   {"config", log.config},
                   {"activation_model", kActivationModel},
                   {"files", files}};
  write_file((dir / "manifest.json").string(), manifest.dump(2) + "\n");
}

inline RunLog import_run(const std::filesystem::path& dir) {
  const std::string manifest_path = (dir / "manifest.json").string();
  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw DataError(manifest_path + ": " + e.what());
  }
  RunLog log;
  try {
    log.method = manifest.at("method").get<std::string>();
    log.seed = manifest.at("seed").get<std::uint64_t>();
    log.status = manifest.at("status").get<std::string>() == "diverged" ? RunStatus::diverged : RunStatus::completed;
    log.message = manifest.at("message").get<std::string>();
    log.config = manifest.at("config");
  } catch (const json::exception& e) {
    throw DataError(manifest_path + ": " + e.what());
  }
  const json& files = manifest.at("files");
  auto has = [&](const char* name) { return files.contains(name); };

  if (has("loss.csv")) {
    const std::string path = (dir / "loss.csv").string();
    auto rows = lines_of(read_file(path));
    for (std::size_t i = 1; i < rows.size(); ++i) {
      auto c = split(rows[i], ',');
      if (c.size() != 3) throw DataError(path + ": malformed row " + std::to_string(i + 1));
      log.steps.push_back({parse_size(c[0], path), parse_double(c[1], path), parse_double(c[2], path)});
    }
  }
  if (has("masks.jsonl")) {
    const std::string path = (dir / "masks.jsonl").string();
    for (const auto& row : lines_of(read_file(path))) {
      try {
        json j = json::parse(row);
        log.periods.push_back({j.at("period").get<std::size_t>(), j.at("first_step").get<std::size_t>(),
                               j.at("length").get<std::size_t>(), j.at("active").get<std::vector<std::size_t>>(),
                               memory_from_json(j.at("memory_bytes"))});
      } catch (const json::exception& e) {
        throw DataError(path + ": " + e.what());
      }
    }
  }
  if (has("norms.csv") && has("norm_series.csv")) {
    NormReport n;
    const std::string path = (dir / "norms.csv").string();
    auto rows = lines_of(read_file(path));
    for (std::size_t i = 1; i < rows.size(); ++i) {
      auto c = split(rows[i], ',');
      if (c.size() != 3) throw DataError(path + ": malformed row " + std::to_string(i + 1));
      n.layer_names.push_back(c[1]);
      n.mean.push_back(parse_double(c[2], path));
    }
    const std::string spath = (dir / "norm_series.csv").string();
    auto srows = lines_of(read_file(spath));
    for (std::size_t i = 1; i < srows.size(); ++i) {
      auto c = split(srows[i], ',');
      if (c.size() != n.layer_names.size() + 1) throw DataError(spath + ": malformed row " + std::to_string(i + 1));
      n.steps.push_back(parse_size(c[0], spath));
      std::vector<double> row;
      for (std::size_t k = 1; k < c.size(); ++k) row.push_back(parse_double(c[k], spath));
      n.series.push_back(std::move(row));
    }
    log.norms = std::move(n);
  }
  if (has("timing.csv")) {
    const std::string path = (dir / "timing.csv").string();
    auto rows = lines_of(read_file(path));
    for (std::size_t i = 1; i < rows.size(); ++i) {
      auto c = split(rows[i], ',');
      if (c.size() != 2) throw DataError(path + ": malformed row " + std::to_string(i + 1));
      log.step_seconds.push_back(parse_double(c[1], path));
    }
  }
  return log;
}

}  // namespace lisa
