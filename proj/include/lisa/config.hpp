#pragma once

// Run configuration files. JSON with an explicit schema_version; unknown keys
// and wrong types are rejected with the offending field path.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lisa/data.hpp"
#include "lisa/errors.hpp"
#include "lisa/lora.hpp"
#include "lisa/model.hpp"
#include "lisa/optim.hpp"
#include "lisa/scheduler.hpp"
#include "lisa/sha256.hpp"
#include "lisa/trainer.hpp"

namespace lisa {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

enum class Method { full, lora, lisa };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::full: return "full";
    case Method::lora: return "lora";
    case Method::lisa: return "lisa";
  }
  return "?";
}

struct ScheduleConfig {
  SampleMode mode = SampleMode::fixed_gamma;
  std::size_t gamma = 2;
  std::size_t period = 5;
  std::optional<std::uint64_t> seed;        // defaults to a value derived from the run seed
  std::vector<std::size_t> always_active;   // empty: embedding and head
  std::vector<double> probabilities;        // bernoulli only; empty: uniform over middle layers
  MomentPolicy moment_policy = MomentPolicy::discard;

  bool operator==(const ScheduleConfig&) const = default;
};

struct RunConfig {
  int schema_version = kSchemaVersion;
  Method method = Method::full;
  std::string model_preset;  // "desk" or empty
  ModelConfig model;         // vocab_size/max_seq_len of 0 follow the data
  DatasetDescriptor data;
  AdamWConfig optimizer;
  std::optional<LoraConfig> lora;
  std::optional<ScheduleConfig> schedule;
  std::size_t steps = 100;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  std::string output = "runs/default";
  NormCadence norm_cadence = NormCadence::every_step;
  std::size_t memory_bytes_per_param = 8;

  bool operator==(const RunConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Strict field reader

class FieldReader {
 public:
  FieldReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  T get(const std::string& key, T fallback) {
    if (!j_.contains(key)) {
      seen_.insert(key);
      return fallback;
    }
    return require<T>(key);
  }

  template <class T>
  T require(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(field(key) + ": missing required field");
    return convert<T>(j_.at(key), field(key));
  }

  const json& sub(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string field(const std::string& key) const { return path_ + "/" + key; }

  // Every key of the object must have been read.
  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(field(key) + ": unknown key");
    }
  }

  template <class T>
  static T convert(const json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where + ": expected true or false");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where + ": expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError(where + ": expected a number");
      return v.get<double>();
    } else if constexpr (std::is_same_v<T, int>) {
      if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
      return v.get<int>();
    } else if constexpr (std::is_unsigned_v<T>) {
      const bool ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
      if (!ok) throw ConfigError(where + ": expected a non-negative integer");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
      if (!v.is_array()) throw ConfigError(where + ": expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(convert<std::size_t>(v[i], where + "/" + std::to_string(i)));
      }
      return out;
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      if (!v.is_array()) throw ConfigError(where + ": expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) out.push_back(convert<double>(v[i], where + "/" + std::to_string(i)));
      return out;
    } else {
      static_assert(sizeof(T) == 0, "unsupported config field type");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "/" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class E>
E parse_enum(const std::string& value, const std::string& where,
             std::initializer_list<std::pair<const char*, E>> options) {
  std::string names;
  for (const auto& [name, e] : options) {
    if (value == name) return e;
    names += names.empty() ? name : std::string(", ") + name;
  }
  throw ConfigError(where + ": '" + value + "' is not one of " + names);
}

// ---------------------------------------------------------------------------
// Sections

inline json to_json(const ModelConfig& m) {
  return {{"vocab_size", m.vocab_size},   {"max_seq_len", m.max_seq_len}, {"model_dim", m.model_dim},
          {"num_heads", m.num_heads},     {"num_blocks", m.num_blocks},   {"mlp_ratio", m.mlp_ratio},
          {"tie_embeddings", m.tie_embeddings}};
}

inline ModelConfig model_config_from_json(const json& j, const std::string& path) {
  FieldReader r(j, path);
  ModelConfig m;
  m.vocab_size = r.get<std::size_t>("vocab_size", 0);
  m.max_seq_len = r.get<std::size_t>("max_seq_len", 0);
  m.model_dim = r.get<std::size_t>("model_dim", m.model_dim);
  m.num_heads = r.get<std::size_t>("num_heads", m.num_heads);
  m.num_blocks = r.get<std::size_t>("num_blocks", m.num_blocks);
  m.mlp_ratio = r.get<double>("mlp_ratio", m.mlp_ratio);
  m.tie_embeddings = r.get<bool>("tie_embeddings", m.tie_embeddings);
  r.finish();
  return m;
}

inline json to_json(const LoraConfig& c) {
  return {{"rank", c.rank}, {"alpha", c.effective_alpha()}, {"include_head", c.include_head}};
}

inline LoraConfig lora_config_from_json(const json& j, const std::string& path) {
  FieldReader r(j, path);
  LoraConfig c;
  c.rank = r.get<std::size_t>("rank", c.rank);
  c.alpha = r.get<double>("alpha", c.alpha);
  c.include_head = r.get<bool>("include_head", c.include_head);
  r.finish();
  if (c.rank < 1) throw ConfigError(r.field("rank") + ": must be at least 1");
  if (c.alpha <= 0.0) c.alpha = static_cast<double>(c.rank);
  return c;
}

inline json to_json(const AdamWConfig& c) {
  return {{"lr", c.lr},     {"beta1", c.beta1},
          {"beta2", c.beta2}, {"eps", c.eps},
          {"weight_decay", c.weight_decay}, {"decay_matrices_only", c.decay_matrices_only}};
}

inline AdamWConfig adamw_config_from_json(const json& j, const std::string& path) {
  FieldReader r(j, path);
  AdamWConfig c;
  c.lr = r.get<double>("lr", c.lr);
  c.beta1 = r.get<double>("beta1", c.beta1);
  c.beta2 = r.get<double>("beta2", c.beta2);
  c.eps = r.get<double>("eps", c.eps);
  c.weight_decay = r.get<double>("weight_decay", c.weight_decay);
  c.decay_matrices_only = r.get<bool>("decay_matrices_only", c.decay_matrices_only);
  r.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return c;
}

inline const char* to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::synthetic_copy: return "synthetic_copy";
    case DatasetKind::synthetic_modsum: return "synthetic_modsum";
    case DatasetKind::text_file: return "text_file";
  }
  return "?";
}

inline const char* to_string(VocabPolicy p) { return p == VocabPolicy::byte ? "byte" : "char"; }

inline json to_json(const DatasetDescriptor& d) {
  json j = {{"kind", to_string(d.kind)}, {"seq_len", d.seq_len}, {"seed", d.seed}};
  if (d.kind == DatasetKind::text_file) {
    j["path"] = d.path;
    j["vocab_policy"] = to_string(d.vocab_policy);
    j["validation_fraction"] = d.validation_fraction;
  } else {
    j["vocab_size"] = d.vocab_size;
    j["samples"] = d.samples;
  }
  return j;
}

inline DatasetDescriptor dataset_from_json(const json& j, const std::string& path) {
  FieldReader r(j, path);
  DatasetDescriptor d;
  d.kind = parse_enum<DatasetKind>(r.require<std::string>("kind"), r.field("kind"),
                                   {{"synthetic_copy", DatasetKind::synthetic_copy},
                                    {"synthetic_modsum", DatasetKind::synthetic_modsum},
                                    {"text_file", DatasetKind::text_file}});
  d.seq_len = r.get<std::size_t>("seq_len", d.seq_len);
  d.seed = r.get<std::uint64_t>("seed", d.seed);
  if (d.kind == DatasetKind::text_file) {
    d.path = r.require<std::string>("path");
    d.vocab_policy = parse_enum<VocabPolicy>(r.get<std::string>("vocab_policy", "byte"), r.field("vocab_policy"),
                                             {{"byte", VocabPolicy::byte}, {"char", VocabPolicy::character}});
    d.validation_fraction = r.get<double>("validation_fraction", d.validation_fraction);
  } else {
    d.vocab_size = r.get<std::size_t>("vocab_size", d.vocab_size);
    d.samples = r.get<std::size_t>("samples", d.samples);
  }
  r.finish();
  return d;
}

inline json to_json(const ScheduleConfig& s) {
  json j = {{"mode", to_string(s.mode)},
            {"gamma", s.gamma},
            {"period", s.period},
            {"always_active", s.always_active},
            {"moment_policy", to_string(s.moment_policy)}};
  if (s.seed) j["seed"] = *s.seed;
  if (!s.probabilities.empty()) j["probabilities"] = s.probabilities;
  return j;
}

inline ScheduleConfig schedule_config_from_json(const json& j, const std::string& path) {
  FieldReader r(j, path);
  ScheduleConfig s;
  s.mode = parse_enum<SampleMode>(r.get<std::string>("mode", "fixed_gamma"), r.field("mode"),
                                  {{"fixed_gamma", SampleMode::fixed_gamma}, {"bernoulli", SampleMode::bernoulli}});
  s.gamma = r.get<std::size_t>("gamma", s.gamma);
  s.period = r.get<std::size_t>("period", s.period);
  if (r.has("seed")) s.seed = r.require<std::uint64_t>("seed");
  s.always_active = r.get<std::vector<std::size_t>>("always_active", {});
  s.probabilities = r.get<std::vector<double>>("probabilities", {});
  s.moment_policy = parse_enum<MomentPolicy>(r.get<std::string>("moment_policy", "discard"), r.field("moment_policy"),
                                             {{"discard", MomentPolicy::discard}, {"retain", MomentPolicy::retain}});
  r.finish();
  if (s.period < 1) throw ConfigError(r.field("period") + ": must be at least 1");
  if (!s.probabilities.empty() && s.mode != SampleMode::bernoulli) {
    throw ConfigError(r.field("probabilities") + ": only valid with mode bernoulli");
  }
  return s;
}

// ---------------------------------------------------------------------------
// Run config

inline json to_json(const RunConfig& c) {
  json j = {{"schema_version", c.schema_version},
            {"method", to_string(c.method)},
            {"model", c.model_preset.empty() ? to_json(c.model) : json(c.model_preset)},
            {"data", to_json(c.data)},
            {"optimizer", to_json(c.optimizer)},
            {"steps", c.steps},
            {"batch_size", c.batch_size},
            {"seed", c.seed},
            {"output", c.output},
            {"norm_cadence", c.norm_cadence == NormCadence::every_step ? "step" : "period"},
            {"memory_bytes_per_param", c.memory_bytes_per_param}};
  if (c.lora) j["lora"] = to_json(*c.lora);
  if (c.schedule) j["schedule"] = to_json(*c.schedule);
  return j;
}

inline RunConfig run_config_from_json(const json& j) {
  FieldReader r(j, "");
  RunConfig c;
  if (!r.has("schema_version")) throw ConfigError("/schema_version: missing required field");
  c.schema_version = r.require<int>("schema_version");
  if (c.schema_version != kSchemaVersion) {
    throw ConfigError("/schema_version: unsupported version " + std::to_string(c.schema_version) + " (expected " +
                      std::to_string(kSchemaVersion) + ")");
  }
  c.method = parse_enum<Method>(r.require<std::string>("method"), "/method",
                                {{"full", Method::full}, {"lora", Method::lora}, {"lisa", Method::lisa}});
  if (r.has("model")) {
    const json& m = r.sub("model");
    if (m.is_string()) {
      c.model_preset = m.get<std::string>();
      if (c.model_preset != "desk") throw ConfigError("/model: unknown preset '" + c.model_preset + "'");
      c.model = ModelConfig::desk(0, 0);
    } else {
      c.model = model_config_from_json(m, "/model");
    }
  } else {
    c.model_preset = "desk";
    c.model = ModelConfig::desk(0, 0);
  }
  c.data = dataset_from_json(r.sub("data"), "/data");
  if (r.has("optimizer")) c.optimizer = adamw_config_from_json(r.sub("optimizer"), "/optimizer");
  if (r.has("lora")) c.lora = lora_config_from_json(r.sub("lora"), "/lora");
  if (r.has("schedule")) c.schedule = schedule_config_from_json(r.sub("schedule"), "/schedule");
  c.steps = r.get<std::size_t>("steps", c.steps);
  c.batch_size = r.get<std::size_t>("batch_size", c.batch_size);
  c.seed = r.get<std::uint64_t>("seed", c.seed);
  c.output = r.get<std::string>("output", c.output);
  c.norm_cadence = parse_enum<NormCadence>(r.get<std::string>("norm_cadence", "step"), "/norm_cadence",
                                           {{"step", NormCadence::every_step}, {"period", NormCadence::every_period}});
  c.memory_bytes_per_param = r.get<std::size_t>("memory_bytes_per_param", c.memory_bytes_per_param);
  r.finish();

  if (c.steps < 1) throw ConfigError("/steps: must be at least 1");
  if (c.batch_size < 1) throw ConfigError("/batch_size: must be at least 1");
  if (c.method == Method::lora && !c.lora) throw ConfigError("/lora: required when method is lora");
  if (c.method != Method::lora && c.lora) throw ConfigError("/lora: only valid when method is lora");
  if (c.method == Method::lisa && !c.schedule) throw ConfigError("/schedule: required when method is lisa");
  if (c.method != Method::lisa && c.schedule) throw ConfigError("/schedule: only valid when method is lisa");
  Precision::for_bytes_per_param(c.memory_bytes_per_param);
  return c;
}

// Parses JSON text, reporting syntax errors by line and column.
inline json parse_json_text(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError(source + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + e.what());
  }
}

inline RunConfig load_run_config(const std::string& path) {
  const json j = parse_json_text(read_file(path), path);
  RunConfig c;
  try {
    c = run_config_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  // Text paths are relative to the config file.
  if (c.data.kind == DatasetKind::text_file && std::filesystem::path(c.data.path).is_relative()) {
    c.data.path = (std::filesystem::path(path).parent_path() / c.data.path).lexically_normal().string();
  }
  return c;
}

// Final model shape: zero vocab/seq follow the dataset.
inline ModelConfig resolve_model(const RunConfig& c, const Dataset& data) {
  ModelConfig m = c.model;
  const std::size_t seq = data.train.front().input.size();
  if (m.vocab_size == 0) m.vocab_size = data.vocab_size;
  if (m.max_seq_len == 0) m.max_seq_len = seq;
  if (m.vocab_size < data.vocab_size) {
    throw ConfigError("/model/vocab_size: " + std::to_string(m.vocab_size) + " is smaller than the data vocabulary " +
                      std::to_string(data.vocab_size));
  }
  if (m.max_seq_len < seq) {
    throw ConfigError("/model/max_seq_len: " + std::to_string(m.max_seq_len) + " is shorter than sequences of " +
                      std::to_string(seq));
  }
  m.validate();
  return m;
}

}  // namespace lisa
