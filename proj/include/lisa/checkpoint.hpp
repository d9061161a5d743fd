#pragma once

// Checkpoint archive, little-endian:
//
//   "LISACKPT"                 8-byte magic
//   u32 version                currently 1
//   u64 n, n bytes             JSON header: {"model": ModelConfig, "lora": LoraConfig|null, "optimizer": AdamWConfig|null}
//   u64 count                  number of records
//   record*                    u32 name length, name, u8 kind, payload
//     kind 0 (f64 array)       u32 rank, u64 dims[rank], f64 values[prod(dims)]
//     kind 1 (u64 scalar)      u64 value
//
// Parameters are named as in the model ("block.1.attn.q.weight"); adapter
// factors live under "lora/". Optimizer state is stored as "optim/<param>.m",
// "optim/<param>.v" and "optim/<param>.step". Records are written in model
// order, so save(load(f)) reproduces f byte for byte.

#include <bit>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lisa/config.hpp"
#include "lisa/errors.hpp"
#include "lisa/lora.hpp"
#include "lisa/model.hpp"
#include "lisa/optim.hpp"
#include "lisa/sha256.hpp"

namespace lisa {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'L', 'I', 'S', 'A', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TransformerModel model;
  std::optional<LoraConfig> lora;
  std::optional<AdamW> optimizer;
};

namespace detail {

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    bytes_.append(buf, sizeof(T));
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes_ += s;
  }
  void put_raw(const void* p, std::size_t n) { bytes_.append(static_cast<const char*>(p), n); }
  std::string& bytes() { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_string() { return get_bytes(get<std::uint32_t>()); }
  void get_raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError(source_ + ": truncated checkpoint");
  }
  const std::string& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline void put_array(ByteWriter& w, const std::string& name, const Shape& shape, std::span<const double> values) {
  w.put_string(name);
  w.put<std::uint8_t>(0);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) w.put<std::uint64_t>(d);
  w.put_raw(values.data(), values.size() * sizeof(double));
}

inline void put_scalar(ByteWriter& w, const std::string& name, std::uint64_t value) {
  w.put_string(name);
  w.put<std::uint8_t>(1);
  w.put<std::uint64_t>(value);
}

inline std::vector<const Param*> all_params(const TransformerModel& model) {
  std::vector<const Param*> out;
  for (const auto& g : model.groups())
    for (const auto& p : g.params) out.push_back(&p);
  for (const auto& g : model.adapter_groups())
    for (const auto& p : g.params) out.push_back(&p);
  return out;
}

inline std::vector<Param*> all_params(TransformerModel& model) {
  std::vector<Param*> out;
  for (auto& g : model.groups())
    for (auto& p : g.params) out.push_back(&p);
  for (auto& g : model.adapter_groups())
    for (auto& p : g.params) out.push_back(&p);
  return out;
}

struct Record {
  std::uint8_t kind = 0;
  Shape shape;
  std::vector<double> values;
  std::uint64_t scalar = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const TransformerModel& model, const std::optional<LoraConfig>& lora,
                                        const AdamW* optimizer) {
  if (model.has_adapters() && !lora) throw ContractError("checkpoint: model has adapters but no LoRA config given");
  json header = {{"model", to_json(model.config())},
                 {"lora", lora && model.has_adapters() ? to_json(*lora) : json(nullptr)},
                 {"optimizer", optimizer ? to_json(optimizer->config()) : json(nullptr)}};
  detail::ByteWriter w;
  w.put_raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  const std::string h = header.dump();
  w.put<std::uint64_t>(h.size());
  w.put_raw(h.data(), h.size());

  const auto params = detail::all_params(model);
  std::uint64_t count = params.size();
  if (optimizer) {
    for (const Param* p : params)
      if (optimizer->state_of(p->tensor)) count += 3;
  }
  w.put<std::uint64_t>(count);
  for (const Param* p : params) detail::put_array(w, p->name, p->tensor.shape(), p->tensor.data());
  if (optimizer) {
    for (const Param* p : params) {
      const MomentBuffers* st = optimizer->state_of(p->tensor);
      if (!st) continue;
      detail::put_array(w, "optim/" + p->name + ".m", p->tensor.shape(), st->m);
      detail::put_array(w, "optim/" + p->name + ".v", p->tensor.shape(), st->v);
      detail::put_scalar(w, "optim/" + p->name + ".step", st->step);
    }
  }
  return std::move(w.bytes());
}

inline void save_checkpoint(const std::string& path, const TransformerModel& model,
                            const std::optional<LoraConfig>& lora = std::nullopt, const AdamW* optimizer = nullptr) {
  write_file(path, serialize_checkpoint(model, lora, optimizer));
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& source = "checkpoint") {
  detail::ByteReader r(bytes, source);
  if (r.get_bytes(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw DataError(source + ": not a LISA checkpoint");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError(source + ": unsupported checkpoint version " + std::to_string(version));
  }
  json header;
  try {
    header = json::parse(r.get_bytes(r.get<std::uint64_t>()));
  } catch (const json::exception& e) {
    throw DataError(source + ": bad header: " + e.what());
  }

  std::map<std::string, detail::Record> records;
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.get_string();
    detail::Record rec;
    rec.kind = r.get<std::uint8_t>();
    if (rec.kind == 0) {
      const auto rank = r.get<std::uint32_t>();
      for (std::uint32_t d = 0; d < rank; ++d) rec.shape.push_back(r.get<std::uint64_t>());
      rec.values.resize(shape_numel(rec.shape));
      r.get_raw(rec.values.data(), rec.values.size() * sizeof(double));
    } else if (rec.kind == 1) {
      rec.scalar = r.get<std::uint64_t>();
    } else {
      throw DataError(source + ": record '" + name + "' has unknown kind " + std::to_string(rec.kind));
    }
    if (!records.emplace(name, std::move(rec)).second) throw DataError(source + ": duplicate record '" + name + "'");
  }
  if (!r.done()) throw DataError(source + ": trailing bytes after last record");

  const ModelConfig cfg = model_config_from_json(header.at("model"), "/model");
  Checkpoint ck{TransformerModel::build(cfg, 0), std::nullopt, std::nullopt};
  if (!header.at("lora").is_null()) {
    ck.lora = lora_config_from_json(header.at("lora"), "/lora");
    attach_adapters(ck.model, *ck.lora, 0);
  }
  if (!header.at("optimizer").is_null()) ck.optimizer.emplace(adamw_config_from_json(header.at("optimizer"), "/optimizer"));

  std::size_t used = 0;
  auto take_array = [&](const std::string& name, const Shape& shape) -> const detail::Record& {
    auto it = records.find(name);
    if (it == records.end() || it->second.kind != 0) throw DataError(source + ": missing array '" + name + "'");
    if (it->second.shape != shape) {
      throw ShapeError(source + ": '" + name + "' has shape " + shape_str(it->second.shape) + ", model expects " +
                       shape_str(shape));
    }
    ++used;
    return it->second;
  };
  for (Param* p : detail::all_params(ck.model)) {
    const auto& rec = take_array(p->name, p->tensor.shape());
    std::copy(rec.values.begin(), rec.values.end(), p->tensor.data().begin());
  }
  for (const Param* p : detail::all_params(ck.model)) {
    auto it = records.find("optim/" + p->name + ".step");
    if (it == records.end()) continue;
    if (!ck.optimizer) throw DataError(source + ": optimizer state without optimizer config");
    MomentBuffers st;
    st.step = it->second.scalar;
    ++used;
    st.m = take_array("optim/" + p->name + ".m", p->tensor.shape()).values;
    st.v = take_array("optim/" + p->name + ".v", p->tensor.shape()).values;
    ck.optimizer->set_state(p->tensor, std::move(st));
  }
  if (used != records.size()) {
    for (const auto& [name, rec] : records) {
      bool known = false;
      for (const Param* p : detail::all_params(ck.model)) {
        known = known || name == p->name || name.starts_with("optim/" + p->name + ".");
      }
      if (!known) throw DataError(source + ": unknown record '" + name + "'");
    }
    throw DataError(source + ": incomplete optimizer state");
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path), path); }

}  // namespace lisa
