#pragma once

// Training data: two synthetic tasks and byte/char-level text files.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lisa/errors.hpp"
#include "lisa/model.hpp"
#include "lisa/tensor.hpp"

namespace lisa {

enum class DatasetKind { synthetic_copy, synthetic_modsum, text_file };
enum class VocabPolicy { byte, character };

struct DatasetDescriptor {
  DatasetKind kind = DatasetKind::synthetic_copy;
  std::size_t vocab_size = 16;  // synthetic tasks; text files derive it
  std::size_t seq_len = 16;     // model input length
  std::size_t samples = 512;    // synthetic tasks
  std::uint64_t seed = 0;
  std::string path;             // text_file
  VocabPolicy vocab_policy = VocabPolicy::byte;
  double validation_fraction = 0.1;

  bool operator==(const DatasetDescriptor&) const = default;
};

struct Sample {
  std::vector<std::int32_t> input;
  std::vector<std::int32_t> target;  // kIgnoreTarget where unscored
};

struct Dataset {
  DatasetDescriptor descriptor;
  std::size_t vocab_size = 0;
  std::vector<Sample> train;
  std::vector<Sample> validation;
  std::vector<std::string> symbols;  // text_file only: token id -> symbol
};

// Copy task. Each sequence is m random content tokens, a separator, then the
// same m tokens again; the model sees 2m inputs and is scored on the
// separator and the copied half (position t predicts token t-m).
// Token vocab_size-1 is the separator.
inline Dataset make_copy_task(const DatasetDescriptor& d) {
  if (d.vocab_size < 3) throw ConfigError("data: copy task needs vocab_size >= 3");
  if (d.seq_len < 2 || d.seq_len % 2 != 0) throw ConfigError("data: copy task needs an even seq_len >= 2");
  if (d.samples == 0) throw ConfigError("data: samples must be positive");
  const std::size_t m = d.seq_len / 2;
  const auto sep = static_cast<std::int32_t>(d.vocab_size - 1);
  std::mt19937_64 gen(d.seed);
  std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(d.vocab_size) - 2);
  Dataset ds{d, d.vocab_size, {}, {}, {}};
  for (std::size_t n = 0; n < d.samples; ++n) {
    std::vector<std::int32_t> full(2 * m + 1);
    for (std::size_t i = 0; i < m; ++i) full[i] = tok(gen);
    full[m] = sep;
    for (std::size_t i = 0; i < m; ++i) full[m + 1 + i] = full[i];
    Sample s;
    s.input.assign(full.begin(), full.end() - 1);
    s.target.assign(full.begin() + 1, full.end());
    for (std::size_t t = 0; t + 1 < m; ++t) s.target[t] = ops::kIgnoreTarget;
    ds.train.push_back(std::move(s));
  }
  return ds;
}

// Modular sum. Sequence a1 + a2 + ... + ak = over digits mod p, where
// p = vocab_size - 2, '+' = p and '=' = p+1. Only the last position is
// scored, against (a1 + ... + ak) mod p.
inline Dataset make_modsum_task(const DatasetDescriptor& d) {
  if (d.vocab_size < 4) throw ConfigError("data: modsum task needs vocab_size >= 4");
  if (d.seq_len < 4 || d.seq_len % 2 != 0) throw ConfigError("data: modsum task needs an even seq_len >= 4");
  if (d.samples == 0) throw ConfigError("data: samples must be positive");
  const auto p = static_cast<std::int32_t>(d.vocab_size - 2);
  const std::size_t k = d.seq_len / 2;
  std::mt19937_64 gen(d.seed);
  std::uniform_int_distribution<std::int32_t> digit(0, p - 1);
  Dataset ds{d, d.vocab_size, {}, {}, {}};
  for (std::size_t n = 0; n < d.samples; ++n) {
    Sample s;
    std::int32_t total = 0;
    for (std::size_t i = 0; i < k; ++i) {
      const std::int32_t a = digit(gen);
      total = (total + a) % p;
      s.input.push_back(a);
      s.input.push_back(i + 1 < k ? p : p + 1);
    }
    s.target.assign(s.input.size(), ops::kIgnoreTarget);
    s.target.back() = total;
    ds.train.push_back(std::move(s));
  }
  return ds;
}

namespace detail {

inline std::vector<std::string> split_symbols(const std::string& text, VocabPolicy policy) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < text.size();) {
    std::size_t len = 1;
    if (policy == VocabPolicy::character) {
      const auto c = static_cast<unsigned char>(text[i]);
      if (c >= 0xF0) len = 4;
      else if (c >= 0xE0) len = 3;
      else if (c >= 0xC0) len = 2;
      len = std::min(len, text.size() - i);
    }
    out.push_back(text.substr(i, len));
    i += len;
  }
  return out;
}

}  // namespace detail

struct TextCorpus {
  std::vector<std::string> symbols;   // sorted; id = position
  std::vector<std::int32_t> stream;
  std::size_t train_chunks = 0;
  std::size_t validation_chunks = 0;
};

// Reads a text file into a deterministic byte- or character-level token
// stream. The vocabulary is the sorted set of distinct symbols; no special
// tokens are added.
inline TextCorpus ingest_text(const std::string& path, VocabPolicy policy) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open text file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  if (text.empty()) throw DataError("text file '" + path + "' is empty");

  auto pieces = detail::split_symbols(text, policy);
  std::map<std::string, std::int32_t> ids;
  for (const auto& s : pieces) ids.emplace(s, 0);
  TextCorpus corpus;
  for (auto& [sym, id] : ids) {
    id = static_cast<std::int32_t>(corpus.symbols.size());
    corpus.symbols.push_back(sym);
  }
  corpus.stream.reserve(pieces.size());
  for (const auto& s : pieces) corpus.stream.push_back(ids.at(s));
  return corpus;
}

// Chunks the stream into windows of seq_len+1 tokens (stride seq_len) and
// splits them into train/validation after a seeded shuffle.
inline Dataset make_text_dataset(const DatasetDescriptor& d) {
  if (d.seq_len < 1) throw ConfigError("data: seq_len must be positive");
  if (!(d.validation_fraction >= 0.0 && d.validation_fraction < 1.0)) {
    throw ConfigError("data: validation_fraction must lie in [0, 1)");
  }
  TextCorpus corpus = ingest_text(d.path, d.vocab_policy);
  if (corpus.stream.size() < d.seq_len + 1) {
    throw DataError("text file '" + d.path + "' is shorter than one sequence of " + std::to_string(d.seq_len + 1) +
                    " tokens");
  }
  std::vector<Sample> chunks;
  for (std::size_t start = 0; start + d.seq_len + 1 <= corpus.stream.size(); start += d.seq_len) {
    Sample s;
    s.input.assign(corpus.stream.begin() + start, corpus.stream.begin() + start + d.seq_len);
    s.target.assign(corpus.stream.begin() + start + 1, corpus.stream.begin() + start + d.seq_len + 1);
    chunks.push_back(std::move(s));
  }
  std::vector<std::size_t> order(chunks.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), std::mt19937_64(d.seed));
  auto n_val = static_cast<std::size_t>(d.validation_fraction * static_cast<double>(chunks.size()));
  if (n_val >= chunks.size()) n_val = chunks.size() - 1;

  Dataset ds{d, corpus.symbols.size(), {}, {}, corpus.symbols};
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_val ? ds.validation : ds.train).push_back(std::move(chunks[order[i]]));
  }
  return ds;
}

inline Dataset make_dataset(const DatasetDescriptor& d) {
  switch (d.kind) {
    case DatasetKind::synthetic_copy: return make_copy_task(d);
    case DatasetKind::synthetic_modsum: return make_modsum_task(d);
    case DatasetKind::text_file: return make_text_dataset(d);
  }
  throw ConfigError("data: unknown dataset kind");
}

// Deterministic minibatch order: epoch e visits the training samples in a
// permutation seeded by (seed, e). batch(step) is a pure function of step.
class BatchStream {
 public:
  BatchStream(const Dataset& data, std::size_t batch_size, std::uint64_t seed)
      : data_(&data), batch_size_(batch_size), seed_(seed) {
    if (data.train.empty()) throw DataError("dataset has no training samples");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
  }

  TokenBatch batch(std::size_t step) {
    const auto& train = data_->train;
    const std::size_t seq = train.front().input.size();
    TokenBatch out{batch_size_, seq, {}, {}};
    out.tokens.reserve(batch_size_ * seq);
    out.targets.reserve(batch_size_ * seq);
    for (std::size_t j = 0; j < batch_size_; ++j) {
      const std::size_t pos = step * batch_size_ + j;
      const auto& s = train[permutation(pos / train.size())[pos % train.size()]];
      out.tokens.insert(out.tokens.end(), s.input.begin(), s.input.end());
      out.targets.insert(out.targets.end(), s.target.begin(), s.target.end());
    }
    return out;
  }

 private:
  const std::vector<std::size_t>& permutation(std::size_t epoch) {
    if (epoch != epoch_ || perm_.empty()) {
      perm_.resize(data_->train.size());
      std::iota(perm_.begin(), perm_.end(), 0);
      std::shuffle(perm_.begin(), perm_.end(), std::mt19937_64(seed_ * 0x9E3779B97F4A7C15ull + epoch));
      epoch_ = epoch;
    }
    return perm_;
  }

  const Dataset* data_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::vector<std::size_t> perm_;
};

}  // namespace lisa
