#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include <gtest/gtest.h>

#include "lisa/lisa.hpp"

namespace testutil {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = fs::temp_directory_path() /
            ("lisa_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }
  std::string str() const { return path_.string(); }

 private:
  fs::path path_;
};

inline lisa::Tensor random_tensor(lisa::Shape shape, std::mt19937_64& gen, double scale = 1.0,
                                  bool requires_grad = true) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(lisa::shape_numel(shape));
  for (double& x : v) x = d(gen);
  return lisa::Tensor(std::move(shape), std::move(v), requires_grad);
}

// Compares tape gradients of a scalar function against central differences
// on every input element. Returns the largest error measured as
// |a - n| / max(1, |a|, |n|).
inline double max_fd_error(std::vector<lisa::Tensor>& inputs,
                           const std::function<lisa::Tensor(lisa::Tape&)>& f, double h = 1e-6) {
  for (auto& t : inputs) t.clear_grad();
  lisa::Tape tape;
  lisa::Tensor out = f(tape);
  tape.backward(out);
  double worst = 0.0;
  for (auto& t : inputs) {
    // An input the function never touches has no gradient buffer.
    std::vector<double> analytic(t.numel(), 0.0);
    std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double saved = t.data()[i];
      lisa::Tape tp;
      t.data()[i] = saved + h;
      const double up = f(tp).item();
      lisa::Tape tm;
      t.data()[i] = saved - h;
      const double down = f(tm).item();
      t.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

inline lisa::Dataset copy_data(std::size_t vocab = 16, std::size_t seq = 16, std::size_t samples = 256,
                               std::uint64_t seed = 7) {
  lisa::DatasetDescriptor d;
  d.kind = lisa::DatasetKind::synthetic_copy;
  d.vocab_size = vocab;
  d.seq_len = seq;
  d.samples = samples;
  d.seed = seed;
  return lisa::make_dataset(d);
}

inline lisa::ModelConfig tiny_config(std::size_t vocab = 8, std::size_t seq = 6) {
  return {.vocab_size = vocab, .max_seq_len = seq, .model_dim = 8, .num_heads = 2, .num_blocks = 2};
}

inline lisa::RunConfig desk_run(lisa::Method method, std::size_t steps, const std::string& output) {
  lisa::RunConfig c;
  c.method = method;
  c.model = lisa::ModelConfig::desk(0, 0);  // vocab and length follow the data
  c.model.model_dim = 16;
  c.model.num_heads = 2;
  c.data.kind = lisa::DatasetKind::synthetic_copy;
  c.data.vocab_size = 8;
  c.data.seq_len = 8;
  c.data.samples = 64;
  c.data.seed = 3;
  c.steps = steps;
  c.batch_size = 4;
  c.seed = 11;
  c.output = output;
  if (method == lisa::Method::lisa) c.schedule = lisa::ScheduleConfig{};
  if (method == lisa::Method::lora) c.lora = lisa::LoraConfig{.rank = 2, .alpha = 2.0, .include_head = true};
  return c;
}

}  // namespace testutil
