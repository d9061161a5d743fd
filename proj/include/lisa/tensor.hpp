#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle: copying it aliases the same storage, which is
// what lets a model, its layer groups and the optimizer all refer to one
// parameter. Use clone() for an independent copy.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lisa/errors.hpp"

namespace lisa {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

struct TensorStorage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : s_(std::make_shared<TensorStorage>()) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    s_->shape = std::move(shape);
    s_->data = std::move(data);
    s_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0, requires_grad);
  }

  static Tensor filled(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> data(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t numel() const { return s_->data.size(); }

  std::span<double> data() { return s_->data; }
  std::span<const double> data() const { return s_->data; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool value) { s_->requires_grad = value; }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const double> grad() const { return s_->grad; }
  std::span<double> grad() { return s_->grad; }

  // Gradient storage, allocated as zeros on first use.
  // The handle is shallow: gradient buffers are mutable through a const Tensor.
  std::span<double> grad_buffer() const {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), 0.0);
    return s_->grad;
  }
  void zero_grad() const { std::fill(s_->grad.begin(), s_->grad.end(), 0.0); }
  void clear_grad() const {
    s_->grad.clear();
    s_->grad.shrink_to_fit();
  }

  Tensor clone() const {
    return Tensor(s_->shape, s_->data, s_->requires_grad);
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  const TensorStorage* id() const { return s_.get(); }

 private:
  std::shared_ptr<TensorStorage> s_;
};

inline bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(),
                     [](double x) { return std::isfinite(x); });
}

// Ordered record of the operations of one forward pass. backward() replays it
// in reverse. Clear it between optimizer steps.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> out_grad)>;

  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }
  std::size_t visits_last_backward() const { return visits_; }

  bool needs_grad(std::initializer_list<const Tensor*> inputs) const {
    if (!recording_) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) {
      return t != nullptr && t->defined() && t->requires_grad();
    });
  }

  void record(const char* op, Tensor output, std::vector<Tensor> inputs, BackwardFn fn) {
    output.set_requires_grad(true);
    nodes_.push_back({op, std::move(output), std::move(inputs), std::move(fn)});
  }

  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward() needs a scalar loss");
    }
    std::size_t end = nodes_.size();
    while (end > 0 && !nodes_[end - 1].output.same_storage(loss)) --end;
    if (end == 0) throw ContractError("loss was not produced by operations on this tape");

    // Intermediates are owned by the tape; a repeated backward starts them from zero.
    std::unordered_set<const TensorStorage*> produced;
    for (auto& node : nodes_) {
      produced.insert(node.output.id());
      node.output.clear_grad();
    }
    Tensor seed = loss;
    seed.grad_buffer()[0] = 1.0;

    visits_ = 0;
    for (std::size_t i = end; i-- > 0;) {
      auto& node = nodes_[i];
      ++visits_;
      if (!node.output.has_grad()) continue;
      node.backward(std::as_const(node.output).grad());
    }

    for (const auto& node : nodes_) {
      for (const auto& in : node.inputs) {
        if (!in.defined() || produced.count(in.id()) || !in.has_grad()) continue;
        if (!all_finite(in.grad())) {
          throw NumericError(std::string("non-finite gradient flowing out of ") + node.op);
        }
      }
    }
  }

  void clear() {
    nodes_.clear();
    visits_ = 0;
  }

 private:
  struct Node {
    const char* op;
    Tensor output;
    std::vector<Tensor> inputs;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool recording_;
  std::size_t visits_ = 0;
};

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (!t.defined() || t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     " tensor, got " + (t.defined() ? shape_str(t.shape()) : "undefined"));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// Four packed doubles (GCC/Clang vector extension).
typedef double v4d __attribute__((vector_size(32)));

// C[M x N] += A[M x K] * B[K x N], all row-major with leading dimensions.
// Cache-blocked over N and K with a 4x8 register tile; the summation order
// is fixed, so results are reproducible run to run.
inline void gemm_acc(std::size_t M, std::size_t N, std::size_t K, const double* A, std::size_t lda,
                     const double* B, std::size_t ldb, double* C, std::size_t ldc) {
  constexpr std::size_t MR = 4, NR = 8, NC = 256, KC = 256;
  for (std::size_t jc = 0; jc < N; jc += NC) {
    const std::size_t nc = std::min(NC, N - jc);
    for (std::size_t pc = 0; pc < K; pc += KC) {
      const std::size_t kc = std::min(KC, K - pc);
      for (std::size_t i0 = 0; i0 < M; i0 += MR) {
        const std::size_t mr = std::min(MR, M - i0);
        for (std::size_t j0 = jc; j0 < jc + nc; j0 += NR) {
          const std::size_t nr = std::min(NR, jc + nc - j0);
          const double* a = A + i0 * lda + pc;
          const double* b = B + pc * ldb + j0;
          double* c = C + i0 * ldc + j0;
          if (mr == MR && nr == NR) {
            v4d acc[MR][2];
            for (std::size_t r = 0; r < MR; ++r) {
              std::memcpy(&acc[r][0], c + r * ldc, sizeof(v4d));
              std::memcpy(&acc[r][1], c + r * ldc + 4, sizeof(v4d));
            }
            for (std::size_t p = 0; p < kc; ++p) {
              v4d b0, b1;
              std::memcpy(&b0, b + p * ldb, sizeof(v4d));
              std::memcpy(&b1, b + p * ldb + 4, sizeof(v4d));
              for (std::size_t r = 0; r < MR; ++r) {
                const double ar = a[r * lda + p];
                acc[r][0] += ar * b0;
                acc[r][1] += ar * b1;
              }
            }
            for (std::size_t r = 0; r < MR; ++r) {
              std::memcpy(c + r * ldc, &acc[r][0], sizeof(v4d));
              std::memcpy(c + r * ldc + 4, &acc[r][1], sizeof(v4d));
            }
          } else {
            for (std::size_t r = 0; r < mr; ++r)
              for (std::size_t p = 0; p < kc; ++p) {
                const double ar = a[r * lda + p];
                for (std::size_t q = 0; q < nr; ++q) c[r * ldc + q] += ar * b[p * ldb + q];
              }
          }
        }
      }
    }
  }
}

// out[n x m] = in[m x n]^T
inline std::vector<double> transposed(const double* in, std::size_t m, std::size_t n) {
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
  return out;
}

// Row count when a tensor is viewed as [rows x last_dim].
inline std::size_t leading_rows(const Tensor& t) {
  return t.rank() == 0 ? 1 : t.numel() / t.shape().back();
}

}  // namespace detail

namespace ops {

// c[m x n] = a[m x k] * b[k x n]
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor c = Tensor::zeros({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t kk = 0; kk < k; ++kk) detail::axpy(pa[i * k + kk], pb + kk * n, pc + i * n, n);

  if (tape.needs_grad({&a, &b})) {
    tape.record("matmul", c, {a, b}, [a, b, m, k, n](std::span<const double> gc) mutable {
      if (a.requires_grad()) {
        double* ga = a.grad_buffer().data();
        const double* pb = b.data().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += gc[i * n + j] * pb[kk * n + j];
            ga[i * k + kk] += acc;
          }
      }
      if (b.requires_grad()) {
        double* gb = b.grad_buffer().data();
        const double* pa = a.data().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk)
            detail::axpy(pa[i * k + kk], gc.data() + i * n, gb + kk * n, n);
      }
    });
  }
  return c;
}

inline Tensor transpose(Tape& tape, const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor t = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t.data()[j * m + i] = a.data()[i * n + j];
  if (tape.needs_grad({&a})) {
    tape.record("transpose", t, {a}, [a, m, n](std::span<const double> g) mutable {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  }
  return t;
}

// y[m x n] = x[m x k] * W^T + bias, with W stored [n x k] (out x in).
inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias = {}) {
  detail::require_rank(x, 2, "linear");
  detail::require_rank(w, 2, "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(0);
  if (w.dim(1) != k) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != n)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " for " + std::to_string(n) +
                     " outputs");
  }
  Tensor y = Tensor::zeros({m, n});
  double* py = y.data().data();
  if (bias.defined()) {
    for (std::size_t i = 0; i < m; ++i) std::copy(bias.data().begin(), bias.data().end(), py + i * n);
  }
  const std::vector<double> wt = detail::transposed(w.data().data(), n, k);
  detail::gemm_acc(m, n, k, x.data().data(), k, wt.data(), n, py, n);

  if (tape.needs_grad({&x, &w, &bias})) {
    tape.record("linear", y, {x, w, bias}, [x, w, bias, m, k, n](std::span<const double> gy) mutable {
      if (x.requires_grad()) {
        // gx += gy * W
        detail::gemm_acc(m, k, n, gy.data(), n, w.data().data(), k, x.grad_buffer().data(), k);
      }
      if (w.requires_grad()) {
        // gW += gy^T * x
        const std::vector<double> gyt = detail::transposed(gy.data(), m, n);
        detail::gemm_acc(n, k, m, gyt.data(), m, x.data().data(), k, w.grad_buffer().data(), k);
      }
      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += gy[i * n + j];
      }
    });
  }
  return y;
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor c = a.clone();
  c.set_requires_grad(false);
  auto pc = c.data();
  auto pb = b.data();
  for (std::size_t i = 0; i < pc.size(); ++i) pc[i] += pb[i];
  if (tape.needs_grad({&a, &b})) {
    tape.record("add", c, {a, b}, [a, b](std::span<const double> g) mutable {
      if (a.requires_grad()) detail::axpy(1.0, g.data(), a.grad_buffer().data(), g.size());
      if (b.requires_grad()) detail::axpy(1.0, g.data(), b.grad_buffer().data(), g.size());
    });
  }
  return c;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor c = a.clone();
  c.set_requires_grad(false);
  auto pc = c.data();
  auto pb = b.data();
  for (std::size_t i = 0; i < pc.size(); ++i) pc[i] -= pb[i];
  if (tape.needs_grad({&a, &b})) {
    tape.record("sub", c, {a, b}, [a, b](std::span<const double> g) mutable {
      if (a.requires_grad()) detail::axpy(1.0, g.data(), a.grad_buffer().data(), g.size());
      if (b.requires_grad()) detail::axpy(-1.0, g.data(), b.grad_buffer().data(), g.size());
    });
  }
  return c;
}

// Elementwise product.
inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor c = Tensor::zeros(a.shape());
  auto pa = a.data();
  auto pb = b.data();
  auto pc = c.data();
  for (std::size_t i = 0; i < pc.size(); ++i) pc[i] = pa[i] * pb[i];
  if (tape.needs_grad({&a, &b})) {
    tape.record("mul", c, {a, b}, [a, b](std::span<const double> g) mutable {
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        auto pb = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        auto pa = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa[i];
      }
    });
  }
  return c;
}

inline Tensor scale(Tape& tape, const Tensor& a, double factor) {
  Tensor c = Tensor::zeros(a.shape());
  auto pa = a.data();
  auto pc = c.data();
  for (std::size_t i = 0; i < pc.size(); ++i) pc[i] = pa[i] * factor;
  if (tape.needs_grad({&a})) {
    tape.record("scale", c, {a}, [a, factor](std::span<const double> g) mutable {
      detail::axpy(factor, g.data(), a.grad_buffer().data(), g.size());
    });
  }
  return c;
}

inline Tensor sum(Tape& tape, const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  Tensor s = Tensor::scalar(total);
  if (tape.needs_grad({&a})) {
    tape.record("sum", s, {a}, [a](std::span<const double> g) mutable {
      for (double& x : a.grad_buffer()) x += g[0];
    });
  }
  return s;
}

// Softmax over the last dimension.
inline Tensor softmax_rows(Tape& tape, const Tensor& a) {
  if (!a.defined() || a.rank() == 0) throw ShapeError("softmax_rows: empty tensor");
  const std::size_t n = a.shape().back();
  const std::size_t rows = detail::leading_rows(a);
  Tensor y = Tensor::zeros(a.shape());
  auto pa = a.data();
  auto py = y.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = pa.data() + r * n;
    double* out = py.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[j] /= z;
  }
  if (tape.needs_grad({&a})) {
    tape.record("softmax_rows", y, {a}, [a, y, rows, n](std::span<const double> g) mutable {
      auto ga = a.grad_buffer();
      auto py = y.data();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * py[r * n + j];
        for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += py[r * n + j] * (g[r * n + j] - dot);
      }
    });
  }
  return y;
}

inline constexpr double kLayerNormEps = 1e-5;

// Per-row normalization followed by the affine gain/bias.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = kLayerNormEps) {
  detail::require_rank(x, 2, "layer_norm");
  const std::size_t m = x.dim(0), d = x.dim(1);
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layer_norm: affine parameters must have " + std::to_string(d) + " entries");
  }
  std::vector<double> xhat(m * d), rstd(m);
  Tensor y = Tensor::zeros({m, d});
  auto px = x.data();
  auto py = y.data();
  auto pg = gain.data();
  auto pb = bias.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = px.data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mean) * rstd[i];
      py[i * d + j] = xhat[i * d + j] * pg[j] + pb[j];
    }
  }
  if (tape.needs_grad({&x, &gain, &bias})) {
    tape.record("layer_norm", y, {x, gain, bias},
                [x, gain, bias, m, d, xhat = std::move(xhat), rstd = std::move(rstd)](
                    std::span<const double> g) mutable {
                  auto pg = gain.data();
                  if (gain.requires_grad()) {
                    auto gg = gain.grad_buffer();
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
                  }
                  if (bias.requires_grad()) {
                    auto gb = bias.grad_buffer();
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
                  }
                  if (x.requires_grad()) {
                    auto gx = x.grad_buffer();
                    const double inv_d = 1.0 / static_cast<double>(d);
                    for (std::size_t i = 0; i < m; ++i) {
                      double mean_dh = 0.0, mean_dh_xh = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dh = g[i * d + j] * pg[j];
                        mean_dh += dh;
                        mean_dh_xh += dh * xhat[i * d + j];
                      }
                      mean_dh *= inv_d;
                      mean_dh_xh *= inv_d;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dh = g[i * d + j] * pg[j];
                        gx[i * d + j] += rstd[i] * (dh - mean_dh - xhat[i * d + j] * mean_dh_xh);
                      }
                    }
                  }
                });
  }
  return y;
}

namespace detail_gelu {
inline constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kA = 0.044715;
}  // namespace detail_gelu

// tanh-approximated GELU, as used by GPT-2.
inline double gelu_value(double x) {
  using namespace detail_gelu;
  return 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
}

inline double gelu_derivative(double x) {
  using namespace detail_gelu;
  const double t = std::tanh(kC * (x + kA * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * x * x);
}

inline Tensor gelu(Tape& tape, const Tensor& x) {
  Tensor y = Tensor::zeros(x.shape());
  auto px = x.data();
  auto py = y.data();
  for (std::size_t i = 0; i < py.size(); ++i) py[i] = gelu_value(px[i]);
  if (tape.needs_grad({&x})) {
    tape.record("gelu", y, {x}, [x](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      auto px = x.data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * gelu_derivative(px[i]);
    });
  }
  return y;
}

// Rows of table[V x d] selected by index -> [n x d].
inline Tensor embedding_lookup(Tape& tape, const Tensor& table, std::span<const std::int32_t> indices) {
  detail::require_rank(table, 2, "embedding_lookup");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (auto idx : indices) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= vocab) {
      throw IndexError("embedding_lookup: index " + std::to_string(idx) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
  }
  Tensor y = Tensor::zeros({indices.size(), d});
  auto pt = table.data();
  auto py = y.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(pt.data() + static_cast<std::size_t>(indices[i]) * d, d, py.data() + i * d);
  }
  if (tape.needs_grad({&table})) {
    std::vector<std::int32_t> idx(indices.begin(), indices.end());
    tape.record("embedding_lookup", y, {table},
                [table, d, idx = std::move(idx)](std::span<const double> g) mutable {
                  double* gt = table.grad_buffer().data();
                  for (std::size_t i = 0; i < idx.size(); ++i)
                    detail::axpy(1.0, g.data() + i * d, gt + static_cast<std::size_t>(idx[i]) * d, d);
                });
  }
  return y;
}

inline constexpr std::int32_t kIgnoreTarget = -1;

// Mean negative log-likelihood over rows whose target is not kIgnoreTarget.
inline Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::int32_t> targets) {
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), classes = logits.dim(1);
  if (targets.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " rows");
  }
  std::size_t counted = 0;
  for (auto t : targets) {
    if (t == kIgnoreTarget) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw IndexError("cross_entropy: class index " + std::to_string(t) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
    ++counted;
  }
  if (counted == 0) throw ContractError("cross_entropy: every target is ignored");

  std::vector<double> probs(n * classes, 0.0);
  auto pl = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == kIgnoreTarget) continue;
    const double* row = pl.data() + i * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t j = 0; j < classes; ++j) z += (probs[i * classes + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < classes; ++j) probs[i * classes + j] /= z;
    total += std::log(z) + mx - row[targets[i]];
  }
  const double inv = 1.0 / static_cast<double>(counted);
  Tensor loss = Tensor::scalar(total * inv);
  if (tape.needs_grad({&logits})) {
    std::vector<std::int32_t> tgt(targets.begin(), targets.end());
    tape.record("cross_entropy", loss, {logits},
                [logits, classes, inv, probs = std::move(probs), tgt = std::move(tgt)](
                    std::span<const double> g) mutable {
                  auto gl = logits.grad_buffer();
                  const double s = g[0] * inv;
                  for (std::size_t i = 0; i < tgt.size(); ++i) {
                    if (tgt[i] == kIgnoreTarget) continue;
                    for (std::size_t j = 0; j < classes; ++j) gl[i * classes + j] += s * probs[i * classes + j];
                    gl[i * classes + static_cast<std::size_t>(tgt[i])] -= s;
                  }
                });
  }
  return loss;
}

// Multi-head causal self-attention. q, k, v are [batch*seq x dim] with heads
// laid out as contiguous dim/heads slices. Position t attends to positions
// <= t within its own sequence. If probs_out is given it receives the
// attention probabilities laid out [batch][head][t][s] (zeros above the
// diagonal).
inline Tensor causal_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                               std::size_t batch, std::size_t seq, std::size_t heads,
                               std::vector<double>* probs_out = nullptr) {
  detail::require_rank(q, 2, "causal_attention");
  detail::require_same_shape(q, k, "causal_attention");
  detail::require_same_shape(q, v, "causal_attention");
  const std::size_t dim = q.dim(1);
  if (q.dim(0) != batch * seq) throw ShapeError("causal_attention: rows != batch*seq");
  if (heads == 0 || dim % heads != 0) throw ShapeError("causal_attention: dim not divisible by heads");
  const std::size_t hd = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<double> probs(batch * heads * seq * seq, 0.0);
  Tensor out = Tensor::zeros({batch * seq, dim});
  auto pq = q.data();
  auto pk = k.data();
  auto pv = v.data();
  auto po = out.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < seq; ++t) {
        double* p = probs.data() + ((b * heads + h) * seq + t) * seq;
        const double* qt = pq.data() + (b * seq + t) * dim + h * hd;
        double mx = -INFINITY;
        for (std::size_t s = 0; s <= t; ++s) {
          const double* ks = pk.data() + (b * seq + s) * dim + h * hd;
          double dot = 0.0;
          for (std::size_t c = 0; c < hd; ++c) dot += qt[c] * ks[c];
          p[s] = dot * scale;
          mx = std::max(mx, p[s]);
        }
        double z = 0.0;
        for (std::size_t s = 0; s <= t; ++s) z += (p[s] = std::exp(p[s] - mx));
        double* ot = po.data() + (b * seq + t) * dim + h * hd;
        for (std::size_t s = 0; s <= t; ++s) {
          p[s] /= z;
          detail::axpy(p[s], pv.data() + (b * seq + s) * dim + h * hd, ot, hd);
        }
      }
  if (probs_out) *probs_out = probs;

  if (tape.needs_grad({&q, &k, &v})) {
    tape.record("causal_attention", out, {q, k, v},
                [q, k, v, batch, seq, heads, dim, hd, scale, probs = std::move(probs)](
                    std::span<const double> g) mutable {
                  auto pq = q.data();
                  auto pk = k.data();
                  auto pv = v.data();
                  std::vector<double> gq(q.numel(), 0.0), gk(k.numel(), 0.0), gv(v.numel(), 0.0);
                  std::vector<double> dp(seq);
                  for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t h = 0; h < heads; ++h)
                      for (std::size_t t = 0; t < seq; ++t) {
                        const double* p = probs.data() + ((b * heads + h) * seq + t) * seq;
                        const double* gt = g.data() + (b * seq + t) * dim + h * hd;
                        double weighted = 0.0;
                        for (std::size_t s = 0; s <= t; ++s) {
                          const std::size_t off = (b * seq + s) * dim + h * hd;
                          double dot = 0.0;
                          for (std::size_t c = 0; c < hd; ++c) dot += gt[c] * pv[off + c];
                          dp[s] = dot;
                          weighted += p[s] * dot;
                          detail::axpy(p[s], gt, gv.data() + off, hd);
                        }
                        const std::size_t qoff = (b * seq + t) * dim + h * hd;
                        for (std::size_t s = 0; s <= t; ++s) {
                          const double ds = p[s] * (dp[s] - weighted) * scale;
                          const std::size_t off = (b * seq + s) * dim + h * hd;
                          detail::axpy(ds, pk.data() + off, gq.data() + qoff, hd);
                          detail::axpy(ds, pq.data() + qoff, gk.data() + off, hd);
                        }
                      }
                  if (q.requires_grad()) detail::axpy(1.0, gq.data(), q.grad_buffer().data(), gq.size());
                  if (k.requires_grad()) detail::axpy(1.0, gk.data(), k.grad_buffer().data(), gk.size());
                  if (v.requires_grad()) detail::axpy(1.0, gv.data(), v.grad_buffer().data(), gv.size());
                });
  }
  return out;
}

}  // namespace ops
}  // namespace lisa
