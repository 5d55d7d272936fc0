#pragma once

// Dense 64-bit tensor core with define-by-run reverse-mode autodiff.
//
// Conventions:
//  - Tensors are shared handles to immutable-after-creation buffers; the only
//    sanctioned mutations are gradient accumulation during backward and
//    in-place parameter updates by the optimizer between forward passes.
//  - Ops record a backward closure on the active Tape (Tape::Scope) whenever
//    any input requires a gradient. The tape is rebuilt every forward pass and
//    may be consumed by backward() exactly once.
//  - Matrices are row-major [rows x cols]; a scalar has shape {1}.
//  - Every op checks its output for NaN/Inf and throws NumericError on
//    violation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "nestrq/common.hpp"

namespace nestrq {

namespace detail {

struct TensorData {
  std::vector<int> shape;
  std::vector<double> v;
  std::vector<double> g;  // empty until first touched in backward
  bool requires_grad = false;

  std::size_t size() const { return v.size(); }

  std::vector<double>& grad_buf() {
    if (g.empty()) g.assign(v.size(), 0.0);
    return g;
  }
};

inline std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto d = std::make_shared<detail::TensorData>();
    d->v.assign(detail::shape_numel(shape), 0.0);
    d->shape = std::move(shape);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
  }

  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.d_->v.begin(), t.d_->v.end(), value);
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<double> data,
                     bool requires_grad = false) {
    if (detail::shape_numel(shape) != data.size())
      throw ShapeError("data length does not match shape");
    auto d = std::make_shared<detail::TensorData>();
    d->shape = std::move(shape);
    d->v = std::move(data);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  bool defined() const { return d_ != nullptr; }
  const std::vector<int>& shape() const { return d_->shape; }
  std::size_t size() const { return d_->v.size(); }
  int rank() const { return static_cast<int>(d_->shape.size()); }

  int rows() const {
    require_matrix();
    return d_->shape[0];
  }
  int cols() const {
    require_matrix();
    return d_->shape[1];
  }

  double* data() { return d_->v.data(); }
  const double* data() const { return d_->v.data(); }
  std::vector<double>& values() { return d_->v; }
  const std::vector<double>& values() const { return d_->v; }

  double& at(int i, int j) { return d_->v[static_cast<std::size_t>(i) * cols() + j]; }
  double at(int i, int j) const { return d_->v[static_cast<std::size_t>(i) * cols() + j]; }
  double& at(int i) { return d_->v[static_cast<std::size_t>(i)]; }
  double at(int i) const { return d_->v[static_cast<std::size_t>(i)]; }

  double value() const {
    if (size() != 1) throw UsageError("value() on non-scalar tensor");
    return d_->v[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  bool has_grad() const { return !d_->g.empty(); }
  const std::vector<double>& grad() const {
    if (d_->g.empty()) throw UsageError("gradient not populated");
    return d_->g;
  }
  void zero_grad() { d_->g.clear(); }

  bool same_shape(const Tensor& o) const { return d_->shape == o.d_->shape; }

  std::shared_ptr<detail::TensorData> node() const { return d_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorData> d) : d_(std::move(d)) {}

  void require_matrix() const {
    if (!d_ || d_->shape.size() != 2) throw ShapeError("expected a rank-2 tensor");
  }

  std::shared_ptr<detail::TensorData> d_;

  friend class Tape;
  friend Tensor make_tensor(std::vector<int>, bool);
};

inline Tensor make_tensor(std::vector<int> shape, bool requires_grad) {
  return Tensor::zeros(std::move(shape), requires_grad);
}

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& current() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

  std::size_t num_ops() const { return ops_.size(); }
  bool consumed() const { return consumed_; }

  // Seeds d(loss)/d(loss) = 1 and runs recorded closures in reverse order.
  void backward(const Tensor& loss) {
    if (consumed_) throw UsageError("tape already consumed; re-record the forward pass");
    if (!loss.defined() || loss.size() != 1)
      throw UsageError("backward requires a scalar loss");
    loss.node()->grad_buf()[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    consumed_ = true;
  }

  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(current()) { current() = &t; }
    ~Scope() { current() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

 private:
  std::vector<std::function<void()>> ops_;
  bool consumed_ = false;
};

// Boolean matrix used for attention masks (true = position allowed).
struct BoolMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> m;

  static BoolMatrix filled(int r, int c, bool v) {
    BoolMatrix b;
    b.rows = r;
    b.cols = c;
    b.m.assign(static_cast<std::size_t>(r) * c, v ? 1 : 0);
    return b;
  }
  bool at(int i, int j) const { return m[static_cast<std::size_t>(i) * cols + j] != 0; }
  void set(int i, int j, bool v) { m[static_cast<std::size_t>(i) * cols + j] = v ? 1 : 0; }
};

enum class Padding { kSymmetric, kCausal };
enum class Reduction { kMean, kSum };

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
  for (double x : t.values())
    if (!std::isfinite(x)) throw NumericError(std::string(op) + " produced non-finite value");
}

inline bool grad_needed(std::initializer_list<const Tensor*> ins) {
  for (const Tensor* t : ins)
    if ((*t).requires_grad()) return true;
  return false;
}

inline Tensor op_output(std::vector<int> shape, std::initializer_list<const Tensor*> ins) {
  return Tensor::zeros(std::move(shape), grad_needed(ins));
}

inline void record_if_tracing(std::initializer_list<const Tensor*> ins,
                              std::function<void()> fn) {
  if (Tape::current() != nullptr && grad_needed(ins)) Tape::current()->record(std::move(fn));
}

inline double sigmoid_scalar(double x) {
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("add: shape mismatch");
  Tensor out = detail::op_output(a.shape(), {&a, &b});
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  detail::check_finite(out, "add");
  detail::record_if_tracing({&a, &b}, [an = a.node(), bn = b.node(), on = out.node()] {
    const auto& go = on->grad_buf();
    if (an->requires_grad) {
      auto& ga = an->grad_buf();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (bn->requires_grad) {
      auto& gb = bn->grad_buf();
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
    }
  });
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("sub: shape mismatch");
  Tensor out = detail::op_output(a.shape(), {&a, &b});
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  detail::check_finite(out, "sub");
  detail::record_if_tracing({&a, &b}, [an = a.node(), bn = b.node(), on = out.node()] {
    const auto& go = on->grad_buf();
    if (an->requires_grad) {
      auto& ga = an->grad_buf();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (bn->requires_grad) {
      auto& gb = bn->grad_buf();
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
    }
  });
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("mul: shape mismatch");
  Tensor out = detail::op_output(a.shape(), {&a, &b});
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  detail::check_finite(out, "mul");
  detail::record_if_tracing({&a, &b}, [an = a.node(), bn = b.node(), on = out.node()] {
    const auto& go = on->grad_buf();
    if (an->requires_grad) {
      auto& ga = an->grad_buf();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bn->v[i];
    }
    if (bn->requires_grad) {
      auto& gb = bn->grad_buf();
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * an->v[i];
    }
  });
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor out = detail::op_output(a.shape(), {&a});
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * s;
  detail::check_finite(out, "scale");
  detail::record_if_tracing({&a}, [an = a.node(), on = out.node(), s] {
    const auto& go = on->grad_buf();
    auto& ga = an->grad_buf();
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * s;
  });
  return out;
}

// True division rather than multiply-by-reciprocal: loss means must be
// bit-equal to reference implementations that write sum / count.
inline Tensor div_scalar(const Tensor& a, double s) {
  if (s == 0.0) throw DomainError("div_scalar: division by zero");
  Tensor out = detail::op_output(a.shape(), {&a});
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] / s;
  detail::check_finite(out, "div_scalar");
  detail::record_if_tracing({&a}, [an = a.node(), on = out.node(), s] {
    const auto& go = on->grad_buf();
    auto& ga = an->grad_buf();
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / s;
  });
  return out;
}

// a [R x C] + bias broadcast over rows; bias shape {C} or {1, C}.
inline Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
  const int R = a.rows(), C = a.cols();
  const bool ok = (bias.rank() == 1 && bias.shape()[0] == C) ||
                  (bias.rank() == 2 && bias.shape()[0] == 1 && bias.shape()[1] == C);
  if (!ok) throw ShapeError("add_rowvec: bias shape mismatch");
  Tensor out = detail::op_output(a.shape(), {&a, &bias});
  for (int i = 0; i < R; ++i)
    for (int j = 0; j < C; ++j) out.at(i, j) = a.at(i, j) + bias.data()[j];
  detail::check_finite(out, "add_rowvec");
  detail::record_if_tracing({&a, &bias}, [an = a.node(), bn = bias.node(), on = out.node(), R, C] {
    const auto& go = on->grad_buf();
    if (an->requires_grad) {
      auto& ga = an->grad_buf();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (bn->requires_grad) {
      auto& gb = bn->grad_buf();
      for (int i = 0; i < R; ++i)
        for (int j = 0; j < C; ++j) gb[static_cast<std::size_t>(j)] += go[static_cast<std::size_t>(i) * C + j];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const int M = a.rows(), K = a.cols();
  if (b.rows() != K) throw ShapeError("matmul: inner dimensions disagree");
  const int N = b.cols();
  Tensor out = detail::op_output({M, N}, {&a, &b});
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = out.data();
  for (int i = 0; i < M; ++i) {
    double* ci = pc + static_cast<std::size_t>(i) * N;
    const double* ai = pa + static_cast<std::size_t>(i) * K;
    for (int k = 0; k < K; ++k) {
      const double aik = ai[k];
      const double* bk = pb + static_cast<std::size_t>(k) * N;
      for (int j = 0; j < N; ++j) ci[j] += aik * bk[j];
    }
  }
  detail::check_finite(out, "matmul");
  detail::record_if_tracing({&a, &b}, [an = a.node(), bn = b.node(), on = out.node(), M, K, N] {
    const auto& go = on->grad_buf();
    if (an->requires_grad) {
      // dA = dC . B^T
      auto& ga = an->grad_buf();
      for (int i = 0; i < M; ++i)
        for (int k = 0; k < K; ++k) {
          double s = 0.0;
          const double* gi = go.data() + static_cast<std::size_t>(i) * N;
          const double* bk = bn->v.data() + static_cast<std::size_t>(k) * N;
          for (int j = 0; j < N; ++j) s += gi[j] * bk[j];
          ga[static_cast<std::size_t>(i) * K + k] += s;
        }
    }
    if (bn->requires_grad) {
      // dB = A^T . dC
      auto& gb = bn->grad_buf();
      for (int k = 0; k < K; ++k) {
        double* gbk = gb.data() + static_cast<std::size_t>(k) * N;
        for (int i = 0; i < M; ++i) {
          const double aik = an->v[static_cast<std::size_t>(i) * K + k];
          const double* gi = go.data() + static_cast<std::size_t>(i) * N;
          for (int j = 0; j < N; ++j) gbk[j] += aik * gi[j];
        }
      }
    }
  });
  return out;
}

inline Tensor transpose(const Tensor& a) {
  const int R = a.rows(), C = a.cols();
  Tensor out = detail::op_output({C, R}, {&a});
  for (int i = 0; i < R; ++i)
    for (int j = 0; j < C; ++j) out.at(j, i) = a.at(i, j);
  detail::record_if_tracing({&a}, [an = a.node(), on = out.node(), R, C] {
    const auto& go = on->grad_buf();
    auto& ga = an->grad_buf();
    for (int i = 0; i < R; ++i)
      for (int j = 0; j < C; ++j)
        ga[static_cast<std::size_t>(i) * C + j] += go[static_cast<std::size_t>(j) * R + i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

inline Tensor sigmoid(const Tensor& a) {
  Tensor out = detail::op_output(a.shape(), {&a});
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = detail::sigmoid_scalar(a.data()[i]);
  detail::check_finite(out, "sigmoid");
  detail::record_if_tracing({&a}, [an = a.node(), on = out.node()] {
    const auto& go = on->grad_buf();
    auto& ga = an->grad_buf();
    for (std::size_t i = 0; i < go.size(); ++i) {
      const double y = on->v[i];
      ga[i] += go[i] * y * (1.0 - y);
    }
  });
  return out;
}

inline Tensor swish(const Tensor& a) {
  Tensor out = detail::op_output(a.shape(), {&a});
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a.data()[i];
    out.data()[i] = x * detail::sigmoid_scalar(x);
  }
  detail::check_finite(out, "swish");
  detail::record_if_tracing({&a}, [an = a.node(), on = out.node()] {
    const auto& go = on->grad_buf();
    auto& ga = an->grad_buf();
    for (std::size_t i = 0; i < go.size(); ++i) {
      const double s = detail::sigmoid_scalar(an->v[i]);
      ga[i] += go[i] * (s + an->v[i] * s * (1.0 - s));
    }
  });
  return out;
}

// Gated linear unit over column halves: y = x[:, :C] * sigmoid(x[:, C:]).
inline Tensor glu(const Tensor& a) {
  const int R = a.rows(), C2 = a.cols();
  if (C2 % 2 != 0) throw ShapeError("glu: column count must be even");
  const int C = C2 / 2;
  Tensor out = detail::op_output({R, C}, {&a});
  for (int i = 0; i < R; ++i)
    for (int j = 0; j < C; ++j)
      out.at(i, j) = a.at(i, j) * detail::sigmoid_scalar(a.at(i, C + j));
  detail::check_finite(out, "glu");
  detail::record_if_tracing({&a}, [an = a.node(), on = out.node(), R, C, C2] {
    const auto& go = on->grad_buf();
    auto& ga = an->grad_buf();
    for (int i = 0; i < R; ++i)
      for (int j = 0; j < C; ++j) {
        const double x = an->v[static_cast<std::size_t>(i) * C2 + j];
        const double s = detail::sigmoid_scalar(an->v[static_cast<std::size_t>(i) * C2 + C + j]);
        const double g = go[static_cast<std::size_t>(i) * C + j];
        ga[static_cast<std::size_t>(i) * C2 + j] += g * s;
        ga[static_cast<std::size_t>(i) * C2 + C + j] += g * x * s * (1.0 - s);
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Softmax / normalization / losses
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor softmax_rows_impl(const Tensor& x, const BoolMatrix* mask) {
  const int R = x.rows(), C = x.cols();
  if (mask != nullptr && (mask->rows != R || mask->cols != C))
    throw ShapeError("softmax: mask shape mismatch");
  Tensor out = op_output({R, C}, {&x});
  for (int i = 0; i < R; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < C; ++j)
      if ((mask == nullptr || mask->at(i, j)) && x.at(i, j) > m) m = x.at(i, j);
    if (!std::isfinite(m)) throw NumericError("softmax: row has no allowed entries");
    double s = 0.0;
    for (int j = 0; j < C; ++j) {
      if (mask == nullptr || mask->at(i, j)) {
        const double e = std::exp(x.at(i, j) - m);
        out.at(i, j) = e;
        s += e;
      }
    }
    const double inv = 1.0 / s;
    for (int j = 0; j < C; ++j) out.at(i, j) *= inv;
  }
  check_finite(out, "softmax_rows");
  record_if_tracing({&x}, [xn = x.node(), on = out.node(), R, C] {
    const auto& go = on->grad_buf();
    auto& gx = xn->grad_buf();
    for (int i = 0; i < R; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * C;
      double dot = 0.0;
      for (int j = 0; j < C; ++j) dot += go[off + j] * on->v[off + j];
      for (int j = 0; j < C; ++j) gx[off + j] += on->v[off + j] * (go[off + j] - dot);
    }
  });
  return out;
}

}  // namespace detail

inline Tensor softmax_rows(const Tensor& x) { return detail::softmax_rows_impl(x, nullptr); }

// Masked softmax: disallowed entries get probability exactly 0 and receive no
// gradient. Every row must have at least one allowed entry.
inline Tensor softmax_rows_masked(const Tensor& x, const BoolMatrix& mask) {
  return detail::softmax_rows_impl(x, &mask);
}

inline constexpr double kLayerNormEps = 1e-5;

// Row-wise layer norm over the feature (column) axis: y = xhat * gain + bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const int R = x.rows(), C = x.cols();
  if (gain.size() != static_cast<std::size_t>(C) || bias.size() != static_cast<std::size_t>(C))
    throw ShapeError("layer_norm: gain/bias must have one entry per column");
  Tensor out = detail::op_output({R, C}, {&x, &gain, &bias});
  std::vector<double> inv_sigma(static_cast<std::size_t>(R));
  std::vector<double> mu(static_cast<std::size_t>(R));
  for (int i = 0; i < R; ++i) {
    double m = 0.0;
    for (int j = 0; j < C; ++j) m += x.at(i, j);
    m /= C;
    double var = 0.0;
    for (int j = 0; j < C; ++j) {
      const double d = x.at(i, j) - m;
      var += d * d;
    }
    var /= C;
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    mu[static_cast<std::size_t>(i)] = m;
    inv_sigma[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < C; ++j)
      out.at(i, j) = (x.at(i, j) - m) * is * gain.data()[j] + bias.data()[j];
  }
  detail::check_finite(out, "layer_norm");
  detail::record_if_tracing(
      {&x, &gain, &bias},
      [xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node(), R, C,
       inv_sigma = std::move(inv_sigma), mu = std::move(mu)] {
        const auto& go = on->grad_buf();
        for (int i = 0; i < R; ++i) {
          const std::size_t off = static_cast<std::size_t>(i) * C;
          const double is = inv_sigma[static_cast<std::size_t>(i)];
          const double m = mu[static_cast<std::size_t>(i)];
          if (xn->requires_grad) {
            // d/dx of (x - mu)/sigma * gain, with mu and sigma functions of x.
            double sum_g = 0.0, sum_gx = 0.0;
            for (int j = 0; j < C; ++j) {
              const double gj = go[off + j] * gn->v[static_cast<std::size_t>(j)];
              sum_g += gj;
              sum_gx += gj * (xn->v[off + j] - m);
            }
            auto& gx = xn->grad_buf();
            for (int j = 0; j < C; ++j) {
              const double gj = go[off + j] * gn->v[static_cast<std::size_t>(j)];
              const double xc = xn->v[off + j] - m;
              gx[off + j] += is * (gj - sum_g / C - xc * is * is * sum_gx / C);
            }
          }
          if (gn->requires_grad) {
            auto& gg = gn->grad_buf();
            for (int j = 0; j < C; ++j)
              gg[static_cast<std::size_t>(j)] += go[off + j] * (xn->v[off + j] - m) * is;
          }
          if (bn->requires_grad) {
            auto& gb = bn->grad_buf();
            for (int j = 0; j < C; ++j) gb[static_cast<std::size_t>(j)] += go[off + j];
          }
        }
      });
  return out;
}

// Mean (or sum) of -log softmax(logits)[target] over rows.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            Reduction reduction = Reduction::kMean) {
  const int B = logits.rows(), V = logits.cols();
  if (targets.empty()) throw DomainError("cross_entropy: empty target set");
  if (static_cast<int>(targets.size()) != B)
    throw ShapeError("cross_entropy: one target per logits row required");
  for (int t : targets)
    if (t < 0 || t >= V) throw DomainError("cross_entropy: target id out of range");
  Tensor out = detail::op_output({1}, {&logits});
  std::vector<double> probs(static_cast<std::size_t>(B) * V);
  double total = 0.0;
  for (int i = 0; i < B; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * V;
    double m = logits.data()[off];
    for (int j = 1; j < V; ++j) m = std::max(m, logits.data()[off + j]);
    double s = 0.0;
    for (int j = 0; j < V; ++j) {
      const double e = std::exp(logits.data()[off + j] - m);
      probs[off + j] = e;
      s += e;
    }
    const double inv = 1.0 / s;
    for (int j = 0; j < V; ++j) probs[off + j] *= inv;
    const double lse = m + std::log(s);
    total += lse - logits.data()[off + targets[static_cast<std::size_t>(i)]];
  }
  out.data()[0] = reduction == Reduction::kMean ? total / B : total;
  detail::check_finite(out, "cross_entropy");
  detail::record_if_tracing(
      {&logits}, [ln = logits.node(), on = out.node(), targets, B, V, reduction,
                  probs = std::move(probs)] {
        const double w = on->grad_buf()[0] * (reduction == Reduction::kMean ? 1.0 / B : 1.0);
        auto& gl = ln->grad_buf();
        for (int i = 0; i < B; ++i) {
          const std::size_t off = static_cast<std::size_t>(i) * V;
          for (int j = 0; j < V; ++j) gl[off + j] += w * probs[off + j];
          gl[off + targets[static_cast<std::size_t>(i)]] -= w;
        }
      });
  return out;
}

inline Tensor sum(const Tensor& a) {
  Tensor out = detail::op_output({1}, {&a});
  out.data()[0] = std::accumulate(a.values().begin(), a.values().end(), 0.0);
  detail::check_finite(out, "sum");
  detail::record_if_tracing({&a}, [an = a.node(), on = out.node()] {
    const double g = on->grad_buf()[0];
    auto& ga = an->grad_buf();
    for (auto& v : ga) v += g;
  });
  return out;
}

inline Tensor mean(const Tensor& a) {
  Tensor out = detail::op_output({1}, {&a});
  out.data()[0] =
      std::accumulate(a.values().begin(), a.values().end(), 0.0) / static_cast<double>(a.size());
  detail::check_finite(out, "mean");
  detail::record_if_tracing({&a}, [an = a.node(), on = out.node()] {
    const double g = on->grad_buf()[0] / static_cast<double>(an->v.size());
    auto& ga = an->grad_buf();
    for (auto& v : ga) v += g;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Convolution and window / slice ops
// ---------------------------------------------------------------------------

inline int conv_left_pad(int kw, Padding padding) {
  if (kw < 1) throw ConfigError("conv kernel width must be >= 1");
  if (padding == Padding::kSymmetric) {
    if (kw % 2 == 0) throw ConfigError("symmetric padding requires an odd kernel width");
    return (kw - 1) / 2;
  }
  return kw - 1;
}

// Per-channel 1-D convolution over time, zero padded so the output length
// equals the input length. Tap k[kw-1] aligns with the current frame under
// causal padding; tap k[(kw-1)/2] under symmetric padding.
inline Tensor conv1d_depthwise(const Tensor& x, const Tensor& kernel, Padding padding) {
  const int T = x.rows(), D = x.cols();
  const int Kw = kernel.rows();
  if (kernel.cols() != D) throw ShapeError("conv1d_depthwise: kernel channels mismatch");
  const int left = conv_left_pad(Kw, padding);
  Tensor out = detail::op_output({T, D}, {&x, &kernel});
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < Kw; ++j) {
      const int src = t - left + j;
      if (src < 0 || src >= T) continue;
      const double* xr = x.data() + static_cast<std::size_t>(src) * D;
      const double* kr = kernel.data() + static_cast<std::size_t>(j) * D;
      double* orow = out.data() + static_cast<std::size_t>(t) * D;
      for (int d = 0; d < D; ++d) orow[d] += kr[d] * xr[d];
    }
  detail::check_finite(out, "conv1d_depthwise");
  detail::record_if_tracing(
      {&x, &kernel}, [xn = x.node(), kn = kernel.node(), on = out.node(), T, D, Kw, left] {
        const auto& go = on->grad_buf();
        if (xn->requires_grad) {
          auto& gx = xn->grad_buf();
          for (int t = 0; t < T; ++t)
            for (int j = 0; j < Kw; ++j) {
              const int src = t - left + j;
              if (src < 0 || src >= T) continue;
              const double* kr = kn->v.data() + static_cast<std::size_t>(j) * D;
              const double* gr = go.data() + static_cast<std::size_t>(t) * D;
              double* gxr = gx.data() + static_cast<std::size_t>(src) * D;
              for (int d = 0; d < D; ++d) gxr[d] += kr[d] * gr[d];
            }
        }
        if (kn->requires_grad) {
          auto& gk = kn->grad_buf();
          for (int t = 0; t < T; ++t)
            for (int j = 0; j < Kw; ++j) {
              const int src = t - left + j;
              if (src < 0 || src >= T) continue;
              const double* xr = xn->v.data() + static_cast<std::size_t>(src) * D;
              const double* gr = go.data() + static_cast<std::size_t>(t) * D;
              double* gkr = gk.data() + static_cast<std::size_t>(j) * D;
              for (int d = 0; d < D; ++d) gkr[d] += xr[d] * gr[d];
            }
        }
      });
  return out;
}

// Strided sliding-window gather, zero padded on the left. Output row l is the
// concatenation of input rows [stride*l + offset - K + 1 .. stride*l + offset];
// with offset = stride - 1 this yields exactly floor(T/stride) rows and a
// strictly causal window anchor.
inline Tensor gather_windows(const Tensor& x, int K, int stride, int offset) {
  const int T = x.rows(), D = x.cols();
  if (K < 1 || stride < 1 || offset < 0 || offset >= stride)
    throw ConfigError("gather_windows: need K>=1, stride>=1, 0<=offset<stride");
  const int L = T / stride;
  if (L < 1) throw InputError("gather_windows: input shorter than one stride");
  Tensor out = detail::op_output({L, K * D}, {&x});
  for (int l = 0; l < L; ++l) {
    const int anchor = stride * l + offset;
    for (int j = 0; j < K; ++j) {
      const int src = anchor - K + 1 + j;
      if (src < 0) continue;  // zero pad
      const double* xr = x.data() + static_cast<std::size_t>(src) * D;
      double* orow = out.data() + static_cast<std::size_t>(l) * (K * D) + static_cast<std::size_t>(j) * D;
      for (int d = 0; d < D; ++d) orow[d] = xr[d];
    }
  }
  detail::record_if_tracing({&x}, [xn = x.node(), on = out.node(), K, stride, offset, L, D] {
    const auto& go = on->grad_buf();
    auto& gx = xn->grad_buf();
    for (int l = 0; l < L; ++l) {
      const int anchor = stride * l + offset;
      for (int j = 0; j < K; ++j) {
        const int src = anchor - K + 1 + j;
        if (src < 0) continue;
        const double* gr = go.data() + static_cast<std::size_t>(l) * (K * D) + static_cast<std::size_t>(j) * D;
        double* gxr = gx.data() + static_cast<std::size_t>(src) * D;
        for (int d = 0; d < D; ++d) gxr[d] += gr[d];
      }
    }
  });
  return out;
}

inline Tensor slice_rows(const Tensor& x, int r0, int r1) {
  const int R = x.rows(), C = x.cols();
  if (r0 < 0 || r1 > R || r0 >= r1) throw ShapeError("slice_rows: bad range");
  Tensor out = detail::op_output({r1 - r0, C}, {&x});
  std::copy(x.data() + static_cast<std::size_t>(r0) * C, x.data() + static_cast<std::size_t>(r1) * C,
            out.data());
  detail::record_if_tracing({&x}, [xn = x.node(), on = out.node(), r0, C] {
    const auto& go = on->grad_buf();
    auto& gx = xn->grad_buf();
    for (std::size_t i = 0; i < go.size(); ++i) gx[static_cast<std::size_t>(r0) * C + i] += go[i];
  });
  return out;
}

inline Tensor select_rows(const Tensor& x, const std::vector<int>& rows) {
  const int R = x.rows(), C = x.cols();
  if (rows.empty()) throw ShapeError("select_rows: empty selection");
  for (int r : rows)
    if (r < 0 || r >= R) throw ShapeError("select_rows: index out of range");
  Tensor out = detail::op_output({static_cast<int>(rows.size()), C}, {&x});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(x.data() + static_cast<std::size_t>(rows[i]) * C,
              x.data() + static_cast<std::size_t>(rows[i] + 1) * C, out.data() + i * C);
  detail::record_if_tracing({&x}, [xn = x.node(), on = out.node(), rows, C] {
    const auto& go = on->grad_buf();
    auto& gx = xn->grad_buf();
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (int j = 0; j < C; ++j)
        gx[static_cast<std::size_t>(rows[i]) * C + j] += go[i * static_cast<std::size_t>(C) + j];
  });
  return out;
}

inline Tensor slice_cols(const Tensor& x, int c0, int width) {
  const int R = x.rows(), C = x.cols();
  if (c0 < 0 || width < 1 || c0 + width > C) throw ShapeError("slice_cols: bad range");
  Tensor out = detail::op_output({R, width}, {&x});
  for (int i = 0; i < R; ++i)
    std::copy(x.data() + static_cast<std::size_t>(i) * C + c0,
              x.data() + static_cast<std::size_t>(i) * C + c0 + width,
              out.data() + static_cast<std::size_t>(i) * width);
  detail::record_if_tracing({&x}, [xn = x.node(), on = out.node(), c0, width, R, C] {
    const auto& go = on->grad_buf();
    auto& gx = xn->grad_buf();
    for (int i = 0; i < R; ++i)
      for (int j = 0; j < width; ++j)
        gx[static_cast<std::size_t>(i) * C + c0 + j] += go[static_cast<std::size_t>(i) * width + j];
  });
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const int R = parts[0].rows();
  int C = 0;
  for (const auto& p : parts) {
    if (p.rows() != R) throw ShapeError("concat_cols: row count mismatch");
    C += p.cols();
  }
  bool needs = false;
  for (const auto& p : parts) needs = needs || p.requires_grad();
  Tensor out = Tensor::zeros({R, C}, needs);
  int c0 = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < R; ++i)
      std::copy(p.data() + static_cast<std::size_t>(i) * p.cols(),
                p.data() + static_cast<std::size_t>(i + 1) * p.cols(),
                out.data() + static_cast<std::size_t>(i) * C + c0);
    c0 += p.cols();
  }
  if (Tape::current() != nullptr && needs) {
    std::vector<std::shared_ptr<detail::TensorData>> ins;
    ins.reserve(parts.size());
    for (const auto& p : parts) ins.push_back(p.node());
    Tape::current()->record([ins, on = out.node(), R, C] {
      const auto& go = on->grad_buf();
      int c0 = 0;
      for (const auto& in : ins) {
        const int w = in->shape[1];
        if (in->requires_grad) {
          auto& gi = in->grad_buf();
          for (int i = 0; i < R; ++i)
            for (int j = 0; j < w; ++j)
              gi[static_cast<std::size_t>(i) * w + j] += go[static_cast<std::size_t>(i) * C + c0 + j];
        }
        c0 += w;
      }
    });
  }
  return out;
}

}  // namespace nestrq
