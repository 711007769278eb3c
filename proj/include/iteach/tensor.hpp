#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "iteach/error.hpp"

namespace iteach {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass touches the node
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(TensorImpl&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
  TensorImpl& parent(std::size_t i) { return *parents[i]; }
};

}  // namespace detail

/// Dense row-major float64 array with an optional place in a reverse-mode
/// graph. Copies are shallow: two Tensor values may name the same storage,
/// which is how parameters are shared between modules and the registry.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : impl_(std::make_shared<detail::TensorImpl>()) {
    for (auto d : shape)
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
    impl_->data.assign(shape_size(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<detail::TensorImpl>()) {
    if (shape_size(shape) != data.size())
      throw DimensionError("shape " + shape_string(shape) + " holds " + std::to_string(shape_size(shape)) +
                           " values, got " + std::to_string(data.size()));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = rows.begin()->size();
    std::vector<double> d;
    d.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      d.insert(d.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(d));
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t size() const { return impl_->data.size(); }
  std::size_t rows() const { return impl_->shape.front(); }
  std::size_t cols() const { return impl_->shape.back(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  std::vector<double>& values() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  double& operator[](std::size_t i) { return impl_->data[i]; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double& operator()(std::size_t r, std::size_t c) { return impl_->data[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

  double item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  /// Value copy with no graph history.
  Tensor detach() const { return Tensor(shape(), values()); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Append-only record of differentiable operations. Nodes are appended in
/// execution order, so every node's parents precede it and a reverse sweep is
/// a valid topological replay.
class Tape {
 public:
  void record(std::shared_ptr<detail::TensorImpl> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }

  /// Accumulates d(loss)/d(t) into every requires_grad tensor reachable from
  /// `loss`, then consumes the tape.
  void backward(const Tensor& loss) {
    if (loss.size() != 1)
      throw DimensionError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
    for (auto& node : nodes_) {
      node->ensure_grad();
      for (auto& p : node->parents)
        if (p->requires_grad) p->ensure_grad();
    }
    auto& root = *loss.impl();
    root.ensure_grad();
    root.grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      auto& node = **it;
      if (node.backward_fn) node.backward_fn(node);
    }
    clear();
  }

  void clear() {
    for (auto& node : nodes_) {
      node->backward_fn = nullptr;
      node->parents.clear();
    }
    nodes_.clear();
  }

  ~Tape() { clear(); }

 private:
  std::vector<std::shared_ptr<detail::TensorImpl>> nodes_;
};

namespace detail {
inline thread_local Tape* active_tape = nullptr;
}

/// Installs a tape as the recording target for the current thread. Ops run
/// outside any scope build no graph, which is the inference path.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(detail::active_tape) { detail::active_tape = &tape; }
  ~TapeScope() { detail::active_tape = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

inline bool recording() { return detail::active_tape != nullptr; }

/// Suspends recording, e.g. for finite-difference probes inside a scope.
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_tape) { detail::active_tape = nullptr; }
  ~NoGradScope() { detail::active_tape = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

namespace detail {

// Wraps freshly computed values as an op result and, when recording, links
// it into the active tape.
inline Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                          std::function<void(TensorImpl&)> backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!active_tape) return out;
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (!needs) return out;
  auto& impl = *out.impl();
  impl.requires_grad = true;
  impl.parents.reserve(inputs.size());
  for (auto& t : inputs) impl.parents.push_back(t.impl());
  impl.backward_fn = std::move(backward);
  active_tape->record(out.impl());
  return out;
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

// C[MxN] += A[MxK] * B[KxN], all row-major.
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[MxK] += A[MxN] * B[KxN]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += arow[j] * brow[j];
      c[i * k + p] += s;
    }
  }
}

// C[KxN] += A[MxK]^T * B[MxN]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::TensorImpl& self) {
    auto& pa = self.parent(0);
    auto& pb = self.parent(1);
    if (pa.requires_grad) detail::gemm_nt(self.grad.data(), pb.data.data(), pa.grad.data(), m, n, k);
    if (pb.requires_grad) detail::gemm_tn(pa.data.data(), self.grad.data(), pb.grad.data(), m, k, n);
  });
}

/// a * b^T without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul_nt");
  detail::require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), n = a.dim(1), k = b.dim(0);
  if (b.dim(1) != n)
    throw DimensionError("matmul_nt: inner dimensions disagree for " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
  std::vector<double> out(m * k, 0.0);
  detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, n, k);
  return detail::make_result({m, k}, std::move(out), {a, b}, [m, n, k](detail::TensorImpl& self) {
    auto& pa = self.parent(0);
    auto& pb = self.parent(1);
    // dA[MxN] = dC[MxK] * B[KxN]; dB[KxN] = dC^T * A
    if (pa.requires_grad) detail::gemm_nn(self.grad.data(), pb.data.data(), pa.grad.data(), m, k, n);
    if (pb.requires_grad) detail::gemm_tn(self.grad.data(), pa.data.data(), pb.grad.data(), m, k, n);
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  const auto src = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = src[i * c + j];
  return detail::make_result({c, r}, std::move(out), {a}, [r, c](detail::TensorImpl& self) {
    auto& pa = self.parent(0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) pa.grad[i * c + j] += self.grad[j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.values());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::TensorImpl& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = self.parent(k);
      if (!p.requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.values());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::TensorImpl& self) {
    auto& pa = self.parent(0);
    auto& pb = self.parent(1);
    if (pa.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.values());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::TensorImpl& self) {
    auto& pa = self.parent(0);
    auto& pb = self.parent(1);
    if (pa.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.data[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.data[i];
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.values());
  for (auto& v : out) v *= s;
  return detail::make_result(a.shape(), std::move(out), {a}, [s](detail::TensorImpl& self) {
    auto& pa = self.parent(0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * s;
  });
}

inline Tensor abs(const Tensor& a) {
  std::vector<double> out(a.values());
  for (auto& v : out) v = std::fabs(v);
  return detail::make_result(a.shape(), std::move(out), {a}, [](detail::TensorImpl& self) {
    auto& pa = self.parent(0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double x = pa.data[i];
      pa.grad[i] += self.grad[i] * (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0));
    }
  });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.values());
  for (auto& x : out) x = 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
  return detail::make_result(a.shape(), std::move(out), {a}, [](detail::TensorImpl& self) {
    auto& pa = self.parent(0);
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double x = pa.data[i];
      const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      pa.grad[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// Broadcasting helpers over rows of a [rows x cols] view (leading dims flattened)

/// out[r, c] = a[r, c] + bias[c]
inline Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
  const std::size_t n = a.cols();
  if (bias.size() != n)
    throw DimensionError("add_rowvec: bias " + shape_string(bias.shape()) + " does not match " +
                         shape_string(a.shape()));
  std::vector<double> out(a.values());
  const auto bd = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % n];
  return detail::make_result(a.shape(), std::move(out), {a, bias}, [n](detail::TensorImpl& self) {
    auto& pa = self.parent(0);
    auto& pb = self.parent(1);
    if (pa.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i % n] += self.grad[i];
  });
}

/// out[r, c] = a[r, c] * w[r]; w holds one entry per row.
inline Tensor mul_colvec(const Tensor& a, const Tensor& w) {
  const std::size_t n = a.cols();
  const std::size_t r = a.size() / n;
  if (w.size() != r)
    throw DimensionError("mul_colvec: weights " + shape_string(w.shape()) + " do not match rows of " +
                         shape_string(a.shape()));
  std::vector<double> out(a.values());
  const auto wd = w.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= wd[i];
  return detail::make_result(a.shape(), std::move(out), {a, w}, [r, n](detail::TensorImpl& self) {
    auto& pa = self.parent(0);
    auto& pw = self.parent(1);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double g = self.grad[i * n + j];
        if (pa.requires_grad) pa.grad[i * n + j] += g * pw.data[i];
        if (pw.requires_grad) pw.grad[i] += g * pa.data[i * n + j];
      }
    }
  });
}

/// Multiplies each row by a constant 0/1 (or any fixed) factor; used to pin
/// padding rows to zero.
inline Tensor mask_rows(const Tensor& a, std::span<const double> row_scale) {
  const std::size_t n = a.cols();
  const std::size_t r = a.size() / n;
  if (row_scale.size() != r)
    throw DimensionError("mask_rows: " + std::to_string(row_scale.size()) + " factors for " +
                         shape_string(a.shape()));
  std::vector<double> factors(row_scale.begin(), row_scale.end());
  std::vector<double> out(a.values());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= factors[i];
  return detail::make_result(a.shape(), std::move(out), {a},
                             [r, n, factors = std::move(factors)](detail::TensorImpl& self) {
                               auto& pa = self.parent(0);
                               for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t j = 0; j < n; ++j)
                                   pa.grad[i * n + j] += self.grad[i * n + j] * factors[i];
                             });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result({1}, {s}, {a}, [](detail::TensorImpl& self) {
    auto& pa = self.parent(0);
    const double g = self.grad[0];
    for (auto& v : pa.grad) v += g;
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  return detail::make_result(std::move(shape), a.values(), {a}, [](detail::TensorImpl& self) {
    auto& pa = self.parent(0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
  });
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  detail::require_rank(a, 2, "slice_cols");
  const std::size_t r = a.dim(0), c = a.dim(1);
  if (start + count > c || count == 0)
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for " + shape_string(a.shape()));
  std::vector<double> out(r * count);
  const auto src = a.data();
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(i * c + start), count, out.begin() + i * count);
  return detail::make_result({r, count}, std::move(out), {a}, [r, c, start, count](detail::TensorImpl& self) {
    auto& pa = self.parent(0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) pa.grad[i * c + start + j] += self.grad[i * count + j];
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts.front().dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    if (p.dim(0) != r) throw DimensionError("concat_cols: row counts disagree");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<double> out(r * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].data();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + offset + j] = src[i * widths[k] + j];
    offset += widths[k];
  }
  return detail::make_result({r, total}, std::move(out), parts,
                             [r, total, widths = std::move(widths)](detail::TensorImpl& self) {
                               std::size_t off = 0;
                               for (std::size_t k = 0; k < widths.size(); ++k) {
                                 auto& p = self.parent(k);
                                 if (p.requires_grad)
                                   for (std::size_t i = 0; i < r; ++i)
                                     for (std::size_t j = 0; j < widths[k]; ++j)
                                       p.grad[i * widths[k] + j] += self.grad[i * total + off + j];
                                 off += widths[k];
                               }
                             });
}

/// Column `c` of a 2-D tensor as a [rows] vector.
inline Tensor column(const Tensor& a, std::size_t c) {
  detail::require_rank(a, 2, "column");
  const std::size_t r = a.dim(0), n = a.dim(1);
  if (c >= n) throw DimensionError("column: index out of range for " + shape_string(a.shape()));
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = a(i, c);
  return detail::make_result({r}, std::move(out), {a}, [r, n, c](detail::TensorImpl& self) {
    auto& pa = self.parent(0);
    for (std::size_t i = 0; i < r; ++i) pa.grad[i * n + c] += self.grad[i];
  });
}

/// Channel `c` of a [L x L x C] tensor as [L x L].
inline Tensor channel(const Tensor& a, std::size_t c) {
  detail::require_rank(a, 3, "channel");
  const std::size_t l0 = a.dim(0), l1 = a.dim(1), n = a.dim(2);
  if (c >= n) throw DimensionError("channel: index out of range for " + shape_string(a.shape()));
  std::vector<double> out(l0 * l1);
  const auto src = a.data();
  for (std::size_t i = 0; i < l0 * l1; ++i) out[i] = src[i * n + c];
  return detail::make_result({l0, l1}, std::move(out), {a}, [l0, l1, n, c](detail::TensorImpl& self) {
    auto& pa = self.parent(0);
    for (std::size_t i = 0; i < l0 * l1; ++i) pa.grad[i * n + c] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax over the last axis restricted to positions with valid[j] true.
/// Invalid positions output exactly 0.
inline Tensor masked_softmax(const Tensor& x, const std::vector<bool>& valid) {
  const std::size_t n = x.cols();
  if (valid.size() != n)
    throw DimensionError("masked_softmax: mask of length " + std::to_string(valid.size()) + " for " +
                         shape_string(x.shape()));
  if (std::none_of(valid.begin(), valid.end(), [](bool b) { return b; }))
    throw DegenerateMaskError("masked_softmax: every position is masked");
  const std::size_t rows = x.size() / n;
  std::vector<double> out(x.size(), 0.0);
  const auto src = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = src.data() + r * n;
    double* o = out.data() + r * n;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j)
      if (valid[j]) mx = std::max(mx, in[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (valid[j]) total += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j)
      if (valid[j]) o[j] /= total;
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [rows, n](detail::TensorImpl& self) {
    auto& px = self.parent(0);
    // self.data holds the probabilities; masked entries are zero and receive no gradient.
    for (std::size_t r = 0; r < rows; ++r) {
      const double* p = self.data.data() + r * n;
      const double* g = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += p[j] * g[j];
      for (std::size_t j = 0; j < n; ++j) px.grad[r * n + j] += p[j] * (g[j] - dot);
    }
  });
}

inline Tensor softmax_rows(const Tensor& x) { return masked_softmax(x, std::vector<bool>(x.cols(), true)); }

inline constexpr double kLayerNormEps = 1e-5;

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const std::size_t d = x.cols();
  if (gamma.size() != d || beta.size() != d)
    throw DimensionError("layer_norm: affine parameters do not match width of " + shape_string(x.shape()));
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  const auto src = x.data();
  const auto g = gamma.data();
  const auto b = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = src.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (in[j] - mu) * is;
      out[r * d + j] = xhat[r * d + j] * g[j] + b[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::TensorImpl& self) {
        auto& px = self.parent(0);
        auto& pg = self.parent(1);
        auto& pb = self.parent(2);
        const double dd = static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gout = self.grad.data() + r * d;
          const double* xh = xhat.data() + r * d;
          if (pg.requires_grad)
            for (std::size_t j = 0; j < d; ++j) pg.grad[j] += gout[j] * xh[j];
          if (pb.requires_grad)
            for (std::size_t j = 0; j < d; ++j) pb.grad[j] += gout[j];
          if (!px.requires_grad) continue;
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double gx = gout[j] * pg.data[j];
            s1 += gx;
            s2 += gx * xh[j];
          }
          for (std::size_t j = 0; j < d; ++j) {
            const double gx = gout[j] * pg.data[j];
            px.grad[r * d + j] += inv_std[r] * (gx - s1 / dd - xh[j] * s2 / dd);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Sequence ops

/// 1-D convolution along the sequence axis with zero padding.
/// x: [L x C_in], kernel: [w x C_in x C_out] -> [L + 2*pad - w + 1 x C_out].
/// Output row t reads input rows t - pad .. t - pad + w - 1.
inline Tensor conv1d(const Tensor& x, const Tensor& kernel, std::size_t pad) {
  detail::require_rank(x, 2, "conv1d");
  detail::require_rank(kernel, 3, "conv1d");
  const std::size_t len = x.dim(0), cin = x.dim(1);
  const std::size_t w = kernel.dim(0), cout = kernel.dim(2);
  if (kernel.dim(1) != cin)
    throw DimensionError("conv1d: kernel " + shape_string(kernel.shape()) + " does not accept input " +
                         shape_string(x.shape()));
  if (w > len + 2 * pad)
    throw DimensionError("conv1d: window " + std::to_string(w) + " exceeds padded length " +
                         std::to_string(len + 2 * pad));
  const std::size_t lout = len + 2 * pad - w + 1;
  std::vector<double> out(lout * cout, 0.0);
  const auto xd = x.data();
  const auto kd = kernel.data();
  for (std::size_t t = 0; t < lout; ++t) {
    for (std::size_t k = 0; k < w; ++k) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(pad);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
      detail::gemm_nn(xd.data() + src * cin, kd.data() + k * cin * cout, out.data() + t * cout, 1, cin, cout);
    }
  }
  return detail::make_result(
      {lout, cout}, std::move(out), {x, kernel}, [len, cin, w, cout, lout, pad](detail::TensorImpl& self) {
        auto& px = self.parent(0);
        auto& pk = self.parent(1);
        for (std::size_t t = 0; t < lout; ++t) {
          const double* g = self.grad.data() + t * cout;
          for (std::size_t k = 0; k < w; ++k) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(pad);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
            const double* kk = pk.data.data() + k * cin * cout;
            if (px.requires_grad) detail::gemm_nt(g, kk, px.grad.data() + src * cin, 1, cout, cin);
            if (pk.requires_grad)
              detail::gemm_tn(px.data.data() + src * cin, g, pk.grad.data() + k * cin * cout, 1, cin, cout);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Losses

/// sum_r weight[r] * -log softmax(logits[r])[label[r]]. Rows with weight 0
/// contribute nothing and may carry any label.
inline Tensor weighted_nll(const Tensor& logits, const std::vector<int>& labels, std::span<const double> weights) {
  detail::require_rank(logits, 2, "weighted_nll");
  const std::size_t rows = logits.dim(0), n = logits.dim(1);
  if (labels.size() != rows || weights.size() != rows)
    throw DimensionError("weighted_nll: labels/weights do not match " + shape_string(logits.shape()));
  std::vector<double> probs(rows * n, 0.0);
  std::vector<double> w(weights.begin(), weights.end());
  double total = 0.0;
  const auto src = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (w[r] == 0.0) continue;
    const auto y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= n)
      throw DimensionError("weighted_nll: label " + std::to_string(y) + " outside [0, " + std::to_string(n) + ")");
    const double* in = src.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(in[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) probs[r * n + j] = std::exp(in[j] - lse);
    total += w[r] * (lse - in[y]);
  }
  return detail::make_result(
      {1}, {total}, {logits},
      [rows, n, labels, w = std::move(w), probs = std::move(probs)](detail::TensorImpl& self) {
        auto& pl = self.parent(0);
        const double g = self.grad[0];
        for (std::size_t r = 0; r < rows; ++r) {
          if (w[r] == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) {
            const double onehot = static_cast<int>(j) == labels[r] ? 1.0 : 0.0;
            pl.grad[r * n + j] += g * w[r] * (probs[r * n + j] - onehot);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convenience operators

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

}  // namespace iteach
