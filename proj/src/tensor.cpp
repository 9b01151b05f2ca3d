#include "unidet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "unidet/kernels.hpp"
#include "unidet/random.hpp"

namespace unidet {

namespace {

std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) fail(std::string(op) + ": undefined tensor");
}

void require_2d(const Tensor& t, const char* op) {
  require_defined(t, op);
  if (t.ndim() != 2) fail(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    fail(std::string(op) + ": shape mismatch: " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
  }
}

std::vector<double> transpose_raw(const double* src, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  }
  return out;
}

}  // namespace

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << " x ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// --- Tensor ---

static std::shared_ptr<detail::TensorImpl> make_impl(std::vector<std::size_t> shape,
                                                     std::vector<double> data,
                                                     bool requires_grad) {
  if (shape.empty()) fail("tensor: shape must have at least one dimension");
  for (std::size_t d : shape) {
    if (d == 0) fail("tensor: zero-sized dimension in " + shape_str(shape));
  }
  if (data.size() != shape_numel(shape)) {
    fail("tensor: data size " + std::to_string(data.size()) + " does not match shape " +
         shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return impl;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  return from(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
  return from(shape, std::vector<double>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> data,
                    bool requires_grad) {
  Tensor t;
  t.impl_ = make_impl(std::move(shape), std::move(data), requires_grad);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

static detail::TensorImpl& deref(const std::shared_ptr<detail::TensorImpl>& p) {
  if (!p) throw std::logic_error("tensor: use of undefined tensor");
  return *p;
}

const std::vector<std::size_t>& Tensor::shape() const { return deref(impl_).shape; }

std::size_t Tensor::numel() const { return deref(impl_).data.size(); }

std::size_t Tensor::rows() const {
  require_2d(*this, "rows");
  return shape()[0];
}

std::size_t Tensor::cols() const {
  require_2d(*this, "cols");
  return shape()[1];
}

double* Tensor::data() { return deref(impl_).data.data(); }
const double* Tensor::data() const { return deref(impl_).data.data(); }

double Tensor::value() const {
  if (numel() != 1) fail("value: tensor is not scalar, shape " + shape_str(shape()));
  return data()[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  require_2d(*this, "at");
  if (r >= rows() || c >= cols()) {
    fail("at: index (" + std::to_string(r) + ", " + std::to_string(c) +
         ") out of range for " + shape_str(shape()));
  }
  return data()[r * cols() + c];
}

bool Tensor::requires_grad() const { return deref(impl_).requires_grad; }

void Tensor::set_requires_grad(bool v) { deref(impl_).requires_grad = v; }

const std::vector<double>& Tensor::grad() const { return deref(impl_).grad; }

bool Tensor::has_grad() const { return !deref(impl_).grad.empty(); }

void Tensor::zero_grad() { deref(impl_).grad.clear(); }

double* Tensor::grad_buffer() {
  auto& impl = deref(impl_);
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0);
  return impl.grad.data();
}

const std::shared_ptr<detail::Node>& Tensor::node() const { return deref(impl_).node; }

void Tensor::reset_node() { deref(impl_).node.reset(); }

Tensor Tensor::detached_copy() const {
  const auto& impl = deref(impl_);
  return Tensor::from(impl.shape, impl.data, false);
}

Tensor make_op(const char* op, std::vector<std::size_t> shape, std::vector<double> data,
               std::vector<Tensor> parents,
               std::function<void(const std::vector<double>&)> backward) {
  bool needs_grad = false;
  for (const Tensor& p : parents) {
    require_defined(p, op);
    if (p.requires_grad()) needs_grad = true;
  }
  Tensor out;
  out.impl_ = make_impl(std::move(shape), std::move(data), needs_grad);
  if (needs_grad) {
    auto node = std::make_shared<detail::Node>();
    node->seq = next_seq();
    node->op = op;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
    out.impl_->node = std::move(node);
  }
  return out;
}

// --- ops ---

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  if (a.cols() != b.rows()) {
    fail("matmul: inner dimensions differ: " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  const auto& K = kernels::active();
  std::vector<double> out(m * n, 0.0);
  K.matmul_acc(a.data(), b.data(), out.data(), m, k, n);
  Tensor ta = a, tb = b;
  return make_op("matmul", {m, n}, std::move(out), {a, b},
                 [ta, tb, m, k, n](const std::vector<double>& g) mutable {
                   const auto& kern = kernels::active();
                   if (ta.requires_grad()) {
                     const auto bt = transpose_raw(tb.data(), k, n);
                     kern.matmul_acc(g.data(), bt.data(), ta.grad_buffer(), m, n, k);
                   }
                   if (tb.requires_grad()) {
                     const auto at = transpose_raw(ta.data(), m, k);
                     kern.matmul_acc(at.data(), g.data(), tb.grad_buffer(), k, m, n);
                   }
                 });
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  Tensor ta = a;
  return make_op("transpose", {c, r}, transpose_raw(a.data(), r, c), {a},
                 [ta, r, c](const std::vector<double>& g) mutable {
                   if (!ta.requires_grad()) return;
                   double* ga = ta.grad_buffer();
                   for (std::size_t i = 0; i < c; ++i) {
                     for (std::size_t j = 0; j < r; ++j) ga[j * c + i] += g[i * r + j];
                   }
                 });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const std::size_t n = a.numel();
  const auto& K = kernels::active();
  std::vector<double> out(n);
  K.add(a.data(), b.data(), out.data(), n);
  Tensor ta = a, tb = b;
  return make_op("add", a.shape(), std::move(out), {a, b},
                 [ta, tb, n](const std::vector<double>& g) mutable {
                   const auto& kern = kernels::active();
                   if (ta.requires_grad()) kern.axpy(1.0, g.data(), ta.grad_buffer(), n);
                   if (tb.requires_grad()) kern.axpy(1.0, g.data(), tb.grad_buffer(), n);
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const std::size_t n = a.numel();
  const auto& K = kernels::active();
  std::vector<double> out(n);
  K.sub(a.data(), b.data(), out.data(), n);
  Tensor ta = a, tb = b;
  return make_op("sub", a.shape(), std::move(out), {a, b},
                 [ta, tb, n](const std::vector<double>& g) mutable {
                   const auto& kern = kernels::active();
                   if (ta.requires_grad()) kern.axpy(1.0, g.data(), ta.grad_buffer(), n);
                   if (tb.requires_grad()) kern.axpy(-1.0, g.data(), tb.grad_buffer(), n);
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const std::size_t n = a.numel();
  const auto& K = kernels::active();
  std::vector<double> out(n);
  K.mul(a.data(), b.data(), out.data(), n);
  Tensor ta = a, tb = b;
  return make_op("mul", a.shape(), std::move(out), {a, b},
                 [ta, tb, n](const std::vector<double>& g) mutable {
                   if (ta.requires_grad()) {
                     double* ga = ta.grad_buffer();
                     const double* bd = tb.data();
                     for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bd[i];
                   }
                   if (tb.requires_grad()) {
                     double* gb = tb.grad_buffer();
                     const double* ad = ta.data();
                     for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * ad[i];
                   }
                 });
}

Tensor scale(const Tensor& a, double s) {
  require_defined(a, "scale");
  const std::size_t n = a.numel();
  const auto& K = kernels::active();
  std::vector<double> out(n);
  K.scale(a.data(), s, out.data(), n);
  Tensor ta = a;
  return make_op("scale", a.shape(), std::move(out), {a},
                 [ta, s, n](const std::vector<double>& g) mutable {
                   if (ta.requires_grad())
                     kernels::active().axpy(s, g.data(), ta.grad_buffer(), n);
                 });
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_2d(x, "affine");
  require_2d(w, "affine");
  require_defined(bias, "affine");
  if (x.cols() != w.rows()) {
    fail("affine: input/weight mismatch: " + shape_str(x.shape()) + " vs " +
         shape_str(w.shape()));
  }
  if (bias.ndim() != 1 || bias.numel() != w.cols()) {
    fail("affine: bias shape " + shape_str(bias.shape()) + " does not match output width " +
         std::to_string(w.cols()));
  }
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  const auto& K = kernels::active();
  std::vector<double> out(m * n, 0.0);
  K.matmul_acc(x.data(), w.data(), out.data(), m, k, n);
  K.bias_add_rows(out.data(), bias.data(), m, n);
  Tensor tx = x, tw = w, tb = bias;
  return make_op("affine", {m, n}, std::move(out), {x, w, bias},
                 [tx, tw, tb, m, k, n](const std::vector<double>& g) mutable {
                   const auto& kern = kernels::active();
                   if (tx.requires_grad()) {
                     const auto wt = transpose_raw(tw.data(), k, n);
                     kern.matmul_acc(g.data(), wt.data(), tx.grad_buffer(), m, n, k);
                   }
                   if (tw.requires_grad()) {
                     const auto xt = transpose_raw(tx.data(), m, k);
                     kern.matmul_acc(xt.data(), g.data(), tw.grad_buffer(), k, m, n);
                   }
                   if (tb.requires_grad()) {
                     double* gb = tb.grad_buffer();
                     for (std::size_t r = 0; r < m; ++r) {
                       const double* grow = g.data() + r * n;
                       for (std::size_t j = 0; j < n; ++j) gb[j] += grow[j];
                     }
                   }
                 });
}

Tensor relu(const Tensor& x) {
  require_defined(x, "relu");
  const std::size_t n = x.numel();
  const auto& K = kernels::active();
  std::vector<double> out(n);
  K.relu(x.data(), out.data(), n);
  Tensor tx = x;
  return make_op("relu", x.shape(), std::move(out), {x},
                 [tx, n](const std::vector<double>& g) mutable {
                   if (tx.requires_grad())
                     kernels::active().relu_backward(tx.data(), g.data(), tx.grad_buffer(), n);
                 });
}

Tensor exp(const Tensor& x) {
  require_defined(x, "exp");
  const std::size_t n = x.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(x.data()[i]);
  Tensor tx = x;
  std::vector<double> saved = out;
  return make_op("exp", x.shape(), std::move(out), {x},
                 [tx, saved, n](const std::vector<double>& g) mutable {
                   if (!tx.requires_grad()) return;
                   double* gx = tx.grad_buffer();
                   for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * saved[i];
                 });
}

Tensor softmax(const Tensor& x) {
  require_2d(x, "softmax");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = x.data() + r * n;
    double* orow = out.data() + r * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (std::size_t j = 0; j < n; ++j) orow[j] /= sum;
  }
  Tensor tx = x;
  std::vector<double> saved = out;
  return make_op("softmax", x.shape(), std::move(out), {x},
                 [tx, saved, m, n](const std::vector<double>& g) mutable {
                   if (!tx.requires_grad()) return;
                   double* gx = tx.grad_buffer();
                   for (std::size_t r = 0; r < m; ++r) {
                     const double* y = saved.data() + r * n;
                     const double* grow = g.data() + r * n;
                     double dot = 0.0;
                     for (std::size_t j = 0; j < n; ++j) dot += grow[j] * y[j];
                     for (std::size_t j = 0; j < n; ++j) {
                       gx[r * n + j] += y[j] * (grow[j] - dot);
                     }
                   }
                 });
}

Tensor layernorm(const Tensor& x, double eps) {
  require_2d(x, "layernorm");
  if (!(eps > 0.0)) fail("layernorm: eps must be positive");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  std::vector<double> inv(m);
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = x.data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (row[j] - mean) * inv[r];
  }
  Tensor tx = x;
  std::vector<double> xhat = out;
  return make_op("layernorm", x.shape(), std::move(out), {x},
                 [tx, xhat, inv, m, n](const std::vector<double>& g) mutable {
                   if (!tx.requires_grad()) return;
                   double* gx = tx.grad_buffer();
                   const double dn = static_cast<double>(n);
                   for (std::size_t r = 0; r < m; ++r) {
                     const double* xh = xhat.data() + r * n;
                     const double* grow = g.data() + r * n;
                     double gsum = 0.0, gdot = 0.0;
                     for (std::size_t j = 0; j < n; ++j) {
                       gsum += grow[j];
                       gdot += grow[j] * xh[j];
                     }
                     const double gmean = gsum / dn;
                     const double gproj = gdot / dn;
                     for (std::size_t j = 0; j < n; ++j) {
                       gx[r * n + j] += inv[r] * (grow[j] - gmean - xh[j] * gproj);
                     }
                   }
                 });
}

Tensor rowwise_affine(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  require_2d(x, "rowwise_affine");
  require_defined(gain, "rowwise_affine");
  require_defined(bias, "rowwise_affine");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || bias.numel() != n) {
    fail("rowwise_affine: gain/bias sizes " + shape_str(gain.shape()) + "/" +
         shape_str(bias.shape()) + " do not match width " + std::to_string(n));
  }
  std::vector<double> out(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = x.data()[r * n + j] * gain.data()[j] + bias.data()[j];
    }
  }
  Tensor tx = x, tg = gain, tb = bias;
  return make_op("rowwise_affine", x.shape(), std::move(out), {x, gain, bias},
                 [tx, tg, tb, m, n](const std::vector<double>& g) mutable {
                   if (tx.requires_grad()) {
                     double* gx = tx.grad_buffer();
                     for (std::size_t r = 0; r < m; ++r) {
                       for (std::size_t j = 0; j < n; ++j) {
                         gx[r * n + j] += g[r * n + j] * tg.data()[j];
                       }
                     }
                   }
                   if (tg.requires_grad()) {
                     double* gg = tg.grad_buffer();
                     for (std::size_t r = 0; r < m; ++r) {
                       for (std::size_t j = 0; j < n; ++j) {
                         gg[j] += g[r * n + j] * tx.data()[r * n + j];
                       }
                     }
                   }
                   if (tb.requires_grad()) {
                     double* gb = tb.grad_buffer();
                     for (std::size_t r = 0; r < m; ++r) {
                       for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
                     }
                   }
                 });
}

Tensor segment_mean(const Tensor& x, const std::vector<int>& assignment,
                    std::size_t segments) {
  require_2d(x, "segment_mean");
  const std::size_t n = x.rows(), c = x.cols();
  if (assignment.size() != n) {
    fail("segment_mean: assignment size " + std::to_string(assignment.size()) +
         " does not match row count " + std::to_string(n));
  }
  if (segments == 0) fail("segment_mean: segment count must be positive");
  std::vector<double> counts(segments, 0.0);
  std::vector<double> out(segments * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const int s = assignment[i];
    if (s < 0 || static_cast<std::size_t>(s) >= segments) {
      fail("segment_mean: assignment[" + std::to_string(i) + "] = " + std::to_string(s) +
           " out of range [0, " + std::to_string(segments) + ")");
    }
    counts[static_cast<std::size_t>(s)] += 1.0;
    const double* row = x.data() + i * c;
    double* orow = out.data() + static_cast<std::size_t>(s) * c;
    for (std::size_t j = 0; j < c; ++j) orow[j] += row[j];
  }
  for (std::size_t s = 0; s < segments; ++s) {
    if (counts[s] == 0.0) {
      fail("segment_mean: segment " + std::to_string(s) + " has no members");
    }
    double* orow = out.data() + s * c;
    for (std::size_t j = 0; j < c; ++j) orow[j] /= counts[s];
  }
  Tensor tx = x;
  std::vector<int> asg = assignment;
  return make_op("segment_mean", {segments, c}, std::move(out), {x},
                 [tx, asg, counts, c](const std::vector<double>& g) mutable {
                   if (!tx.requires_grad()) return;
                   double* gx = tx.grad_buffer();
                   for (std::size_t i = 0; i < asg.size(); ++i) {
                     const std::size_t s = static_cast<std::size_t>(asg[i]);
                     const double w = 1.0 / counts[s];
                     const double* grow = g.data() + s * c;
                     for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += w * grow[j];
                   }
                 });
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
  require_2d(x, "gather_rows");
  if (rows.empty()) fail("gather_rows: empty row list");
  const std::size_t n = x.rows(), c = x.cols();
  std::vector<double> out(rows.size() * c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int r = rows[i];
    if (r < 0 || static_cast<std::size_t>(r) >= n) {
      fail("gather_rows: row " + std::to_string(r) + " out of range [0, " +
           std::to_string(n) + ")");
    }
    std::memcpy(out.data() + i * c, x.data() + static_cast<std::size_t>(r) * c,
                c * sizeof(double));
  }
  Tensor tx = x;
  std::vector<int> idx = rows;
  return make_op("gather_rows", {rows.size(), c}, std::move(out), {x},
                 [tx, idx, c](const std::vector<double>& g) mutable {
                   if (!tx.requires_grad()) return;
                   double* gx = tx.grad_buffer();
                   for (std::size_t i = 0; i < idx.size(); ++i) {
                     const double* grow = g.data() + i * c;
                     double* grow_out = gx + static_cast<std::size_t>(idx[i]) * c;
                     for (std::size_t j = 0; j < c; ++j) grow_out[j] += grow[j];
                   }
                 });
}

Tensor scatter_add_rows(const Tensor& x, const std::vector<int>& rows,
                        std::size_t out_rows) {
  require_2d(x, "scatter_add_rows");
  if (rows.size() != x.rows()) {
    fail("scatter_add_rows: " + std::to_string(rows.size()) +
         " target rows for " + std::to_string(x.rows()) + " input rows");
  }
  if (out_rows == 0) fail("scatter_add_rows: output must have rows");
  const std::size_t c = x.cols();
  std::vector<double> out(out_rows * c, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int r = rows[i];
    if (r < 0 || static_cast<std::size_t>(r) >= out_rows) {
      fail("scatter_add_rows: row " + std::to_string(r) + " out of range [0, " +
           std::to_string(out_rows) + ")");
    }
    const double* src = x.data() + i * c;
    double* dst = out.data() + static_cast<std::size_t>(r) * c;
    for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
  }
  Tensor tx = x;
  std::vector<int> idx = rows;
  return make_op("scatter_add_rows", {out_rows, c}, std::move(out), {x},
                 [tx, idx, c](const std::vector<double>& g) mutable {
                   if (!tx.requires_grad()) return;
                   double* gx = tx.grad_buffer();
                   for (std::size_t i = 0; i < idx.size(); ++i) {
                     const double* grow = g.data() + static_cast<std::size_t>(idx[i]) * c;
                     double* grow_out = gx + i * c;
                     for (std::size_t j = 0; j < c; ++j) grow_out[j] += grow[j];
                   }
                 });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail("concat_cols: no inputs");
  std::size_t m = 0, total = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    require_2d(parts[p], "concat_cols");
    if (p == 0) {
      m = parts[p].rows();
    } else if (parts[p].rows() != m) {
      fail("concat_cols: row mismatch: " + shape_str(parts[0].shape()) + " vs " +
           shape_str(parts[p].shape()));
    }
    total += parts[p].cols();
  }
  std::vector<double> out(m * total);
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t c = p.cols();
    for (std::size_t r = 0; r < m; ++r) {
      std::memcpy(out.data() + r * total + offset, p.data() + r * c, c * sizeof(double));
    }
    offset += c;
  }
  std::vector<Tensor> saved = parts;
  return make_op("concat_cols", {m, total}, std::move(out), parts,
                 [saved, m, total](const std::vector<double>& g) mutable {
                   std::size_t off = 0;
                   for (Tensor& p : saved) {
                     const std::size_t c = p.cols();
                     if (p.requires_grad()) {
                       double* gp = p.grad_buffer();
                       for (std::size_t r = 0; r < m; ++r) {
                         const double* grow = g.data() + r * total + off;
                         for (std::size_t j = 0; j < c; ++j) gp[r * c + j] += grow[j];
                       }
                     }
                     off += c;
                   }
                 });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail("concat_rows: no inputs");
  std::size_t c = 0, total = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    require_2d(parts[p], "concat_rows");
    if (p == 0) {
      c = parts[p].cols();
    } else if (parts[p].cols() != c) {
      fail("concat_rows: column mismatch: " + shape_str(parts[0].shape()) + " vs " +
           shape_str(parts[p].shape()));
    }
    total += parts[p].rows();
  }
  std::vector<double> out(total * c);
  std::size_t row = 0;
  for (const Tensor& p : parts) {
    std::memcpy(out.data() + row * c, p.data(), p.numel() * sizeof(double));
    row += p.rows();
  }
  std::vector<Tensor> saved = parts;
  return make_op("concat_rows", {total, c}, std::move(out), parts,
                 [saved, c](const std::vector<double>& g) mutable {
                   std::size_t row = 0;
                   for (Tensor& p : saved) {
                     if (p.requires_grad()) {
                       double* gp = p.grad_buffer();
                       const double* gsrc = g.data() + row * c;
                       for (std::size_t i = 0; i < p.numel(); ++i) gp[i] += gsrc[i];
                     }
                     row += p.rows();
                   }
                 });
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  require_2d(x, "slice_cols");
  const std::size_t m = x.rows(), n = x.cols();
  if (count == 0 || start + count > n) {
    fail("slice_cols: range [" + std::to_string(start) + ", " +
         std::to_string(start + count) + ") invalid for " + shape_str(x.shape()));
  }
  std::vector<double> out(m * count);
  for (std::size_t r = 0; r < m; ++r) {
    std::memcpy(out.data() + r * count, x.data() + r * n + start, count * sizeof(double));
  }
  Tensor tx = x;
  return make_op("slice_cols", {m, count}, std::move(out), {x},
                 [tx, start, count, m, n](const std::vector<double>& g) mutable {
                   if (!tx.requires_grad()) return;
                   double* gx = tx.grad_buffer();
                   for (std::size_t r = 0; r < m; ++r) {
                     const double* grow = g.data() + r * count;
                     for (std::size_t j = 0; j < count; ++j) {
                       gx[r * n + start + j] += grow[j];
                     }
                   }
                 });
}

Tensor sum_all(const Tensor& x) {
  require_defined(x, "sum_all");
  const std::size_t n = x.numel();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += x.data()[i];
  Tensor tx = x;
  return make_op("sum_all", {1}, {total}, {x},
                 [tx, n](const std::vector<double>& g) mutable {
                   if (!tx.requires_grad()) return;
                   double* gx = tx.grad_buffer();
                   for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
                 });
}

Tensor mean_all(const Tensor& x) {
  require_defined(x, "mean_all");
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  return cross_entropy(logits, targets, std::vector<double>(targets.size(), 1.0));
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<double>& weights) {
  require_2d(logits, "cross_entropy");
  const std::size_t m = logits.rows(), n = logits.cols();
  if (targets.size() != m) {
    fail("cross_entropy: target count " + std::to_string(targets.size()) +
         " does not match row count " + std::to_string(m));
  }
  if (weights.size() != m) {
    fail("cross_entropy: weight count " + std::to_string(weights.size()) +
         " does not match row count " + std::to_string(m));
  }
  double wsum = 0.0;
  for (double w : weights) {
    if (w < 0.0) fail("cross_entropy: negative weight");
    wsum += w;
  }
  if (!(wsum > 0.0)) fail("cross_entropy: weights sum to zero");
  std::vector<double> lse(m);
  double total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= n) {
      fail("cross_entropy: target " + std::to_string(t) + " out of range [0, " +
           std::to_string(n) + ")");
    }
    const double* row = logits.data() + r * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
    lse[r] = mx + std::log(sum);
    total += weights[r] * (lse[r] - row[static_cast<std::size_t>(t)]);
  }
  total /= wsum;
  Tensor tl = logits;
  std::vector<int> tg = targets;
  std::vector<double> wt = weights;
  return make_op("cross_entropy", {1}, {total}, {logits},
                 [tl, tg, wt, lse, wsum, m, n](const std::vector<double>& g) mutable {
                   if (!tl.requires_grad()) return;
                   double* gx = tl.grad_buffer();
                   for (std::size_t r = 0; r < m; ++r) {
                     const double* row = tl.data() + r * n;
                     const double coeff = g[0] * wt[r] / wsum;
                     for (std::size_t j = 0; j < n; ++j) {
                       const double p = std::exp(row[j] - lse[r]);
                       const double ind = (static_cast<std::size_t>(tg[r]) == j) ? 1.0 : 0.0;
                       gx[r * n + j] += coeff * (p - ind);
                     }
                   }
                 });
}

// --- backward driver ---

void backward(const Tensor& loss) {
  if (!loss.defined()) fail("backward: undefined tensor");
  if (loss.numel() != 1) {
    fail("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    fail("backward: loss is not connected to any gradient-tracked tensor");
  }

  // Collect every op output reachable from the loss, then run children before
  // parents (creation order is a topological order, so descending seq works).
  std::vector<Tensor> order;
  std::unordered_set<const void*> seen;
  std::vector<Tensor> stack{loss};
  while (!stack.empty()) {
    Tensor t = stack.back();
    stack.pop_back();
    if (!t.node() || seen.count(t.id())) continue;
    seen.insert(t.id());
    order.push_back(t);
    for (const Tensor& p : t.node()->parents) stack.push_back(p);
  }
  std::sort(order.begin(), order.end(), [](const Tensor& a, const Tensor& b) {
    return a.node()->seq > b.node()->seq;
  });

  Tensor root = loss;
  root.grad_buffer()[0] = 1.0;
  for (Tensor& t : order) {
    auto node = t.node();
    if (t.has_grad()) node->backward(t.grad());
    node->backward = nullptr;
    node->parents.clear();
  }
  // Consume the tape so a second backward over the same graph is impossible.
  for (Tensor& t : order) t.reset_node();
}

// --- gradient checking ---

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& point, double step, double tol,
                           const std::vector<std::size_t>& coords) {
  if (!(step > 0.0)) fail("grad_check: step must be positive");
  if (!point.defined()) fail("grad_check: undefined point");

  Tensor p = point.detached_copy();
  p.set_requires_grad(true);
  Tensor loss = f(p);
  if (loss.numel() != 1) fail("grad_check: f must return a scalar");
  if (!std::isfinite(loss.value())) {
    throw std::runtime_error("grad_check: loss is not finite at the probe point");
  }
  backward(loss);
  std::vector<double> analytic(p.numel(), 0.0);
  if (p.has_grad()) analytic = p.grad();

  std::vector<std::size_t> probe = coords;
  if (probe.empty()) {
    probe.resize(p.numel());
    for (std::size_t i = 0; i < probe.size(); ++i) probe[i] = i;
  }

  p.set_requires_grad(false);
  GradCheckReport report;
  report.pass = true;
  for (std::size_t i : probe) {
    if (i >= p.numel()) fail("grad_check: coordinate out of range");
    const double saved = p.data()[i];
    p.data()[i] = saved + step;
    const double fp = f(p).value();
    p.data()[i] = saved - step;
    const double fm = f(p).value();
    p.data()[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::runtime_error("grad_check: loss is not finite near the probe point");
    }
    const double numeric = (fp - fm) / (2.0 * step);
    const double a = analytic[i];
    const double denom = std::max(std::abs(a), std::abs(numeric));
    const double rel = denom < 1e-9 ? 0.0 : std::abs(a - numeric) / denom;
    ++report.coords_checked;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_coord = i;
    }
  }
  report.pass = report.max_rel_error <= tol;
  return report;
}

Tensor init_uniform(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
  if (fan_in == 0) fail("init_uniform: fan_in must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(data), true);
}

}  // namespace unidet
