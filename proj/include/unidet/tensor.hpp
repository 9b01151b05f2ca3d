#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace unidet {

class Tensor;

namespace detail {

// Reverse-mode record attached to an op's output. `backward` scatters the
// output gradient into the parents' gradient buffers.
struct Node {
  std::uint64_t seq = 0;
  const char* op = "";
  std::vector<Tensor> parents;
  std::function<void(const std::vector<double>& grad_out)> backward;
};

struct TensorImpl {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until touched by backward()
  std::shared_ptr<Node> node;
};

}  // namespace detail

// Shared-storage row-major tensor of doubles. Copies are shallow: gradient
// slots are keyed by the underlying storage, so handles passed around keep
// referring to the same parameter.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, double value,
                     bool requires_grad = false);
  static Tensor from(std::vector<std::size_t> shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<std::size_t>& shape() const;
  std::size_t numel() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t rows() const;  // requires ndim() == 2
  std::size_t cols() const;  // requires ndim() == 2

  double* data();
  const double* data() const;
  double value() const;  // requires numel() == 1

  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool v);

  // Gradient accumulated by the last backward(); empty if never touched.
  const std::vector<double>& grad() const;
  bool has_grad() const;
  void zero_grad();

  // Zero-initialized gradient buffer, allocating on first use.
  double* grad_buffer();

  const void* id() const { return impl_.get(); }
  const std::shared_ptr<detail::Node>& node() const;
  void reset_node();

  // Deep copy with no tape attachment.
  Tensor detached_copy() const;

 private:
  friend Tensor make_op(const char* op, std::vector<std::size_t> shape,
                        std::vector<double> data, std::vector<Tensor> parents,
                        std::function<void(const std::vector<double>&)> backward);
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Builds an op output and, when any parent requires gradients, attaches a
// backward record. Exposed so composite modules can define custom ops.
Tensor make_op(const char* op, std::vector<std::size_t> shape,
               std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(const std::vector<double>&)> backward);

// --- differentiable ops (all validate shapes and throw std::invalid_argument) ---

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// x [N x I] * w [I x O] + bias [O] broadcast over rows
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& bias);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
// softmax over the last axis of a 2-D tensor, max-subtracted per row
Tensor softmax(const Tensor& x);
// per-row normalization to zero mean / unit variance (eps inside the sqrt);
// no learned scale, pair with rowwise_affine for that
Tensor layernorm(const Tensor& x, double eps = 1e-5);
// x [N x C] * gain [C] + bias [C], broadcast over rows
Tensor rowwise_affine(const Tensor& x, const Tensor& gain, const Tensor& bias);
// out[s] = mean of rows of x with assignment[i] == s; every segment in
// [0, segments) must be non-empty
Tensor segment_mean(const Tensor& x, const std::vector<int>& assignment,
                    std::size_t segments);
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);
// out[rows[i]] += x[i]; rows may repeat, accumulation runs in row order
Tensor scatter_add_rows(const Tensor& x, const std::vector<int>& rows,
                        std::size_t out_rows);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor mean_all(const Tensor& x);
Tensor sum_all(const Tensor& x);
// mean multinomial cross-entropy of row-wise logits against integer targets,
// computed with a max-shifted log-sum-exp
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);
// weighted variant: sum(w_i * loss_i) / sum(w_i)
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<double>& weights);

// Runs reverse-mode accumulation from a scalar loss through every reachable
// op, visiting each once, then releases the tape. Leaf gradients stay in the
// tensors' grad buffers.
void backward(const Tensor& loss);

struct GradCheckReport {
  bool pass = false;
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_coord = 0;
};

// Central-difference check of f's gradient at `point`. Each coordinate i of
// point is perturbed by +-step; the relative error uses
// |analytic - numeric| / max(|analytic|, |numeric|), with coordinates where
// both magnitudes are below 1e-9 treated as matching. `coords` limits the
// probe to a subset (empty = all coordinates).
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& point, double step, double tol,
                           const std::vector<std::size_t>& coords = {});

// Parameter init: uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
Tensor init_uniform(std::vector<std::size_t> shape, std::size_t fan_in,
                    class Rng& rng);

std::string shape_str(const std::vector<std::size_t>& shape);

}  // namespace unidet
