#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "snt/common.hpp"

namespace snt {

struct TensorImpl {
  std::vector<int> shape;
  std::vector<double> data;   // row-major
  std::vector<double> grad;   // empty until first needed; then same length as data
  bool requires_grad = false;
  uint64_t id = 0;
};

// Cheap shared handle to a dense n-dimensional double tensor.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
  int rows() const;  // product of leading dims
  int cols() const;  // last dim

  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }
  double value() const;  // scalar tensors only

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  // Lazily allocated, zero-initialized, same length as data.
  std::vector<double>& grad();
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad();

  uint64_t id() const { return impl_->id; }
  const TensorImpl* impl() const { return impl_.get(); }
  TensorImpl* impl() { return impl_.get(); }

  std::string shape_str() const;

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Insertion-ordered accumulator for leaf gradients, used when several
// independent tapes contribute to the same shared parameters. Buffers are
// merged and folded in insertion order, so reductions are deterministic for
// any thread count.
class GradMap {
 public:
  std::vector<double>& get_or_create(const Tensor& t);
  const std::vector<double>* find(const Tensor& t) const;

  void merge_from(const GradMap& other);   // this += other
  void fold_into_grads() const;            // tensor.grad += buffer, in order

  struct Entry {
    Tensor tensor;
    std::vector<double> buffer;
  };
  const std::vector<Entry>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }
  void clear();

 private:
  std::vector<Entry> entries_;
  std::unordered_map<const TensorImpl*, size_t> index_;
};

struct SweepState;

// Context handed to a recorded operation's gradient rule during the reverse
// sweep.
class SweepCtx {
 public:
  explicit SweepCtx(SweepState* state) : state_(state) {}
  // Gradient of the loss w.r.t. an op output; null if the output is unused.
  const std::vector<double>* out_grad(const Tensor& t) const;
  // Gradient buffer of an op input, created zeroed on first touch.
  std::vector<double>& in_grad(const Tensor& t);

 private:
  SweepState* state_;
};

// Reverse-mode tape. Ops append themselves in execution order, so inputs
// always precede their consumers; the reverse sweep visits consumers first.
class Tape {
 public:
  struct Node {
    std::function<void(SweepCtx&)> backward;
    const TensorImpl* output = nullptr;
    uint64_t flops = 0;
  };

  void record(Tensor output, std::function<void(SweepCtx&)> backward,
              uint64_t bwd_flops);
  void mark_produced(const Tensor& t);
  bool produced(const TensorImpl* impl) const;

  // Accumulates gradients of `loss` into tensor.grad for every reachable
  // tensor with requires_grad set. d(loss)/d(loss) = 1.
  void backward(const Tensor& loss);
  // Same sweep, but leaf gradients (scaled by `seed`) are accumulated into
  // `sink` instead of the tensors, leaving shared parameters untouched.
  void backward(const Tensor& loss, GradMap& sink, double seed = 1.0);

  size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  void add_forward_flops(uint64_t f) { forward_flops_ += f; }
  uint64_t forward_flops() const { return forward_flops_; }
  uint64_t backward_flops() const { return backward_flops_; }

  // Process-wide count of reverse sweeps, for checking that evaluation-only
  // phases really do no gradient work.
  static uint64_t total_backward_calls();

 private:
  void sweep(const Tensor& loss, double seed, SweepState& state);

  std::vector<Node> nodes_;
  std::unordered_map<const TensorImpl*, char> produced_;
  uint64_t forward_flops_ = 0;
  uint64_t backward_flops_ = 0;
};

// ---- Operations ------------------------------------------------------------
// All ops run eagerly; when `tp` is non-null and an input requires a gradient
// the op also records its rule. A null tape gives plain inference.

// a[..,k] * b[k,n]; leading dims of `a` are treated as rows.
Tensor matmul(Tape* tp, const Tensor& a, const Tensor& b);
// a[..,k] * w[k,:cols]  (first `cols` columns of w)
Tensor matmul_cols(Tape* tp, const Tensor& a, const Tensor& w, int cols);
// a[..,rows] * w[:rows,n]  (first `rows` rows of w)
Tensor matmul_rows(Tape* tp, const Tensor& a, const Tensor& w, int rows);

Tensor add(Tape* tp, const Tensor& a, const Tensor& b);        // same shape
Tensor mul(Tape* tp, const Tensor& a, const Tensor& b);        // same shape
Tensor add_bias(Tape* tp, const Tensor& a, const Tensor& bias);            // bias over last dim
Tensor add_bias_prefix(Tape* tp, const Tensor& a, const Tensor& bias, int len);
Tensor affine(Tape* tp, const Tensor& a, double scale, double shift);

Tensor relu(Tape* tp, const Tensor& a);
Tensor sigmoid_op(Tape* tp, const Tensor& a);
Tensor tanh_op(Tape* tp, const Tensor& a);
Tensor exp_op(Tape* tp, const Tensor& a);

// Stabilized log-softmax over the last dim. Rejects non-finite input.
Tensor log_softmax(Tape* tp, const Tensor& a);

Tensor sum_all(Tape* tp, const Tensor& a);   // scalar
Tensor mean_all(Tape* tp, const Tensor& a);  // scalar

Tensor concat_rows(Tape* tp, const std::vector<Tensor>& parts);
Tensor slice_row(Tape* tp, const Tensor& a, int row);              // [1, cols]
Tensor slice_cols(Tape* tp, const Tensor& a, int start, int len);  // channel axis

Tensor reshape(Tape* tp, const Tensor& a, std::vector<int> shape);

// out[i] = a.data[flat_idx[i]] as a 1-D tensor; gradient scatter-adds.
Tensor gather(Tape* tp, const Tensor& a, std::vector<int64_t> flat_idx);

Tensor logaddexp(Tape* tp, const Tensor& a, const Tensor& b);  // same shape

// out[(t*U + u)*h + j] = a[t,j] + b[u,j]; shape {T, U, h}.
Tensor pairwise_sum(Tape* tp, const Tensor& a, const Tensor& b);

// table[V,d] rows selected by ids -> [len(ids), d].
Tensor embedding(Tape* tp, const Tensor& table, const std::vector<int>& ids);

Tensor layer_norm(Tape* tp, const Tensor& a, const Tensor& gamma,
                  const Tensor& beta, double eps = 1e-5);

// Pregenerated inverted-dropout mask: entries are 0 with probability `rate`,
// else 1/(1-rate). Deterministic in `seed`. Apply with mul().
Tensor dropout_mask(const std::vector<int>& shape, double rate, uint64_t seed);

}  // namespace snt
