#include "snt/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <random>
#include <sstream>

#include "snt/kernels.hpp"

namespace snt {

namespace {

std::atomic<uint64_t> g_next_id{1};
std::atomic<uint64_t> g_backward_calls{0};

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ContractError("tensor dimensions must be positive");
    n *= d;
  }
  return n;
}

std::string shape_to_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ContractError(std::string(op) + ": shape mismatch " + a.shape_str() +
                        " vs " + b.shape_str());
  }
}

bool all_finite(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

bool track(Tape* tp, std::initializer_list<const Tensor*> inputs) {
  if (!tp) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

}  // namespace

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  int64_t n = shape_numel(shape);
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data.assign(static_cast<size_t>(n), 0.0);
  t.impl_->requires_grad = requires_grad;
  t.impl_->id = g_next_id.fetch_add(1);
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data,
                         bool requires_grad) {
  int64_t n = shape_numel(shape);
  if (static_cast<int64_t>(data.size()) != n) {
    throw ContractError("from_data: " + std::to_string(data.size()) +
                        " values for shape " + shape_to_str(shape));
  }
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(data);
  t.impl_->requires_grad = requires_grad;
  t.impl_->id = g_next_id.fetch_add(1);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

int Tensor::rows() const {
  return static_cast<int>(numel() / cols());
}

int Tensor::cols() const {
  return impl_->shape.back();
}

double Tensor::value() const {
  if (numel() != 1) {
    throw ContractError("value(): tensor " + shape_str() + " is not scalar");
  }
  return impl_->data[0];
}

std::vector<double>& Tensor::grad() {
  if (impl_->grad.empty()) {
    impl_->grad.assign(impl_->data.size(), 0.0);
  }
  return impl_->grad;
}

void Tensor::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

std::string Tensor::shape_str() const { return shape_to_str(impl_->shape); }

// ---- GradMap ----------------------------------------------------------------

std::vector<double>& GradMap::get_or_create(const Tensor& t) {
  auto it = index_.find(t.impl());
  if (it != index_.end()) return entries_[it->second].buffer;
  index_.emplace(t.impl(), entries_.size());
  entries_.push_back(Entry{t, std::vector<double>(t.data().size(), 0.0)});
  return entries_.back().buffer;
}

const std::vector<double>* GradMap::find(const Tensor& t) const {
  auto it = index_.find(t.impl());
  if (it == index_.end()) return nullptr;
  return &entries_[it->second].buffer;
}

void GradMap::merge_from(const GradMap& other) {
  for (const Entry& e : other.entries_) {
    std::vector<double>& dst = get_or_create(e.tensor);
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += e.buffer[i];
  }
}

void GradMap::fold_into_grads() const {
  for (const Entry& e : entries_) {
    Tensor t = e.tensor;
    std::vector<double>& g = t.grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += e.buffer[i];
  }
}

void GradMap::clear() {
  entries_.clear();
  index_.clear();
}

// ---- Tape -------------------------------------------------------------------

struct SweepState {
  std::unordered_map<const TensorImpl*, std::vector<double>> bufs;
  std::vector<Tensor> touched;  // creation order, for deterministic folds
};

const std::vector<double>* SweepCtx::out_grad(const Tensor& t) const {
  auto it = state_->bufs.find(t.impl());
  if (it == state_->bufs.end()) return nullptr;
  return &it->second;
}

std::vector<double>& SweepCtx::in_grad(const Tensor& t) {
  auto it = state_->bufs.find(t.impl());
  if (it != state_->bufs.end()) return it->second;
  auto& buf = state_->bufs[t.impl()];
  buf.assign(t.data().size(), 0.0);
  state_->touched.push_back(t);
  return buf;
}

void Tape::record(Tensor output, std::function<void(SweepCtx&)> backward,
                  uint64_t bwd_flops) {
  produced_.emplace(output.impl(), 1);
  nodes_.push_back(Node{std::move(backward), output.impl(), bwd_flops});
}

void Tape::mark_produced(const Tensor& t) { produced_.emplace(t.impl(), 1); }

bool Tape::produced(const TensorImpl* impl) const {
  return produced_.count(impl) != 0;
}

uint64_t Tape::total_backward_calls() { return g_backward_calls.load(); }

void Tape::sweep(const Tensor& loss, double seed, SweepState& state) {
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got " + loss.shape_str());
  }
  g_backward_calls.fetch_add(1);
  state.bufs[loss.impl()] = {seed};
  state.touched.push_back(loss);
  SweepCtx ctx(&state);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (state.bufs.find(it->output) == state.bufs.end()) continue;  // unused
    it->backward(ctx);
    backward_flops_ += it->flops;
  }
}

void Tape::backward(const Tensor& loss) {
  SweepState state;
  sweep(loss, 1.0, state);
  for (const Tensor& t : state.touched) {
    if (!t.requires_grad()) continue;
    Tensor mut = t;
    std::vector<double>& g = mut.grad();
    const std::vector<double>& buf = state.bufs[t.impl()];
    for (size_t i = 0; i < g.size(); ++i) g[i] += buf[i];
  }
}

void Tape::backward(const Tensor& loss, GradMap& sink, double seed) {
  SweepState state;
  sweep(loss, seed, state);
  for (const Tensor& t : state.touched) {
    if (!t.requires_grad() || produced(t.impl())) continue;
    std::vector<double>& dst = sink.get_or_create(t);
    const std::vector<double>& buf = state.bufs[t.impl()];
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += buf[i];
  }
}

// ---- Ops --------------------------------------------------------------------

Tensor matmul(Tape* tp, const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() != 2) {
    throw ContractError("matmul: need a[..,k] and b[k,n], got " + a.shape_str() +
                        " and " + b.shape_str());
  }
  const int k = a.cols();
  if (k != b.dim(0)) {
    throw ContractError("matmul: inner dimensions differ, " + a.shape_str() +
                        " vs " + b.shape_str());
  }
  const int m = a.rows();
  const int n = b.dim(1);
  std::vector<int> out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  Tensor out = Tensor::zeros(out_shape, track(tp, {&a, &b}));
  kernels::gemm(a.data().data(), k, b.data().data(), n, out.data().data(), n,
                m, k, n, false);
  if (out.requires_grad()) {
    tp->add_forward_flops(2ull * m * k * n);
    tp->record(
        out,
        [a, b, out, m, k, n](SweepCtx& ctx) {
          const std::vector<double>* g = ctx.out_grad(out);
          if (a.requires_grad()) {
            kernels::gemm_nt(g->data(), n, b.data().data(), n,
                             ctx.in_grad(a).data(), k, m, k, n);
          }
          if (b.requires_grad()) {
            kernels::gemm_tn(a.data().data(), k, g->data(), n,
                             ctx.in_grad(b).data(), n, m, k, n);
          }
        },
        4ull * m * k * n);
  }
  return out;
}

Tensor matmul_cols(Tape* tp, const Tensor& a, const Tensor& w, int cols) {
  if (a.ndim() < 2 || w.ndim() != 2) {
    throw ContractError("matmul_cols: need a[..,k] and w[k,m]");
  }
  const int k = a.cols();
  const int full = w.dim(1);
  if (k != w.dim(0) || cols < 1 || cols > full) {
    throw ContractError("matmul_cols: bad slice " + std::to_string(cols) +
                        " of " + w.shape_str() + " against " + a.shape_str());
  }
  const int m = a.rows();
  std::vector<int> out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(cols);
  Tensor out = Tensor::zeros(out_shape, track(tp, {&a, &w}));
  kernels::gemm(a.data().data(), k, w.data().data(), full, out.data().data(),
                cols, m, k, cols, false);
  if (out.requires_grad()) {
    tp->add_forward_flops(2ull * m * k * cols);
    tp->record(
        out,
        [a, w, out, m, k, cols, full](SweepCtx& ctx) {
          const std::vector<double>* g = ctx.out_grad(out);
          if (a.requires_grad()) {
            kernels::gemm_nt(g->data(), cols, w.data().data(), full,
                             ctx.in_grad(a).data(), k, m, k, cols);
          }
          if (w.requires_grad()) {
            kernels::gemm_tn(a.data().data(), k, g->data(), cols,
                             ctx.in_grad(w).data(), full, m, k, cols);
          }
        },
        4ull * m * k * cols);
  }
  return out;
}

Tensor matmul_rows(Tape* tp, const Tensor& a, const Tensor& w, int rows) {
  if (a.ndim() < 2 || w.ndim() != 2) {
    throw ContractError("matmul_rows: need a[..,r] and w[m,n]");
  }
  const int k = a.cols();
  if (rows < 1 || rows > w.dim(0) || k != rows) {
    throw ContractError("matmul_rows: slice " + std::to_string(rows) + " of " +
                        w.shape_str() + " against " + a.shape_str());
  }
  const int m = a.rows();
  const int n = w.dim(1);
  std::vector<int> out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  Tensor out = Tensor::zeros(out_shape, track(tp, {&a, &w}));
  kernels::gemm(a.data().data(), k, w.data().data(), n, out.data().data(), n,
                m, k, n, false);
  if (out.requires_grad()) {
    tp->add_forward_flops(2ull * m * k * n);
    tp->record(
        out,
        [a, w, out, m, k, n](SweepCtx& ctx) {
          const std::vector<double>* g = ctx.out_grad(out);
          if (a.requires_grad()) {
            kernels::gemm_nt(g->data(), n, w.data().data(), n,
                             ctx.in_grad(a).data(), k, m, k, n);
          }
          if (w.requires_grad()) {
            kernels::gemm_tn(a.data().data(), k, g->data(), n,
                             ctx.in_grad(w).data(), n, m, k, n);
          }
        },
        4ull * m * k * n);
  }
  return out;
}

Tensor add(Tape* tp, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape(), track(tp, {&a, &b}));
  const size_t n = a.data().size();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (out.requires_grad()) {
    tp->add_forward_flops(n);
    tp->record(
        out,
        [a, b, out](SweepCtx& ctx) {
          const std::vector<double>* g = ctx.out_grad(out);
          if (a.requires_grad()) {
            std::vector<double>& ga = ctx.in_grad(a);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i];
          }
          if (b.requires_grad()) {
            std::vector<double>& gb = ctx.in_grad(b);
            for (size_t i = 0; i < gb.size(); ++i) gb[i] += (*g)[i];
          }
        },
        2 * n);
  }
  return out;
}

Tensor mul(Tape* tp, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape(), track(tp, {&a, &b}));
  const size_t n = a.data().size();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (out.requires_grad()) {
    tp->add_forward_flops(n);
    tp->record(
        out,
        [a, b, out](SweepCtx& ctx) {
          const std::vector<double>* g = ctx.out_grad(out);
          if (a.requires_grad()) {
            std::vector<double>& ga = ctx.in_grad(a);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i] * b.data()[i];
          }
          if (b.requires_grad()) {
            std::vector<double>& gb = ctx.in_grad(b);
            for (size_t i = 0; i < gb.size(); ++i) gb[i] += (*g)[i] * a.data()[i];
          }
        },
        2 * n);
  }
  return out;
}

Tensor add_bias(Tape* tp, const Tensor& a, const Tensor& bias) {
  return add_bias_prefix(tp, a, bias, bias.dim(bias.ndim() - 1));
}

Tensor add_bias_prefix(Tape* tp, const Tensor& a, const Tensor& bias, int len) {
  if (bias.ndim() != 1 || len < 1 || len > bias.dim(0) || a.cols() != len) {
    throw ContractError("add_bias: bias " + bias.shape_str() + " prefix " +
                        std::to_string(len) + " against " + a.shape_str());
  }
  Tensor out = Tensor::zeros(a.shape(), track(tp, {&a, &bias}));
  const int rows = a.rows();
  for (int r = 0; r < rows; ++r) {
    const double* ar = a.data().data() + static_cast<size_t>(r) * len;
    double* or_ = out.data().data() + static_cast<size_t>(r) * len;
    for (int j = 0; j < len; ++j) or_[j] = ar[j] + bias.data()[j];
  }
  if (out.requires_grad()) {
    tp->add_forward_flops(static_cast<uint64_t>(rows) * len);
    tp->record(
        out,
        [a, bias, out, rows, len](SweepCtx& ctx) {
          const std::vector<double>* g = ctx.out_grad(out);
          if (a.requires_grad()) {
            std::vector<double>& ga = ctx.in_grad(a);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i];
          }
          if (bias.requires_grad()) {
            std::vector<double>& gb = ctx.in_grad(bias);
            for (int r = 0; r < rows; ++r) {
              const double* gr = g->data() + static_cast<size_t>(r) * len;
              for (int j = 0; j < len; ++j) gb[j] += gr[j];
            }
          }
        },
        2ull * rows * len);
  }
  return out;
}

Tensor affine(Tape* tp, const Tensor& a, double scale, double shift) {
  Tensor out = Tensor::zeros(a.shape(), track(tp, {&a}));
  const size_t n = a.data().size();
  for (size_t i = 0; i < n; ++i) out.data()[i] = scale * a.data()[i] + shift;
  if (out.requires_grad()) {
    tp->add_forward_flops(2 * n);
    tp->record(
        out,
        [a, out, scale](SweepCtx& ctx) {
          const std::vector<double>* g = ctx.out_grad(out);
          std::vector<double>& ga = ctx.in_grad(a);
          for (size_t i = 0; i < ga.size(); ++i) ga[i] += scale * (*g)[i];
        },
        n);
  }
  return out;
}

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(Tape* tp, const Tensor& a, Fwd fwd, Bwd bwd_factor,
                const char* /*name*/) {
  Tensor out = Tensor::zeros(a.shape(), track(tp, {&a}));
  const size_t n = a.data().size();
  for (size_t i = 0; i < n; ++i) out.data()[i] = fwd(a.data()[i]);
  if (out.requires_grad()) {
    tp->add_forward_flops(n);
    tp->record(
        out,
        [a, out, bwd_factor](SweepCtx& ctx) {
          const std::vector<double>* g = ctx.out_grad(out);
          std::vector<double>& ga = ctx.in_grad(a);
          for (size_t i = 0; i < ga.size(); ++i) {
            ga[i] += (*g)[i] * bwd_factor(a.data()[i], out.data()[i]);
          }
        },
        2 * n);
  }
  return out;
}

}  // namespace

Tensor relu(Tape* tp, const Tensor& a) {
  return unary_op(
      tp, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; }, "relu");
}

Tensor sigmoid_op(Tape* tp, const Tensor& a) {
  return unary_op(
      tp, a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

Tensor tanh_op(Tape* tp, const Tensor& a) {
  return unary_op(
      tp, a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; }, "tanh");
}

Tensor exp_op(Tape* tp, const Tensor& a) {
  return unary_op(
      tp, a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; }, "exp");
}

Tensor log_softmax(Tape* tp, const Tensor& a) {
  if (a.cols() < 1) throw ContractError("log_softmax: empty last dim");
  if (!all_finite(a.data())) {
    throw NumericError("log_softmax: non-finite input");
  }
  const int rows = a.rows();
  const int v = a.cols();
  Tensor out = Tensor::zeros(a.shape(), track(tp, {&a}));
  for (int r = 0; r < rows; ++r) {
    const double* x = a.data().data() + static_cast<size_t>(r) * v;
    double* y = out.data().data() + static_cast<size_t>(r) * v;
    double mx = x[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (int j = 0; j < v; ++j) s += std::exp(x[j] - mx);
    const double lse = mx + std::log(s);
    for (int j = 0; j < v; ++j) y[j] = x[j] - lse;
  }
  if (out.requires_grad()) {
    tp->add_forward_flops(5ull * rows * v);
    tp->record(
        out,
        [a, out, rows, v](SweepCtx& ctx) {
          const std::vector<double>* g = ctx.out_grad(out);
          std::vector<double>& ga = ctx.in_grad(a);
          for (int r = 0; r < rows; ++r) {
            const double* gr = g->data() + static_cast<size_t>(r) * v;
            const double* y = out.data().data() + static_cast<size_t>(r) * v;
            double gsum = 0.0;
            for (int j = 0; j < v; ++j) gsum += gr[j];
            double* gar = ga.data() + static_cast<size_t>(r) * v;
            for (int j = 0; j < v; ++j) {
              gar[j] += gr[j] - std::exp(y[j]) * gsum;
            }
          }
        },
        4ull * rows * v);
  }
  return out;
}

Tensor sum_all(Tape* tp, const Tensor& a) {
  Tensor out = Tensor::zeros({1}, track(tp, {&a}));
  double s = 0.0;
  for (double x : a.data()) s += x;
  out.data()[0] = s;
  if (out.requires_grad()) {
    tp->add_forward_flops(a.data().size());
    tp->record(
        out,
        [a, out](SweepCtx& ctx) {
          const double g = (*ctx.out_grad(out))[0];
          std::vector<double>& ga = ctx.in_grad(a);
          for (size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        },
        a.data().size());
  }
  return out;
}

Tensor mean_all(Tape* tp, const Tensor& a) {
  Tensor s = sum_all(tp, a);
  return affine(tp, s, 1.0 / static_cast<double>(a.numel()), 0.0);
}

Tensor concat_rows(Tape* tp, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const int n = parts[0].cols();
  int total_rows = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    if (p.cols() != n) {
      throw ContractError("concat_rows: column mismatch " + p.shape_str());
    }
    total_rows += p.rows();
    rg = rg || (tp && p.requires_grad());
  }
  Tensor out = Tensor::zeros({total_rows, n}, rg);
  int row = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data().begin(), p.data().end(),
              out.data().begin() + static_cast<size_t>(row) * n);
    row += p.rows();
  }
  if (out.requires_grad()) {
    tp->record(
        out,
        [parts, out, n](SweepCtx& ctx) {
          const std::vector<double>* g = ctx.out_grad(out);
          int row = 0;
          for (const Tensor& p : parts) {
            if (p.requires_grad()) {
              std::vector<double>& gp = ctx.in_grad(p);
              const double* src = g->data() + static_cast<size_t>(row) * n;
              for (size_t i = 0; i < gp.size(); ++i) gp[i] += src[i];
            }
            row += p.rows();
          }
        },
        out.data().size());
  }
  return out;
}

Tensor slice_row(Tape* tp, const Tensor& a, int row) {
  const int n = a.cols();
  const int rows = a.rows();
  if (row < 0 || row >= rows) {
    throw ContractError("slice_row: row " + std::to_string(row) + " of " +
                        a.shape_str());
  }
  Tensor out = Tensor::zeros({1, n}, track(tp, {&a}));
  std::copy(a.data().begin() + static_cast<size_t>(row) * n,
            a.data().begin() + static_cast<size_t>(row + 1) * n,
            out.data().begin());
  if (out.requires_grad()) {
    tp->record(
        out,
        [a, out, row, n](SweepCtx& ctx) {
          const std::vector<double>* g = ctx.out_grad(out);
          std::vector<double>& ga = ctx.in_grad(a);
          double* dst = ga.data() + static_cast<size_t>(row) * n;
          for (int j = 0; j < n; ++j) dst[j] += (*g)[j];
        },
        n);
  }
  return out;
}

Tensor slice_cols(Tape* tp, const Tensor& a, int start, int len) {
  const int n = a.cols();
  if (start < 0 || len < 1 || start + len > n) {
    throw ContractError("slice_cols: [" + std::to_string(start) + "," +
                        std::to_string(start + len) + ") of " + a.shape_str());
  }
  const int rows = a.rows();
  std::vector<int> out_shape = a.shape();
  out_shape.back() = len;
  Tensor out = Tensor::zeros(out_shape, track(tp, {&a}));
  for (int r = 0; r < rows; ++r) {
    const double* src = a.data().data() + static_cast<size_t>(r) * n + start;
    double* dst = out.data().data() + static_cast<size_t>(r) * len;
    std::copy(src, src + len, dst);
  }
  if (out.requires_grad()) {
    tp->record(
        out,
        [a, out, start, len, n, rows](SweepCtx& ctx) {
          const std::vector<double>* g = ctx.out_grad(out);
          std::vector<double>& ga = ctx.in_grad(a);
          for (int r = 0; r < rows; ++r) {
            const double* src = g->data() + static_cast<size_t>(r) * len;
            double* dst = ga.data() + static_cast<size_t>(r) * n + start;
            for (int j = 0; j < len; ++j) dst[j] += src[j];
          }
        },
        out.data().size());
  }
  return out;
}

Tensor reshape(Tape* tp, const Tensor& a, std::vector<int> shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ContractError("reshape: " + a.shape_str() + " to " +
                        shape_to_str(shape));
  }
  Tensor out = Tensor::from_data(std::move(shape), a.data(),
                                 track(tp, {&a}));
  if (out.requires_grad()) {
    tp->record(
        out,
        [a, out](SweepCtx& ctx) {
          const std::vector<double>* g = ctx.out_grad(out);
          std::vector<double>& ga = ctx.in_grad(a);
          for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i];
        },
        a.data().size());
  }
  return out;
}

Tensor gather(Tape* tp, const Tensor& a, std::vector<int64_t> flat_idx) {
  const int64_t n = a.numel();
  for (int64_t idx : flat_idx) {
    if (idx < 0 || idx >= n) {
      throw ContractError("gather: index " + std::to_string(idx) +
                          " out of range for " + a.shape_str());
    }
  }
  Tensor out = Tensor::zeros({static_cast<int>(flat_idx.size())},
                             track(tp, {&a}));
  for (size_t i = 0; i < flat_idx.size(); ++i) {
    out.data()[i] = a.data()[static_cast<size_t>(flat_idx[i])];
  }
  if (out.requires_grad()) {
    tp->record(
        out,
        [a, out, flat_idx = std::move(flat_idx)](SweepCtx& ctx) {
          const std::vector<double>* g = ctx.out_grad(out);
          std::vector<double>& ga = ctx.in_grad(a);
          for (size_t i = 0; i < flat_idx.size(); ++i) {
            ga[static_cast<size_t>(flat_idx[i])] += (*g)[i];
          }
        },
        flat_idx.size());
  }
  return out;
}

Tensor logaddexp(Tape* tp, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "logaddexp");
  Tensor out = Tensor::zeros(a.shape(), track(tp, {&a, &b}));
  const size_t n = a.data().size();
  for (size_t i = 0; i < n; ++i) {
    const double x = a.data()[i];
    const double y = b.data()[i];
    const double mx = std::max(x, y);
    out.data()[i] = std::isinf(mx) && mx < 0
                        ? mx
                        : mx + std::log1p(std::exp(std::min(x, y) - mx));
  }
  if (out.requires_grad()) {
    tp->add_forward_flops(4 * n);
    tp->record(
        out,
        [a, b, out](SweepCtx& ctx) {
          const std::vector<double>* g = ctx.out_grad(out);
          const size_t n = out.data().size();
          for (size_t i = 0; i < n; ++i) {
            const double o = out.data()[i];
            if (std::isinf(o) && o < 0) continue;
            if (a.requires_grad()) {
              ctx.in_grad(a)[i] += (*g)[i] * std::exp(a.data()[i] - o);
            }
            if (b.requires_grad()) {
              ctx.in_grad(b)[i] += (*g)[i] * std::exp(b.data()[i] - o);
            }
          }
        },
        6 * n);
  }
  return out;
}

Tensor pairwise_sum(Tape* tp, const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols()) {
    throw ContractError("pairwise_sum: need [T,h] and [U,h], got " +
                        a.shape_str() + " and " + b.shape_str());
  }
  const int t_n = a.dim(0), u_n = b.dim(0), h = a.cols();
  Tensor out = Tensor::zeros({t_n, u_n, h}, track(tp, {&a, &b}));
  for (int t = 0; t < t_n; ++t) {
    const double* ar = a.data().data() + static_cast<size_t>(t) * h;
    for (int u = 0; u < u_n; ++u) {
      const double* br = b.data().data() + static_cast<size_t>(u) * h;
      double* o = out.data().data() + (static_cast<size_t>(t) * u_n + u) * h;
      for (int j = 0; j < h; ++j) o[j] = ar[j] + br[j];
    }
  }
  if (out.requires_grad()) {
    tp->add_forward_flops(static_cast<uint64_t>(t_n) * u_n * h);
    tp->record(
        out,
        [a, b, out, t_n, u_n, h](SweepCtx& ctx) {
          const std::vector<double>* g = ctx.out_grad(out);
          if (a.requires_grad()) {
            std::vector<double>& ga = ctx.in_grad(a);
            for (int t = 0; t < t_n; ++t) {
              double* dst = ga.data() + static_cast<size_t>(t) * h;
              for (int u = 0; u < u_n; ++u) {
                const double* src =
                    g->data() + (static_cast<size_t>(t) * u_n + u) * h;
                for (int j = 0; j < h; ++j) dst[j] += src[j];
              }
            }
          }
          if (b.requires_grad()) {
            std::vector<double>& gb = ctx.in_grad(b);
            for (int u = 0; u < u_n; ++u) {
              double* dst = gb.data() + static_cast<size_t>(u) * h;
              for (int t = 0; t < t_n; ++t) {
                const double* src =
                    g->data() + (static_cast<size_t>(t) * u_n + u) * h;
                for (int j = 0; j < h; ++j) dst[j] += src[j];
              }
            }
          }
        },
        2ull * t_n * u_n * h);
  }
  return out;
}

Tensor embedding(Tape* tp, const Tensor& table, const std::vector<int>& ids) {
  if (table.ndim() != 2) throw ContractError("embedding: table must be 2-D");
  const int v = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw ContractError("embedding: id " + std::to_string(id) +
                          " outside table " + table.shape_str());
    }
  }
  Tensor out = Tensor::zeros({static_cast<int>(ids.size()), d},
                             track(tp, {&table}));
  for (size_t i = 0; i < ids.size(); ++i) {
    const double* src =
        table.data().data() + static_cast<size_t>(ids[i]) * d;
    std::copy(src, src + d, out.data().data() + i * d);
  }
  if (out.requires_grad()) {
    tp->record(
        out,
        [table, out, ids, d](SweepCtx& ctx) {
          const std::vector<double>* g = ctx.out_grad(out);
          std::vector<double>& gt = ctx.in_grad(table);
          for (size_t i = 0; i < ids.size(); ++i) {
            double* dst = gt.data() + static_cast<size_t>(ids[i]) * d;
            const double* src = g->data() + i * d;
            for (int j = 0; j < d; ++j) dst[j] += src[j];
          }
        },
        ids.size() * d);
  }
  return out;
}

Tensor layer_norm(Tape* tp, const Tensor& a, const Tensor& gamma,
                  const Tensor& beta, double eps) {
  const int d = a.cols();
  if (gamma.numel() != d || beta.numel() != d) {
    throw ContractError("layer_norm: scale/shift must match last dim of " +
                        a.shape_str());
  }
  const int rows = a.rows();
  Tensor out = Tensor::zeros(a.shape(), track(tp, {&a, &gamma, &beta}));
  std::vector<double> inv_std(rows), means(rows);
  for (int r = 0; r < rows; ++r) {
    const double* x = a.data().data() + static_cast<size_t>(r) * d;
    double m = 0.0;
    for (int j = 0; j < d; ++j) m += x[j];
    m /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (x[j] - m) * (x[j] - m);
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    means[r] = m;
    inv_std[r] = is;
    double* y = out.data().data() + static_cast<size_t>(r) * d;
    for (int j = 0; j < d; ++j) {
      y[j] = (x[j] - m) * is * gamma.data()[j] + beta.data()[j];
    }
  }
  if (out.requires_grad()) {
    tp->add_forward_flops(8ull * rows * d);
    tp->record(
        out,
        [a, gamma, beta, out, rows, d, means = std::move(means),
         inv_std = std::move(inv_std)](SweepCtx& ctx) {
          const std::vector<double>* g = ctx.out_grad(out);
          for (int r = 0; r < rows; ++r) {
            const double* x = a.data().data() + static_cast<size_t>(r) * d;
            const double* gr = g->data() + static_cast<size_t>(r) * d;
            const double m = means[r];
            const double is = inv_std[r];
            double sum_gg = 0.0, sum_ggx = 0.0;
            for (int j = 0; j < d; ++j) {
              const double xhat = (x[j] - m) * is;
              const double gg = gr[j] * gamma.data()[j];
              sum_gg += gg;
              sum_ggx += gg * xhat;
            }
            if (a.requires_grad()) {
              std::vector<double>& ga = ctx.in_grad(a);
              double* gar = ga.data() + static_cast<size_t>(r) * d;
              for (int j = 0; j < d; ++j) {
                const double xhat = (x[j] - m) * is;
                const double gg = gr[j] * gamma.data()[j];
                gar[j] += is * (gg - sum_gg / d - xhat * sum_ggx / d);
              }
            }
            if (gamma.requires_grad()) {
              std::vector<double>& gg_ = ctx.in_grad(gamma);
              for (int j = 0; j < d; ++j) {
                gg_[j] += gr[j] * (x[j] - m) * is;
              }
            }
            if (beta.requires_grad()) {
              std::vector<double>& gb = ctx.in_grad(beta);
              for (int j = 0; j < d; ++j) gb[j] += gr[j];
            }
          }
        },
        12ull * rows * d);
  }
  return out;
}

Tensor dropout_mask(const std::vector<int>& shape, double rate, uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ContractError("dropout_mask: rate must be in [0,1), got " +
                        std::to_string(rate));
  }
  Tensor mask = Tensor::zeros(shape, false);
  if (rate == 0.0) {
    std::fill(mask.data().begin(), mask.data().end(), 1.0);
    return mask;
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - rate);
  for (double& m : mask.data()) {
    m = unif(rng) < rate ? 0.0 : keep_scale;
  }
  return mask;
}

}  // namespace snt
