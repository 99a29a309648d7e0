#include "fsrl/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

#include "fsrl/kernels.hpp"

namespace fsrl {

namespace {

thread_local Tape* t_current_tape = nullptr;
thread_local bool t_grad_enabled = true;
thread_local KinkScope* t_kink_scope = nullptr;
std::atomic<uint64_t> g_tape_counter{1};

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

void check_positive_shape(const Shape& s) {
  for (int64_t d : s)
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + fmt_shape(s));
}

}  // namespace

Tensor wrap_data(std::shared_ptr<detail::TensorData> d) { return Tensor(std::move(d)); }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_positive_shape(shape);
  auto d = std::make_shared<detail::TensorData>();
  d->values.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  d->shape = std::move(shape);
  d->requires_grad = requires_grad;
  return wrap_data(std::move(d));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  check_positive_shape(shape);
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw ShapeError(strprintf("from_values: shape %s does not match %zu values",
                               fmt_shape(shape).c_str(), values.size()));
  auto d = std::make_shared<detail::TensorData>();
  d->shape = std::move(shape);
  d->values = std::move(values);
  d->requires_grad = requires_grad;
  return wrap_data(std::move(d));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  auto d = std::make_shared<detail::TensorData>();
  d->shape = {};
  d->values = {value};
  d->requires_grad = requires_grad;
  return wrap_data(std::move(d));
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.values()) v = rng.normal(0.0, stddev);
  return t;
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

int64_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("rows(): tensor is not rank-2: " + fmt_shape(shape()));
  return dim(0);
}

int64_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("cols(): tensor is not rank-2: " + fmt_shape(shape()));
  return dim(1);
}

double Tensor::item() const {
  if (numel() != 1)
    throw ShapeError("item(): tensor is not scalar, shape " + fmt_shape(shape()));
  return d_->values[0];
}

std::span<double> Tensor::grad() const {
  ensure_grad_alloc();
  return d_->grad;
}

void Tensor::ensure_grad_alloc() const {
  if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0);
}

void Tensor::zero_grad() const {
  if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

void Tensor::drop_grad() const { d_->grad.clear(); }

Tensor Tensor::clone(bool requires_grad) const {
  auto d = std::make_shared<detail::TensorData>();
  d->shape = d_->shape;
  d->values = d_->values;
  d->requires_grad = requires_grad;
  return wrap_data(std::move(d));
}

// ---- Tape ----

Tape::Tape() : id_(g_tape_counter.fetch_add(1)), prev_(t_current_tape) {
  t_current_tape = this;
}

Tape::~Tape() { t_current_tape = prev_; }

Tape* Tape::current() { return t_current_tape; }

void Tape::push_node(std::function<void()> fn, std::initializer_list<Tensor> inputs,
                     const Tensor& out) {
  nodes_.push_back(std::move(fn));
  for (const Tensor& t : inputs)
    if (t.requires_grad()) tracked_.push_back(t.data_ptr());
  tracked_.push_back(out.data_ptr());
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw std::logic_error("backward: undefined loss tensor");
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + fmt_shape(loss.shape()));
  if (!loss.requires_grad() || loss.data_ptr()->tape_id == 0)
    throw std::logic_error("backward: loss is detached (no grad-requiring ancestors on a tape)");
  if (loss.data_ptr()->tape_id != id_)
    throw std::logic_error("backward: loss was not produced on this tape");
  if (backward_called_)
    throw std::logic_error("backward already called on this tape; build a fresh tape");
  backward_called_ = true;

  for (auto& d : tracked_)
    if (d->grad.empty()) d->grad.assign(d->values.size(), 0.0);
  loss.data_ptr()->grad[0] = 1.0;

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

bool grad_enabled() { return t_grad_enabled; }

KinkScope::KinkScope() : min_(std::numeric_limits<double>::infinity()), prev_(t_kink_scope) {
  t_kink_scope = this;
}

KinkScope::~KinkScope() { t_kink_scope = prev_; }

bool KinkScope::active() { return t_kink_scope != nullptr; }

void KinkScope::report(double distance) {
  for (KinkScope* s = t_kink_scope; s; s = s->prev_)
    if (distance < s->min_) s->min_ = distance;
}

// ---- op plumbing ----

namespace {

bool any_requires_grad(std::initializer_list<Tensor> inputs) {
  for (const Tensor& t : inputs)
    if (t.requires_grad()) return true;
  return false;
}

// Registers the backward closure for an op whose inputs include at least one
// grad-requiring tensor. Outside a tape (and outside NoGradGuard) such an op
// is a bug in the caller.
void record(std::initializer_list<Tensor> inputs, Tensor& out, std::function<void()> backward_fn) {
  if (!any_requires_grad(inputs)) return;
  if (!t_grad_enabled) return;
  Tape* tape = t_current_tape;
  if (!tape)
    throw std::logic_error(
        "differentiable op on a grad-requiring tensor outside any Tape scope; "
        "wrap the computation in a Tape or a NoGradGuard");
  out.set_requires_grad(true);
  out.data_ptr()->tape_id = tape->id();
  tape->push_node(std::move(backward_fn), inputs, out);
}

enum class Bcast { same, row, scalar_rhs, scalar_lhs };

Bcast classify_broadcast(const Tensor& a, const Tensor& b, const char* opname) {
  if (a.shape() == b.shape()) return Bcast::same;
  if (b.rank() == 0) return Bcast::scalar_rhs;
  if (a.rank() == 0) return Bcast::scalar_lhs;
  if (a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0)) return Bcast::row;
  throw ShapeError(strprintf("%s: incompatible shapes %s vs %s", opname,
                             fmt_shape(a.shape()).c_str(), fmt_shape(b.shape()).c_str()));
}

const double* dataof(const Tensor& t) { return t.values().data(); }

}  // namespace

// ---- matrix ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError(strprintf("matmul: inner dimensions do not conform: %s vs %s",
                               fmt_shape(a.shape()).c_str(), fmt_shape(b.shape()).c_str()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  kern::matmul(dataof(a), dataof(b), out.values().data(), m, k, n);
  record({a, b}, out, [a, b, out, m, k, n]() mutable {
    const double* g = out.grad().data();
    if (a.requires_grad()) kern::matmul_nt_acc(g, dataof(b), a.grad().data(), m, n, k);
    if (b.requires_grad()) kern::matmul_tn_acc(dataof(a), g, b.grad().data(), m, k, n);
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected rank-2, got " + fmt_shape(a.shape()));
  const int64_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  const double* av = dataof(a);
  double* ov = out.values().data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
  record({a}, out, [a, out, m, n]() mutable {
    if (!a.requires_grad()) return;
    const double* g = out.grad().data();
    double* ga = a.grad().data();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
  return out;
}

// ---- elementwise binary ----

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
  const Bcast kind = classify_broadcast(a, b, name);
  const Tensor& big = (kind == Bcast::scalar_lhs) ? b : a;
  Tensor out = Tensor::zeros(big.shape());
  fwd(kind, a, b, out);
  record({a, b}, out, [kind, a, b, out, bwd]() mutable { bwd(kind, a, b, out); });
  return out;
}

// Reads the right-hand operand at flat index i under the given broadcast
// kind. Under scalar_lhs the right operand is the full-shaped one.
inline double bval(Bcast kind, const Tensor& b, int64_t i, int64_t ncols) {
  switch (kind) {
    case Bcast::same:
    case Bcast::scalar_lhs:
      return b.values()[static_cast<size_t>(i)];
    case Bcast::row:
      return b.values()[static_cast<size_t>(i % ncols)];
    default:  // scalar_rhs
      return b.values()[0];
  }
}

inline int64_t ncols_of(const Tensor& t) { return t.rank() == 2 ? t.dim(1) : t.numel(); }

// Accumulates g into the gradient of the right-hand operand.
inline void bacc(Bcast kind, const Tensor& b, int64_t i, int64_t ncols, double g) {
  switch (kind) {
    case Bcast::same:
    case Bcast::scalar_lhs:
      b.grad()[static_cast<size_t>(i)] += g;
      break;
    case Bcast::row:
      b.grad()[static_cast<size_t>(i % ncols)] += g;
      break;
    default:  // scalar_rhs
      b.grad()[0] += g;
      break;
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add",
      [](Bcast kind, const Tensor& a, const Tensor& b, Tensor& out) {
        const int64_t n = out.numel(), nc = ncols_of(out);
        auto ov = out.values();
        for (int64_t i = 0; i < n; ++i) {
          const double av = (kind == Bcast::scalar_lhs) ? a.values()[0]
                                                        : a.values()[static_cast<size_t>(i)];
          ov[static_cast<size_t>(i)] = av + bval(kind, b, i, nc);
        }
      },
      [](Bcast kind, const Tensor& a, const Tensor& b, const Tensor& out) {
        const int64_t n = out.numel(), nc = ncols_of(out);
        auto g = out.grad();
        if (a.requires_grad()) {
          if (kind == Bcast::scalar_lhs)
            for (int64_t i = 0; i < n; ++i) a.grad()[0] += g[static_cast<size_t>(i)];
          else
            kern::axpy(1.0, g.data(), a.grad().data(), n);
        }
        if (b.requires_grad())
          for (int64_t i = 0; i < n; ++i) bacc(kind, b, i, nc, g[static_cast<size_t>(i)]);
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub",
      [](Bcast kind, const Tensor& a, const Tensor& b, Tensor& out) {
        const int64_t n = out.numel(), nc = ncols_of(out);
        auto ov = out.values();
        for (int64_t i = 0; i < n; ++i) {
          const double av = (kind == Bcast::scalar_lhs) ? a.values()[0]
                                                        : a.values()[static_cast<size_t>(i)];
          ov[static_cast<size_t>(i)] = av - bval(kind, b, i, nc);
        }
      },
      [](Bcast kind, const Tensor& a, const Tensor& b, const Tensor& out) {
        const int64_t n = out.numel(), nc = ncols_of(out);
        auto g = out.grad();
        if (a.requires_grad()) {
          if (kind == Bcast::scalar_lhs)
            for (int64_t i = 0; i < n; ++i) a.grad()[0] += g[static_cast<size_t>(i)];
          else
            kern::axpy(1.0, g.data(), a.grad().data(), n);
        }
        if (b.requires_grad())
          for (int64_t i = 0; i < n; ++i) bacc(kind, b, i, nc, -g[static_cast<size_t>(i)]);
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul",
      [](Bcast kind, const Tensor& a, const Tensor& b, Tensor& out) {
        const int64_t n = out.numel(), nc = ncols_of(out);
        auto ov = out.values();
        for (int64_t i = 0; i < n; ++i) {
          const double av = (kind == Bcast::scalar_lhs) ? a.values()[0]
                                                        : a.values()[static_cast<size_t>(i)];
          ov[static_cast<size_t>(i)] = av * bval(kind, b, i, nc);
        }
      },
      [](Bcast kind, const Tensor& a, const Tensor& b, const Tensor& out) {
        const int64_t n = out.numel(), nc = ncols_of(out);
        auto g = out.grad();
        if (a.requires_grad()) {
          for (int64_t i = 0; i < n; ++i) {
            const double gi = g[static_cast<size_t>(i)] * bval(kind, b, i, nc);
            if (kind == Bcast::scalar_lhs)
              a.grad()[0] += g[static_cast<size_t>(i)] * bval(kind, b, i, nc);
            else
              a.grad()[static_cast<size_t>(i)] += gi;
          }
        }
        if (b.requires_grad()) {
          for (int64_t i = 0; i < n; ++i) {
            const double av = (kind == Bcast::scalar_lhs) ? a.values()[0]
                                                          : a.values()[static_cast<size_t>(i)];
            bacc(kind, b, i, nc, g[static_cast<size_t>(i)] * av);
          }
        }
      });
}

Tensor mul_scalar(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.values()[static_cast<size_t>(i)] = c * a.at(i);
  record({a}, out, [a, out, c]() mutable {
    if (a.requires_grad()) kern::axpy(c, out.grad().data(), a.grad().data(), a.numel());
  });
  return out;
}

Tensor add_scalar(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.values()[static_cast<size_t>(i)] = a.at(i) + c;
  record({a}, out, [a, out]() mutable {
    if (a.requires_grad()) kern::axpy(1.0, out.grad().data(), a.grad().data(), a.numel());
  });
  return out;
}

// ---- elementwise unary ----

namespace {

template <typename Fwd, typename Grad>
Tensor unary_op(const Tensor& a, Fwd fwd, Grad grad_fn) {
  Tensor out = Tensor::zeros(a.shape());
  const int64_t n = a.numel();
  fwd(a.values().data(), out.values().data(), n);
  record({a}, out, [a, out, grad_fn]() mutable {
    if (!a.requires_grad()) return;
    const int64_t n = a.numel();
    auto g = out.grad();
    auto ga = a.grad();
    const auto av = a.values();
    const auto ov = out.values();
    for (int64_t i = 0; i < n; ++i) {
      const size_t s = static_cast<size_t>(i);
      ga[s] += g[s] * grad_fn(av[s], ov[s]);
    }
  });
  return out;
}

}  // namespace

Tensor relu(const Tensor& a) {
  if (KinkScope::active())
    for (double v : a.values()) KinkScope::report(std::fabs(v));
  return unary_op(
      a, [](const double* x, double* y, int64_t n) { kern::relu(x, y, n); },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor abs(const Tensor& a) {
  if (KinkScope::active())
    for (double v : a.values())
      if (v != 0.0) KinkScope::report(std::fabs(v));
  return unary_op(
      a,
      [](const double* x, double* y, int64_t n) {
        for (int64_t i = 0; i < n; ++i) y[i] = std::fabs(x[i]);
      },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor sign(const Tensor& a) {
  if (KinkScope::active())
    for (double v : a.values())
      if (v != 0.0) KinkScope::report(std::fabs(v));
  return unary_op(
      a,
      [](const double* x, double* y, int64_t n) {
        for (int64_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
      },
      [](double, double) { return 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](const double* x, double* y, int64_t n) { kern::exp(x, y, n); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      a,
      [](const double* x, double* y, int64_t n) {
        for (int64_t i = 0; i < n; ++i) y[i] = std::log(x[i]);
      },
      [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, [](const double* x, double* y, int64_t n) { kern::sigmoid(x, y, n); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& a) {
  return unary_op(
      a,
      [](const double* x, double* y, int64_t n) {
        for (int64_t i = 0; i < n; ++i)
          y[i] = x[i] < 0.0 ? x[i] - std::log1p(std::exp(x[i])) : -std::log1p(std::exp(-x[i]));
      },
      [](double x, double) {
        // sigma(-x), computed on the stable side
        return x >= 0.0 ? std::exp(-x) / (1.0 + std::exp(-x)) : 1.0 / (1.0 + std::exp(x));
      });
}

// ---- row-structured ops ----

namespace {

std::pair<int64_t, int64_t> as_rows(const Tensor& a, const char* name) {
  if (a.rank() == 2) return {a.dim(0), a.dim(1)};
  if (a.rank() == 1) return {1, a.dim(0)};
  throw ShapeError(strprintf("%s: expected rank-1 or rank-2, got %s", name,
                             fmt_shape(a.shape()).c_str()));
}

}  // namespace

Tensor softmax_rows(const Tensor& a) {
  auto [m, n] = as_rows(a, "softmax_rows");
  Tensor out = Tensor::zeros(a.shape());
  kern::softmax_rows(dataof(a), out.values().data(), m, n);
  record({a}, out, [a, out, m = m, n = n]() mutable {
    if (!a.requires_grad()) return;
    const double* g = out.grad().data();
    const double* y = out.values().data();
    double* ga = a.grad().data();
    for (int64_t i = 0; i < m; ++i) {
      const double* gi = g + i * n;
      const double* yi = y + i * n;
      double dot = 0.0;
      for (int64_t j = 0; j < n; ++j) dot += gi[j] * yi[j];
      double* gai = ga + i * n;
      for (int64_t j = 0; j < n; ++j) gai[j] += yi[j] * (gi[j] - dot);
    }
  });
  return out;
}

Tensor log_softmax_rows(const Tensor& a) {
  auto [m, n] = as_rows(a, "log_softmax_rows");
  Tensor out = Tensor::zeros(a.shape());
  kern::log_softmax_rows(dataof(a), out.values().data(), m, n);
  record({a}, out, [a, out, m = m, n = n]() mutable {
    if (!a.requires_grad()) return;
    const double* g = out.grad().data();
    const double* y = out.values().data();
    double* ga = a.grad().data();
    for (int64_t i = 0; i < m; ++i) {
      const double* gi = g + i * n;
      const double* yi = y + i * n;
      double gsum = 0.0;
      for (int64_t j = 0; j < n; ++j) gsum += gi[j];
      double* gai = ga + i * n;
      for (int64_t j = 0; j < n; ++j) gai[j] += gi[j] - std::exp(yi[j]) * gsum;
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  auto [m, n] = as_rows(x, "layer_norm");
  if (gamma.rank() != 1 || gamma.dim(0) != n || beta.rank() != 1 || beta.dim(0) != n)
    throw ShapeError(strprintf("layer_norm: gain/bias %s,%s do not match row width %lld",
                               fmt_shape(gamma.shape()).c_str(), fmt_shape(beta.shape()).c_str(),
                               static_cast<long long>(n)));
  Tensor out = Tensor::zeros(x.shape());
  auto mean_v = std::make_shared<std::vector<double>>(static_cast<size_t>(m));
  auto rstd_v = std::make_shared<std::vector<double>>(static_cast<size_t>(m));
  kern::layernorm_rows(dataof(x), dataof(gamma), dataof(beta), eps, out.values().data(),
                       mean_v->data(), rstd_v->data(), m, n);
  record({x, gamma, beta}, out, [x, gamma, beta, out, mean_v, rstd_v, m = m, n = n]() mutable {
    const double* g = out.grad().data();
    const double* xv = dataof(x);
    const double* gv = dataof(gamma);
    const double nd = static_cast<double>(n);
    for (int64_t i = 0; i < m; ++i) {
      const double mu = (*mean_v)[static_cast<size_t>(i)];
      const double r = (*rstd_v)[static_cast<size_t>(i)];
      const double* gi = g + i * n;
      const double* xi = xv + i * n;
      if (gamma.requires_grad() || beta.requires_grad()) {
        for (int64_t j = 0; j < n; ++j) {
          const double xh = (xi[j] - mu) * r;
          if (gamma.requires_grad()) gamma.grad()[static_cast<size_t>(j)] += gi[j] * xh;
          if (beta.requires_grad()) beta.grad()[static_cast<size_t>(j)] += gi[j];
        }
      }
      if (x.requires_grad()) {
        double m1 = 0.0, m2 = 0.0;
        for (int64_t j = 0; j < n; ++j) {
          const double a = gi[j] * gv[j];
          m1 += a;
          m2 += a * (xi[j] - mu) * r;
        }
        m1 /= nd;
        m2 /= nd;
        double* gx = x.grad().data() + i * n;
        for (int64_t j = 0; j < n; ++j) {
          const double xh = (xi[j] - mu) * r;
          gx[j] += r * (gi[j] * gv[j] - m1 - xh * m2);
        }
      }
    }
  });
  return out;
}

// ---- reductions ----

Tensor sum(const Tensor& a) {
  Tensor out = Tensor::scalar(kern::sum(dataof(a), a.numel()));
  record({a}, out, [a, out]() mutable {
    if (!a.requires_grad()) return;
    const double g = out.grad()[0];
    for (double& v : a.grad()) v += g;
  });
  return out;
}

Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.numel());
  Tensor out = Tensor::scalar(kern::sum(dataof(a), a.numel()) * inv);
  record({a}, out, [a, out, inv]() mutable {
    if (!a.requires_grad()) return;
    const double g = out.grad()[0] * inv;
    for (double& v : a.grad()) v += g;
  });
  return out;
}

// ---- gather / slice / concat ----

Tensor gather_rows(const Tensor& table, std::span<const int32_t> ids) {
  if (table.rank() != 2)
    throw ShapeError("gather_rows: table must be rank-2, got " + fmt_shape(table.shape()));
  const int64_t v = table.dim(0), d = table.dim(1);
  const int64_t n = static_cast<int64_t>(ids.size());
  if (n == 0) throw ShapeError("gather_rows: empty index list");
  for (int32_t id : ids)
    if (id < 0 || id >= v)
      throw ShapeError(strprintf("gather_rows: index %d out of range [0,%lld)", id,
                                 static_cast<long long>(v)));
  Tensor out = Tensor::zeros({n, d});
  const double* tv = dataof(table);
  double* ov = out.values().data();
  for (int64_t i = 0; i < n; ++i)
    std::copy(tv + static_cast<int64_t>(ids[i]) * d, tv + (static_cast<int64_t>(ids[i]) + 1) * d,
              ov + i * d);
  std::vector<int32_t> idv(ids.begin(), ids.end());
  record({table}, out, [table, out, idv = std::move(idv), d]() mutable {
    if (!table.requires_grad()) return;
    const double* g = out.grad().data();
    double* gt = table.grad().data();
    for (size_t i = 0; i < idv.size(); ++i) {
      double* row = gt + static_cast<int64_t>(idv[i]) * d;
      const double* gi = g + static_cast<int64_t>(i) * d;
      for (int64_t j = 0; j < d; ++j) row[j] += gi[j];
    }
  });
  return out;
}

Tensor gather_elements(const Tensor& a, std::span<const std::pair<int64_t, int64_t>> indices) {
  if (a.rank() != 2)
    throw ShapeError("gather_elements: expected rank-2, got " + fmt_shape(a.shape()));
  const int64_t m = a.dim(0), n = a.dim(1);
  const int64_t cnt = static_cast<int64_t>(indices.size());
  if (cnt == 0) throw ShapeError("gather_elements: empty index list");
  for (auto [r, c] : indices)
    if (r < 0 || r >= m || c < 0 || c >= n)
      throw ShapeError(strprintf("gather_elements: index (%lld,%lld) out of range for %s",
                                 static_cast<long long>(r), static_cast<long long>(c),
                                 fmt_shape(a.shape()).c_str()));
  Tensor out = Tensor::zeros({cnt});
  for (int64_t i = 0; i < cnt; ++i)
    out.values()[static_cast<size_t>(i)] = a.at(indices[static_cast<size_t>(i)].first,
                                                indices[static_cast<size_t>(i)].second);
  std::vector<std::pair<int64_t, int64_t>> idx(indices.begin(), indices.end());
  record({a}, out, [a, out, idx = std::move(idx), n]() mutable {
    if (!a.requires_grad()) return;
    auto g = out.grad();
    double* ga = a.grad().data();
    for (size_t i = 0; i < idx.size(); ++i)
      ga[idx[i].first * n + idx[i].second] += g[i];
  });
  return out;
}

Tensor select_cols(const Tensor& a, int64_t start, int64_t count) {
  if (a.rank() != 2)
    throw ShapeError("select_cols: expected rank-2, got " + fmt_shape(a.shape()));
  const int64_t m = a.dim(0), n = a.dim(1);
  if (start < 0 || count <= 0 || start + count > n)
    throw ShapeError(strprintf("select_cols: slice [%lld,%lld) out of range for %s",
                               static_cast<long long>(start),
                               static_cast<long long>(start + count),
                               fmt_shape(a.shape()).c_str()));
  Tensor out = Tensor::zeros({m, count});
  const double* av = dataof(a);
  double* ov = out.values().data();
  for (int64_t i = 0; i < m; ++i)
    std::copy(av + i * n + start, av + i * n + start + count, ov + i * count);
  record({a}, out, [a, out, start, count, n]() mutable {
    if (!a.requires_grad()) return;
    const int64_t m = out.rows();
    const double* g = out.grad().data();
    double* ga = a.grad().data();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < count; ++j) ga[i * n + start + j] += g[i * count + j];
  });
  return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no tensors given");
  const int64_t m = parts[0].rank() == 2
                        ? parts[0].dim(0)
                        : throw ShapeError("concat_cols: expected rank-2 parts");
  int64_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(0) != m)
      throw ShapeError(strprintf("concat_cols: part shape %s does not match %lld rows",
                                 fmt_shape(p.shape()).c_str(), static_cast<long long>(m)));
    total += p.dim(1);
  }
  Tensor out = Tensor::zeros({m, total});
  double* ov = out.values().data();
  int64_t off = 0;
  for (const Tensor& p : parts) {
    const int64_t pn = p.dim(1);
    const double* pv = dataof(p);
    for (int64_t i = 0; i < m; ++i)
      std::copy(pv + i * pn, pv + (i + 1) * pn, ov + i * total + off);
    off += pn;
  }
  std::vector<Tensor> held(parts.begin(), parts.end());
  Tensor anchor;  // any grad-requiring part; record() keys off it
  for (const Tensor& p : parts)
    if (p.requires_grad()) {
      anchor = p;
      break;
    }
  if (anchor.defined()) {
    record({anchor}, out, [held, out, m, total]() mutable {
      const double* g = out.grad().data();
      int64_t off = 0;
      for (Tensor& p : held) {
        const int64_t pn = p.dim(1);
        if (p.requires_grad()) {
          double* gp = p.grad().data();
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < pn; ++j) gp[i * pn + j] += g[i * total + off + j];
        }
        off += pn;
      }
    });
  }
  return out;
}

// ---- sparsity activations ----

namespace {

void check_threshold_shapes(const Tensor& z, const Tensor& theta, const char* name) {
  auto [m, n] = as_rows(z, name);
  (void)m;
  if (theta.rank() != 1 || theta.dim(0) != n)
    throw ShapeError(strprintf("%s: threshold shape %s does not match row width %lld", name,
                               fmt_shape(theta.shape()).c_str(), static_cast<long long>(n)));
}

}  // namespace

Tensor soft_threshold(const Tensor& z, const Tensor& theta) {
  check_threshold_shapes(z, theta, "soft_threshold");
  auto [m, n] = as_rows(z, "soft_threshold");
  Tensor out = Tensor::zeros(z.shape());
  const double* zv = dataof(z);
  const double* tv = dataof(theta);
  double* ov = out.values().data();
  const bool kink = KinkScope::active();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      const double zij = zv[i * n + j];
      const double az = std::fabs(zij);
      const double t = tv[j];
      if (kink) KinkScope::report(std::fabs(az - t));
      const double mag = az - t;
      ov[i * n + j] = mag > 0.0 ? (zij > 0.0 ? mag : -mag) : 0.0;
    }
  record({z, theta}, out, [z, theta, out, m = m, n = n]() mutable {
    const double* g = out.grad().data();
    const double* zv = dataof(z);
    const double* tv = dataof(theta);
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) {
        const double zij = zv[i * n + j];
        if (std::fabs(zij) > tv[j]) {
          const double gij = g[i * n + j];
          if (z.requires_grad()) z.grad()[static_cast<size_t>(i * n + j)] += gij;
          if (theta.requires_grad())
            theta.grad()[static_cast<size_t>(j)] += (zij > 0.0 ? -gij : gij);
        }
      }
  });
  return out;
}

Tensor jump_relu(const Tensor& z, const Tensor& theta) {
  check_threshold_shapes(z, theta, "jump_relu");
  auto [m, n] = as_rows(z, "jump_relu");
  Tensor out = Tensor::zeros(z.shape());
  const double* zv = dataof(z);
  const double* tv = dataof(theta);
  double* ov = out.values().data();
  const bool kink = KinkScope::active();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      const double zij = zv[i * n + j];
      if (kink) KinkScope::report(std::fabs(std::fabs(zij) - tv[j]));
      ov[i * n + j] = std::fabs(zij) > tv[j] ? zij : 0.0;
    }
  record({z, theta}, out, [z, theta, out, m = m, n = n]() mutable {
    if (!z.requires_grad()) return;
    const double* g = out.grad().data();
    const double* zv = dataof(z);
    const double* tv = dataof(theta);
    double* gz = z.grad().data();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j)
        if (std::fabs(zv[i * n + j]) > tv[j]) gz[i * n + j] += g[i * n + j];
  });
  return out;
}

Tensor ste_l0(const Tensor& z, const Tensor& theta, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("ste_l0: eps must be positive");
  check_threshold_shapes(z, theta, "ste_l0");
  auto [m, n] = as_rows(z, "ste_l0");
  const double* zv = dataof(z);
  const double* tv = dataof(theta);
  double count = 0.0;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      if (std::fabs(zv[i * n + j]) > tv[j]) count += 1.0;
  Tensor out = Tensor::scalar(count);
  record({z, theta}, out, [z, theta, out, eps, m = m, n = n]() mutable {
    if (!theta.requires_grad()) return;
    const double g = out.grad()[0];
    const double* zv = dataof(z);
    const double* tv = dataof(theta);
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t i = 0; i < m; ++i)
        if (std::fabs(std::fabs(zv[i * n + j]) - tv[j]) < 0.5 * eps) acc -= 1.0 / eps;
      theta.grad()[static_cast<size_t>(j)] += g * acc;
    }
  });
  return out;
}

}  // namespace fsrl
