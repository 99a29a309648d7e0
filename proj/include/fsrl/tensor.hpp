#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fsrl/rng.hpp"
#include "fsrl/util.hpp"

namespace fsrl {

using Shape = std::vector<int64_t>;

namespace detail {

struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until a backward pass allocates it
  bool requires_grad = false;
  uint64_t tape_id = 0;  // tape that produced this tensor; 0 for leaves
};

}  // namespace detail

// Dense 64-bit tensor participating in reverse-mode differentiation.
// Rank 0 (scalar), 1 and 2 are supported; that is all the models need.
// Value-semantic handle over shared storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);
  static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi,
                             bool requires_grad = false);

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int64_t dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(d_->values.size()); }
  int64_t rows() const;  // rank-2 only
  int64_t cols() const;

  std::span<double> values() { return d_->values; }
  std::span<const double> values() const { return d_->values; }
  double item() const;
  double at(int64_t i) const { return d_->values[static_cast<size_t>(i)]; }
  double at(int64_t i, int64_t j) const { return d_->values[static_cast<size_t>(i * cols() + j)]; }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool rg) { d_->requires_grad = rg; }

  // Tensor is a value-like handle over shared storage; gradient access is
  // const on the handle (allocates the buffer on first use).
  bool has_grad() const { return d_ && !d_->grad.empty(); }
  std::span<double> grad() const;
  void ensure_grad_alloc() const;
  void zero_grad() const;
  void drop_grad() const;

  // Deep copy of values (grad not copied).
  Tensor clone(bool requires_grad) const;

  std::shared_ptr<detail::TensorData> data_ptr() const { return d_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<detail::TensorData> d_;
  friend Tensor wrap_data(std::shared_ptr<detail::TensorData>);
};

// Records the primitive ops of one forward computation; backward replays in
// exact reverse order. One tape is used by one thread; independent tapes may
// live on different threads. Construction installs the tape as the current
// one for this thread, destruction restores the previous.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Seeds d(loss)/d(loss)=1 and propagates to every requires_grad ancestor.
  // loss must be a scalar produced on this tape; calling twice is an error.
  void backward(const Tensor& loss);

  bool backward_called() const { return backward_called_; }
  size_t node_count() const { return nodes_.size(); }
  uint64_t id() const { return id_; }

  static Tape* current();

  void push_node(std::function<void()> fn, std::initializer_list<Tensor> inputs,
                 const Tensor& out);

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<std::shared_ptr<detail::TensorData>> tracked_;
  bool backward_called_ = false;
  uint64_t id_ = 0;
  Tape* prev_ = nullptr;
};

// Disables gradient recording in scope; forwards still run.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// Tracks the smallest distance to an activation kink seen by forwards in
// scope (relu: |x|; soft-threshold / jump-relu: ||z|-theta|; abs and sign:
// |x| over nonzero entries only, since exact zeros come from dead zones and
// are locally flat rather than kinked). Used for kink-safe finite
// differences.
class KinkScope {
 public:
  KinkScope();
  ~KinkScope();
  KinkScope(const KinkScope&) = delete;

  double min_distance() const { return min_; }
  static bool active();
  static void report(double distance);

 private:
  double min_;
  KinkScope* prev_;
};

// ---- primitive operations ----

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]*[k,n]
Tensor transpose(const Tensor& a);
// add/sub/mul support: same shape; [m,n] with [n] broadcast over rows; any
// shape with a rank-0 scalar.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor sign(const Tensor& a);  // sign(0)=0; gradient is zero everywhere
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log_sigmoid(const Tensor& a);  // numerically stable -softplus(-x)
Tensor softmax_rows(const Tensor& a);      // over last dim; rank-1 = one row
Tensor log_softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor sum(const Tensor& a);   // -> rank-0
Tensor mean(const Tensor& a);  // -> rank-0
Tensor gather_rows(const Tensor& table, std::span<const int32_t> ids);
Tensor gather_elements(const Tensor& a, std::span<const std::pair<int64_t, int64_t>> indices);
Tensor select_cols(const Tensor& a, int64_t start, int64_t count);
Tensor concat_cols(std::span<const Tensor> parts);
// v = sign(z) * relu(|z| - theta), per coordinate; theta broadcast over rows.
// Subgradient at the kink is 0.
Tensor soft_threshold(const Tensor& z, const Tensor& theta);
// v = z * H(|z| - theta) with H(0) = 0. theta receives no gradient from this
// path (it is trained through ste_l0).
Tensor jump_relu(const Tensor& z, const Tensor& theta);
// Exact gate count sum_i H(|z_i| - theta_i) with a rectangle-kernel
// straight-through estimate d/dtheta_i = -(1/eps) * 1{||z_i|-theta_i| < eps/2}
// and zero gradient to z.
Tensor ste_l0(const Tensor& z, const Tensor& theta, double eps);

}  // namespace fsrl
