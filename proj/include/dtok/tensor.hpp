#ifndef DTOK_TENSOR_HPP
#define DTOK_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// Every op is a free function. While a Tape is active (see TapeScope) each op
// that touches a grad-tracked input appends a backward step to the tape;
// Tape::backward replays the steps in reverse and accumulates gradients into
// every tracked node. Without an active tape ops are plain forward math.
//
// Conventions, fixed for reproducibility:
//  - all data is 64-bit float, row-major;
//  - broadcasting is right-aligned (trailing axes matched, size-1 stretched);
//  - reductions accumulate in row-major input order;
//  - any op that produces a non-finite value throws NumericError.

namespace dtok {

using Shape = std::vector<int64_t>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int64_t numel(const Shape& shape);
std::vector<int64_t> row_major_strides(const Shape& shape);
std::string shape_str(const Shape& shape);
Shape broadcast_shape(const Shape& a, const Shape& b);

class Tape;

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;    // empty until backward populates it
  const Tape* tape_tag = nullptr;  // tape that recorded this node, if any
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor scalar(double value);
  static Tensor from(const Shape& shape, std::vector<double> values);

  bool defined() const { return node != nullptr; }
  const Shape& shape() const { return node->shape; }
  int64_t size() const { return static_cast<int64_t>(node->data.size()); }
  int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(node->shape.size()); }

  const std::vector<double>& data() const { return node->data; }
  std::vector<double>& mutable_data() { return node->data; }

  bool requires_grad() const { return node->requires_grad; }
  Tensor& set_requires_grad(bool value);

  bool has_grad() const { return node && !node->grad.empty(); }
  const std::vector<double>& grad() const;
  // gradient, or zeros when the loss never touched this tensor
  std::vector<double> grad_or_zeros() const;
  void clear_grad() { node->grad.clear(); }

  double item() const;                         // scalar tensors only
  double at(const std::vector<int64_t>& idx) const;

  std::shared_ptr<TensorNode> node;  // shared autodiff node
};

// Per-forward-pass computation record. Confined to one thread; consumed by
// backward().
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }
  size_t size() const { return steps_.size(); }
  bool consumed() const { return consumed_; }

  // Seeds d(loss)/d(loss)=1 and replays recorded steps in reverse, adding
  // into the grad of every tracked node. The record is freed afterwards.
  void backward(const Tensor& loss);

 private:
  friend class TapeScope;
  std::vector<std::function<void()>> steps_;
  bool consumed_ = false;
};

// RAII activation of a tape for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// ---- elementwise ops ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor neg(const Tensor& x);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);

enum class EwOp { add, sub, mul, relu, exp, log, square };

// Dispatch wrapper over the named elementwise functions. Unary ops reject a
// second argument, binary ops require one.
Tensor elementwise(EwOp op, const Tensor& a, const Tensor* b = nullptr);

// ---- structural ops ----

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor transpose_last2(const Tensor& x);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length);
Tensor broadcast_to(const Tensor& x, const Shape& shape);

// Row lookup: out[i, :] = table[ids[i], :]. Gradients scatter-add into the
// table; ids carry no gradient.
Tensor embedding(const Tensor& table, const std::vector<int64_t>& ids);

// out[i] = x[i, ids[i]] over the flattened leading axes of x.
Tensor gather_last(const Tensor& x, const std::vector<int64_t>& ids);

// ---- matmul ----

// 2-d matrix product, or batched product when both arguments carry equal
// leading batch dims: (B..., m, k) x (B..., k, n) -> (B..., m, n).
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- reductions ----

Tensor reduce_sum(const Tensor& x, const std::vector<int>& axes, bool keepdims = false);
Tensor reduce_mean(const Tensor& x, const std::vector<int>& axes, bool keepdims = false);
Tensor reduce_max(const Tensor& x, const std::vector<int>& axes, bool keepdims = false);
Tensor reduce_sum_all(const Tensor& x);
Tensor reduce_mean_all(const Tensor& x);

enum class ReduceOp { sum, mean, max };

Tensor reduce(ReduceOp op, const Tensor& x, const std::vector<int>& axes);

// ---- normalized exponentials (fused forward/backward) ----

Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

// ---- gradient oracle ----

// Central finite differences (f(x+h e_i) - f(x-h e_i)) / 2h per element.
// f must be deterministic and is evaluated without any tape.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f,
                              const Tensor& x, double h = 1e-5);

// max |a-f| / max(1, |a|, |f|) over all elements; shapes must match.
double max_rel_err(const Tensor& analytic, const Tensor& fd);
double max_rel_err(const std::vector<double>& analytic, const std::vector<double>& fd);

}  // namespace dtok

#endif  // DTOK_TENSOR_HPP
