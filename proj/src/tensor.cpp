#include "dtok/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace dtok {

namespace {

thread_local Tape* g_active_tape = nullptr;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void check_finite(const char* op, const std::vector<double>& values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + " produced a non-finite value");
    }
  }
}

std::vector<double>& ensure_grad(TensorNode& node) {
  if (node.grad.empty()) node.grad.assign(node.data.size(), 0.0);
  return node.grad;
}

bool tracked(const Tensor& t) { return t.node->requires_grad; }

// Marks the output as grad-tracked and owned by the active tape when any
// input is tracked. Returns true if a backward step should be recorded.
bool track_output(Tensor& out, std::initializer_list<const Tensor*> inputs) {
  Tape* tape = Tape::active();
  if (tape == nullptr) return false;
  bool any = false;
  for (const Tensor* in : inputs) {
    if (in != nullptr && in->node->requires_grad) any = true;
  }
  if (!any) return false;
  out.node->requires_grad = true;
  out.node->tape_tag = tape;
  return true;
}

// Strides of `shape` right-aligned into an `out_rank`-dim frame, with zero
// stride on broadcast (size-1 or missing) axes.
std::vector<int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
  std::vector<int64_t> strides(out.size(), 0);
  std::vector<int64_t> own = row_major_strides(shape);
  size_t offset = out.size() - shape.size();
  for (size_t d = 0; d < shape.size(); ++d) {
    strides[offset + d] = (shape[d] == 1 && out[offset + d] != 1) ? 0 : own[d];
  }
  return strides;
}

// Calls fn(a_off, b_off) once per output element in row-major order.
template <class F>
void for_each_pair(const Shape& out, const Shape& a, const Shape& b, F&& fn) {
  const int64_t n = numel(out);
  const int rank = static_cast<int>(out.size());
  std::vector<int64_t> sa = broadcast_strides(a, out);
  std::vector<int64_t> sb = broadcast_strides(b, out);
  std::vector<int64_t> idx(rank, 0);
  int64_t ao = 0, bo = 0;
  for (int64_t i = 0; i < n; ++i) {
    fn(ao, bo);
    for (int d = rank - 1; d >= 0; --d) {
      idx[d]++;
      ao += sa[d];
      bo += sb[d];
      if (idx[d] < out[d]) break;
      ao -= sa[d] * out[d];
      bo -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

Tensor make_result(Shape shape, std::vector<double> data, const char* op) {
  check_finite(op, data);
  Tensor t;
  t.node = std::make_shared<TensorNode>();
  t.node->shape = std::move(shape);
  t.node->data = std::move(data);
  return t;
}

int normalize_axis(int axis, int rank) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return a;
}

// ---- shared binary/unary machinery ----

template <class Fwd, class Bwd>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  std::vector<double> out(numel(out_shape));
  {
    int64_t i = 0;
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for_each_pair(out_shape, a.shape(), b.shape(),
                  [&](int64_t ao, int64_t bo) { out[i++] = fwd(pa[ao], pb[bo]); });
  }
  Tensor result = make_result(out_shape, std::move(out), name);
  if (track_output(result, {&a, &b})) {
    auto an = a.node, bn = b.node, on = result.node;
    bool need_a = tracked(a), need_b = tracked(b);
    Tape::active()->record([an, bn, on, need_a, need_b, bwd]() {
      if (on->grad.empty()) return;
      double* ga = nullptr;
      double* gb = nullptr;
      if (need_a) ga = ensure_grad(*an).data();
      if (need_b) gb = ensure_grad(*bn).data();
      const double* pa = an->data.data();
      const double* pb = bn->data.data();
      const double* go = on->grad.data();
      int64_t i = 0;
      for_each_pair(on->shape, an->shape, bn->shape, [&](int64_t ao, int64_t bo) {
        double da, db;
        bwd(pa[ao], pb[bo], go[i], da, db);
        if (ga) ga[ao] += da;
        if (gb) gb[bo] += db;
        ++i;
      });
    });
  }
  return result;
}

template <class Fwd, class Bwd>
Tensor unary_op(const char* name, const Tensor& x, Fwd fwd, Bwd bwd) {
  std::vector<double> out(x.size());
  for (int64_t i = 0; i < x.size(); ++i) out[i] = fwd(x.data()[i]);
  Tensor result = make_result(x.shape(), std::move(out), name);
  if (track_output(result, {&x})) {
    auto xn = x.node, on = result.node;
    Tape::active()->record([xn, on, bwd]() {
      if (on->grad.empty()) return;
      double* gx = ensure_grad(*xn).data();
      const double* go = on->grad.data();
      const double* px = xn->data.data();
      const double* py = on->data.data();
      for (size_t i = 0; i < on->data.size(); ++i) gx[i] += bwd(px[i], py[i], go[i]);
    });
  }
  return result;
}

}  // namespace

// ---- shape utilities ----

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

std::vector<int64_t> row_major_strides(const Shape& shape) {
  std::vector<int64_t> strides(shape.size(), 1);
  for (int d = static_cast<int>(shape.size()) - 2; d >= 0; --d) {
    strides[d] = strides[d + 1] * shape[d + 1];
  }
  return strides;
}

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (size_t i = 0; i < rank; ++i) {
    int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcastable");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// ---- Tensor ----

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }

Tensor Tensor::full(const Shape& shape, double value) {
  for (int64_t e : shape) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
  }
  Tensor t;
  t.node = std::make_shared<TensorNode>();
  t.node->shape = shape;
  t.node->data.assign(numel(shape), value);
  check_finite("full", t.node->data);
  return t;
}

Tensor Tensor::scalar(double value) { return full({}, value); }

Tensor Tensor::from(const Shape& shape, std::vector<double> values) {
  for (int64_t e : shape) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
  }
  if (numel(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  check_finite("from", values);
  Tensor t;
  t.node = std::make_shared<TensorNode>();
  t.node->shape = shape;
  t.node->data = std::move(values);
  return t;
}

int64_t Tensor::dim(int axis) const {
  return node->shape[normalize_axis(axis, rank())];
}

Tensor& Tensor::set_requires_grad(bool value) {
  node->requires_grad = value;
  return *this;
}

const std::vector<double>& Tensor::grad() const {
  if (node->grad.empty()) throw NumericError("gradient not populated");
  return node->grad;
}

std::vector<double> Tensor::grad_or_zeros() const {
  if (node->grad.empty()) return std::vector<double>(node->data.size(), 0.0);
  return node->grad;
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() requires a scalar, got " + shape_str(shape()));
  return node->data[0];
}

double Tensor::at(const std::vector<int64_t>& idx) const {
  if (idx.size() != node->shape.size()) throw ShapeError("index rank mismatch");
  std::vector<int64_t> strides = row_major_strides(node->shape);
  int64_t off = 0;
  for (size_t d = 0; d < idx.size(); ++d) {
    if (idx[d] < 0 || idx[d] >= node->shape[d]) throw ShapeError("index out of range");
    off += idx[d] * strides[d];
  }
  return node->data[off];
}

// ---- Tape ----

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = prev_; }

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw NumericError("backward called twice on the same record");
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward requires a scalar loss");
  }
  if (loss.node->tape_tag != this) {
    throw NumericError("loss was not produced by a forward pass recorded on this tape");
  }
  ensure_grad(*loss.node)[0] = 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  steps_.clear();
  consumed_ = true;
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double, double g) { return v > 0.0 ? g : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); },
      [](double, double y, double g) { return g * y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (v <= 0.0) throw NumericError("log of non-positive value");
  }
  return unary_op(
      "log", x, [](double v) { return std::log(v); },
      [](double v, double, double g) { return g / v; });
}

Tensor square(const Tensor& x) {
  return unary_op(
      "square", x, [](double v) { return v * v; },
      [](double v, double, double g) { return 2.0 * v * g; });
}

Tensor sqrt(const Tensor& x) {
  for (double v : x.data()) {
    if (v < 0.0) throw NumericError("sqrt of negative value");
  }
  return unary_op(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double, double y, double g) { return y > 0.0 ? g / (2.0 * y) : 0.0; });
}

Tensor neg(const Tensor& x) {
  return unary_op(
      "neg", x, [](double v) { return -v; },
      [](double, double, double g) { return -g; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary_op(
      "add_scalar", x, [c](double v) { return v + c; },
      [](double, double, double g) { return g; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary_op(
      "mul_scalar", x, [c](double v) { return v * c; },
      [c](double, double, double g) { return g * c; });
}

Tensor elementwise(EwOp op, const Tensor& a, const Tensor* b) {
  auto require_binary = [&](const char* name) {
    if (b == nullptr) throw ShapeError(std::string(name) + " requires two operands");
  };
  auto require_unary = [&](const char* name) {
    if (b != nullptr) throw ShapeError(std::string(name) + " takes a single operand");
  };
  switch (op) {
    case EwOp::add: require_binary("add"); return add(a, *b);
    case EwOp::sub: require_binary("sub"); return sub(a, *b);
    case EwOp::mul: require_binary("mul"); return mul(a, *b);
    case EwOp::relu: require_unary("relu"); return relu(a);
    case EwOp::exp: require_unary("exp"); return exp(a);
    case EwOp::log: require_unary("log"); return log(a);
    case EwOp::square: require_unary("square"); return square(a);
  }
  throw ShapeError("unknown elementwise op");
}

// ---- structural ----

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor result = make_result(shape, x.data(), "reshape");
  if (track_output(result, {&x})) {
    auto xn = x.node, on = result.node;
    Tape::active()->record([xn, on]() {
      if (on->grad.empty()) return;
      double* gx = ensure_grad(*xn).data();
      const double* go = on->grad.data();
      for (size_t i = 0; i < on->grad.size(); ++i) gx[i] += go[i];
    });
  }
  return result;
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  const int rank = x.rank();
  if (static_cast<int>(axes.size()) != rank) throw ShapeError("permute axes rank mismatch");
  std::vector<bool> seen(rank, false);
  Shape out_shape(rank);
  for (int d = 0; d < rank; ++d) {
    int a = normalize_axis(axes[d], rank);
    if (seen[a]) throw ShapeError("permute axes repeat");
    seen[a] = true;
    out_shape[d] = x.shape()[a];
  }
  std::vector<int64_t> in_strides = row_major_strides(x.shape());
  // stride to advance the input offset when output dim d increments
  std::vector<int64_t> strides(rank);
  for (int d = 0; d < rank; ++d) strides[d] = in_strides[normalize_axis(axes[d], rank)];

  auto apply = [rank, out_shape, strides](const double* src, double* dst, bool accumulate) {
    std::vector<int64_t> idx(rank, 0);
    int64_t src_off = 0;
    const int64_t n = numel(out_shape);
    for (int64_t i = 0; i < n; ++i) {
      if (accumulate) {
        dst[src_off] += src[i];
      } else {
        dst[i] = src[src_off];
      }
      for (int d = rank - 1; d >= 0; --d) {
        idx[d]++;
        src_off += strides[d];
        if (idx[d] < out_shape[d]) break;
        src_off -= strides[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  };

  std::vector<double> out(x.size());
  apply(x.data().data(), out.data(), false);
  Tensor result = make_result(out_shape, std::move(out), "permute");
  if (track_output(result, {&x})) {
    auto xn = x.node, on = result.node;
    Tape::active()->record([xn, on, apply]() {
      if (on->grad.empty()) return;
      apply(on->grad.data(), ensure_grad(*xn).data(), true);
    });
  }
  return result;
}

Tensor transpose_last2(const Tensor& x) {
  std::vector<int> axes(x.rank());
  for (int d = 0; d < x.rank(); ++d) axes[d] = d;
  if (x.rank() < 2) throw ShapeError("transpose_last2 requires rank >= 2");
  std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
  return permute(x, axes);
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  const int rank = xs[0].rank();
  const int a = normalize_axis(axis, rank);
  Shape out_shape = xs[0].shape();
  int64_t total = 0;
  for (const Tensor& t : xs) {
    if (t.rank() != rank) throw ShapeError("concat rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != a && t.shape()[d] != out_shape[d]) {
        throw ShapeError("concat shape mismatch on axis " + std::to_string(d));
      }
    }
    total += t.shape()[a];
  }
  out_shape[a] = total;

  int64_t outer = 1, inner = 1;
  for (int d = 0; d < a; ++d) outer *= out_shape[d];
  for (int d = a + 1; d < rank; ++d) inner *= out_shape[d];

  std::vector<double> out(numel(out_shape));
  const int64_t out_row = total * inner;
  int64_t col = 0;
  for (const Tensor& t : xs) {
    const int64_t block = t.shape()[a] * inner;
    for (int64_t o = 0; o < outer; ++o) {
      std::copy_n(t.data().data() + o * block, block, out.data() + o * out_row + col);
    }
    col += block;
  }
  Tensor result = make_result(out_shape, std::move(out), "concat");

  std::vector<const Tensor*> in_ptrs;
  for (const Tensor& t : xs) in_ptrs.push_back(&t);
  Tape* tape = Tape::active();
  bool any = false;
  for (const Tensor& t : xs) any = any || t.requires_grad();
  if (tape && any) {
    result.node->requires_grad = true;
    result.node->tape_tag = tape;
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const Tensor& t : xs) nodes.push_back(t.node);
    auto on = result.node;
    tape->record([nodes, on, outer, inner, out_row]() {
      if (on->grad.empty()) return;
      const double* go = on->grad.data();
      int64_t col = 0;
      for (const auto& xn : nodes) {
        const int64_t a_dim = xn->data.size() / (outer * inner);
        const int64_t block = a_dim * inner;
        if (xn->requires_grad) {
          double* gx = ensure_grad(*xn).data();
          for (int64_t o = 0; o < outer; ++o) {
            const double* src = go + o * out_row + col;
            double* dst = gx + o * block;
            for (int64_t i = 0; i < block; ++i) dst[i] += src[i];
          }
        }
        col += block;
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length) {
  const int a = normalize_axis(axis, x.rank());
  if (start < 0 || length <= 0 || start + length > x.shape()[a]) {
    throw ShapeError("slice range [" + std::to_string(start) + "," +
                     std::to_string(start + length) + ") out of bounds for axis extent " +
                     std::to_string(x.shape()[a]));
  }
  Shape out_shape = x.shape();
  out_shape[a] = length;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < a; ++d) outer *= x.shape()[d];
  for (int d = a + 1; d < x.rank(); ++d) inner *= x.shape()[d];
  const int64_t in_row = x.shape()[a] * inner;
  const int64_t out_block = length * inner;

  std::vector<double> out(numel(out_shape));
  for (int64_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().data() + o * in_row + start * inner, out_block,
                out.data() + o * out_block);
  }
  Tensor result = make_result(out_shape, std::move(out), "slice");
  if (track_output(result, {&x})) {
    auto xn = x.node, on = result.node;
    Tape::active()->record([xn, on, outer, inner, in_row, out_block, start]() {
      if (on->grad.empty()) return;
      double* gx = ensure_grad(*xn).data();
      const double* go = on->grad.data();
      for (int64_t o = 0; o < outer; ++o) {
        double* dst = gx + o * in_row + start * inner;
        const double* src = go + o * out_block;
        for (int64_t i = 0; i < out_block; ++i) dst[i] += src[i];
      }
    });
  }
  return result;
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  Shape check = broadcast_shape(x.shape(), shape);
  if (check != shape) {
    throw ShapeError("cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(numel(shape));
  {
    int64_t i = 0;
    const double* px = x.data().data();
    for_each_pair(shape, x.shape(), x.shape(),
                  [&](int64_t xo, int64_t) { out[i++] = px[xo]; });
  }
  Tensor result = make_result(shape, std::move(out), "broadcast_to");
  if (track_output(result, {&x})) {
    auto xn = x.node, on = result.node;
    Tape::active()->record([xn, on]() {
      if (on->grad.empty()) return;
      double* gx = ensure_grad(*xn).data();
      const double* go = on->grad.data();
      int64_t i = 0;
      for_each_pair(on->shape, xn->shape, xn->shape,
                    [&](int64_t xo, int64_t) { gx[xo] += go[i++]; });
    });
  }
  return result;
}

Tensor embedding(const Tensor& table, const std::vector<int64_t>& ids) {
  if (table.rank() != 2) throw ShapeError("embedding table must be rank 2");
  const int64_t vocab = table.shape()[0];
  const int64_t width = table.shape()[1];
  for (int64_t id : ids) {
    if (id < 0 || id >= vocab) {
      throw ShapeError("token id " + std::to_string(id) + " outside vocab of " +
                       std::to_string(vocab));
    }
  }
  std::vector<double> out(ids.size() * width);
  for (size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(table.data().data() + ids[i] * width, width, out.data() + i * width);
  }
  Tensor result = make_result({static_cast<int64_t>(ids.size()), width}, std::move(out),
                              "embedding");
  if (track_output(result, {&table})) {
    auto tn = table.node, on = result.node;
    Tape::active()->record([tn, on, ids, width]() {
      if (on->grad.empty()) return;
      double* gt = ensure_grad(*tn).data();
      const double* go = on->grad.data();
      for (size_t i = 0; i < ids.size(); ++i) {
        double* dst = gt + ids[i] * width;
        const double* src = go + i * width;
        for (int64_t c = 0; c < width; ++c) dst[c] += src[c];
      }
    });
  }
  return result;
}

Tensor gather_last(const Tensor& x, const std::vector<int64_t>& ids) {
  if (x.rank() < 1) throw ShapeError("gather_last requires rank >= 1");
  const int64_t width = x.shape().back();
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  const int64_t n = numel(out_shape);
  if (static_cast<int64_t>(ids.size()) != n) {
    throw ShapeError("gather_last id count mismatch");
  }
  std::vector<double> out(n);
  for (int64_t i = 0; i < n; ++i) {
    if (ids[i] < 0 || ids[i] >= width) throw ShapeError("gather index out of range");
    out[i] = x.data()[i * width + ids[i]];
  }
  Tensor result = make_result(out_shape, std::move(out), "gather_last");
  if (track_output(result, {&x})) {
    auto xn = x.node, on = result.node;
    Tape::active()->record([xn, on, ids, width, n]() {
      if (on->grad.empty()) return;
      double* gx = ensure_grad(*xn).data();
      const double* go = on->grad.data();
      for (int64_t i = 0; i < n; ++i) gx[i * width + ids[i]] += go[i];
    });
  }
  return result;
}

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank()) {
    throw ShapeError("matmul requires equal-rank operands of rank >= 2, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const int rank = a.rank();
  const int64_t m = a.shape()[rank - 2], k = a.shape()[rank - 1];
  const int64_t k2 = b.shape()[rank - 2], n = b.shape()[rank - 1];
  if (k != k2) {
    throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  int64_t batch = 1;
  Shape out_shape;
  for (int d = 0; d < rank - 2; ++d) {
    if (a.shape()[d] != b.shape()[d]) throw ShapeError("matmul batch dims must match");
    batch *= a.shape()[d];
    out_shape.push_back(a.shape()[d]);
  }
  out_shape.push_back(m);
  out_shape.push_back(n);

  std::vector<double> out(batch * m * n);
  for (int64_t i = 0; i < batch; ++i) {
    ConstMapMat A(a.data().data() + i * m * k, m, k);
    ConstMapMat B(b.data().data() + i * k * n, k, n);
    MapMat C(out.data() + i * m * n, m, n);
    C.noalias() = A * B;
  }
  Tensor result = make_result(out_shape, std::move(out), "matmul");
  if (track_output(result, {&a, &b})) {
    auto an = a.node, bn = b.node, on = result.node;
    bool need_a = tracked(a), need_b = tracked(b);
    Tape::active()->record([an, bn, on, need_a, need_b, batch, m, k, n]() {
      if (on->grad.empty()) return;
      for (int64_t i = 0; i < batch; ++i) {
        ConstMapMat G(on->grad.data() + i * m * n, m, n);
        if (need_a) {
          ConstMapMat B(bn->data.data() + i * k * n, k, n);
          MapMat GA(ensure_grad(*an).data() + i * m * k, m, k);
          GA.noalias() += G * B.transpose();
        }
        if (need_b) {
          ConstMapMat A(an->data.data() + i * m * k, m, k);
          MapMat GB(ensure_grad(*bn).data() + i * k * n, k, n);
          GB.noalias() += A.transpose() * G;
        }
      }
    });
  }
  return result;
}

// ---- reductions ----

namespace {

struct ReducePlan {
  Shape out_shape;         // axes removed
  Shape kept_shape;        // axes kept as size-1 (keepdims form)
  std::vector<int64_t> out_stride_per_in_dim;
  int64_t count = 1;       // elements folded into each output slot
};

ReducePlan plan_reduce(const Shape& in, const std::vector<int>& axes, bool keepdims) {
  const int rank = static_cast<int>(in.size());
  std::vector<bool> reduced(rank, false);
  for (int axis : axes) {
    int a = normalize_axis(axis, rank);
    if (reduced[a]) throw ShapeError("duplicate reduction axis");
    reduced[a] = true;
  }
  ReducePlan plan;
  plan.kept_shape = in;
  for (int d = 0; d < rank; ++d) {
    if (reduced[d]) {
      plan.count *= in[d];
      plan.kept_shape[d] = 1;
      if (keepdims) plan.out_shape.push_back(1);
    } else {
      plan.out_shape.push_back(in[d]);
    }
  }
  // strides into the reduced-output frame, 0 on reduced axes
  std::vector<int64_t> out_strides;
  {
    Shape folded;
    for (int d = 0; d < rank; ++d) folded.push_back(reduced[d] ? 1 : in[d]);
    std::vector<int64_t> s = row_major_strides(folded);
    plan.out_stride_per_in_dim.resize(rank);
    for (int d = 0; d < rank; ++d) plan.out_stride_per_in_dim[d] = reduced[d] ? 0 : s[d];
  }
  return plan;
}

// Calls fn(in_linear, out_offset) in row-major input order.
template <class F>
void for_each_reduce(const Shape& in, const ReducePlan& plan, F&& fn) {
  const int rank = static_cast<int>(in.size());
  const int64_t n = numel(in);
  std::vector<int64_t> idx(rank, 0);
  int64_t out_off = 0;
  for (int64_t i = 0; i < n; ++i) {
    fn(i, out_off);
    for (int d = rank - 1; d >= 0; --d) {
      idx[d]++;
      out_off += plan.out_stride_per_in_dim[d];
      if (idx[d] < in[d]) break;
      out_off -= plan.out_stride_per_in_dim[d] * in[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

Tensor reduce_sum(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
  ReducePlan plan = plan_reduce(x.shape(), axes, keepdims);
  std::vector<double> out(numel(plan.out_shape), 0.0);
  const double* px = x.data().data();
  for_each_reduce(x.shape(), plan, [&](int64_t i, int64_t o) { out[o] += px[i]; });
  Tensor result = make_result(plan.out_shape, std::move(out), "sum");
  if (track_output(result, {&x})) {
    auto xn = x.node, on = result.node;
    Tape::active()->record([xn, on, plan]() {
      if (on->grad.empty()) return;
      double* gx = ensure_grad(*xn).data();
      const double* go = on->grad.data();
      for_each_reduce(xn->shape, plan, [&](int64_t i, int64_t o) { gx[i] += go[o]; });
    });
  }
  return result;
}

Tensor reduce_mean(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
  ReducePlan plan = plan_reduce(x.shape(), axes, keepdims);
  const double count = static_cast<double>(plan.count);
  std::vector<double> out(numel(plan.out_shape), 0.0);
  const double* px = x.data().data();
  for_each_reduce(x.shape(), plan, [&](int64_t i, int64_t o) { out[o] += px[i]; });
  for (double& v : out) v = v / count;
  Tensor result = make_result(plan.out_shape, std::move(out), "mean");
  if (track_output(result, {&x})) {
    auto xn = x.node, on = result.node;
    Tape::active()->record([xn, on, plan, count]() {
      if (on->grad.empty()) return;
      double* gx = ensure_grad(*xn).data();
      const double* go = on->grad.data();
      for_each_reduce(xn->shape, plan, [&](int64_t i, int64_t o) { gx[i] += go[o] / count; });
    });
  }
  return result;
}

Tensor reduce_max(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
  ReducePlan plan = plan_reduce(x.shape(), axes, keepdims);
  const int64_t out_n = numel(plan.out_shape);
  std::vector<double> out(out_n, -std::numeric_limits<double>::infinity());
  // first maximiser in row-major order wins, for a deterministic subgradient
  auto argmax = std::make_shared<std::vector<int64_t>>(out_n, -1);
  const double* px = x.data().data();
  for_each_reduce(x.shape(), plan, [&](int64_t i, int64_t o) {
    if (px[i] > out[o]) {
      out[o] = px[i];
      (*argmax)[o] = i;
    }
  });
  Tensor result = make_result(plan.out_shape, std::move(out), "max");
  if (track_output(result, {&x})) {
    auto xn = x.node, on = result.node;
    Tape::active()->record([xn, on, argmax]() {
      if (on->grad.empty()) return;
      double* gx = ensure_grad(*xn).data();
      const double* go = on->grad.data();
      for (size_t o = 0; o < argmax->size(); ++o) gx[(*argmax)[o]] += go[o];
    });
  }
  return result;
}

Tensor reduce_sum_all(const Tensor& x) {
  std::vector<int> axes(x.rank());
  for (int d = 0; d < x.rank(); ++d) axes[d] = d;
  return reduce_sum(x, axes);
}

Tensor reduce_mean_all(const Tensor& x) {
  std::vector<int> axes(x.rank());
  for (int d = 0; d < x.rank(); ++d) axes[d] = d;
  return reduce_mean(x, axes);
}

Tensor reduce(ReduceOp op, const Tensor& x, const std::vector<int>& axes) {
  switch (op) {
    case ReduceOp::sum: return reduce_sum(x, axes);
    case ReduceOp::mean: return reduce_mean(x, axes);
    case ReduceOp::max: return reduce_max(x, axes);
  }
  throw ShapeError("unknown reduce op");
}

// ---- softmax family ----

namespace {

struct AxisPlan {
  int64_t outer = 1, n = 1, inner = 1;
};

AxisPlan plan_axis(const Shape& shape, int axis) {
  const int rank = static_cast<int>(shape.size());
  const int a = normalize_axis(axis, rank);
  AxisPlan plan;
  for (int d = 0; d < a; ++d) plan.outer *= shape[d];
  plan.n = shape[a];
  for (int d = a + 1; d < rank; ++d) plan.inner *= shape[d];
  return plan;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  AxisPlan p = plan_axis(x.shape(), axis);
  std::vector<double> out(x.size());
  const double* px = x.data().data();
  for (int64_t o = 0; o < p.outer; ++o) {
    for (int64_t in = 0; in < p.inner; ++in) {
      const int64_t base = o * p.n * p.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < p.n; ++j) mx = std::max(mx, px[base + j * p.inner]);
      double sum = 0.0;
      for (int64_t j = 0; j < p.n; ++j) {
        double e = std::exp(px[base + j * p.inner] - mx);
        out[base + j * p.inner] = e;
        sum += e;
      }
      for (int64_t j = 0; j < p.n; ++j) out[base + j * p.inner] /= sum;
    }
  }
  Tensor result = make_result(x.shape(), std::move(out), "softmax");
  if (track_output(result, {&x})) {
    auto xn = x.node, on = result.node;
    Tape::active()->record([xn, on, p]() {
      if (on->grad.empty()) return;
      double* gx = ensure_grad(*xn).data();
      const double* go = on->grad.data();
      const double* py = on->data.data();
      for (int64_t o = 0; o < p.outer; ++o) {
        for (int64_t in = 0; in < p.inner; ++in) {
          const int64_t base = o * p.n * p.inner + in;
          double dot = 0.0;
          for (int64_t j = 0; j < p.n; ++j) {
            dot += go[base + j * p.inner] * py[base + j * p.inner];
          }
          for (int64_t j = 0; j < p.n; ++j) {
            const int64_t k = base + j * p.inner;
            gx[k] += py[k] * (go[k] - dot);
          }
        }
      }
    });
  }
  return result;
}

Tensor log_softmax(const Tensor& x, int axis) {
  AxisPlan p = plan_axis(x.shape(), axis);
  std::vector<double> out(x.size());
  const double* px = x.data().data();
  for (int64_t o = 0; o < p.outer; ++o) {
    for (int64_t in = 0; in < p.inner; ++in) {
      const int64_t base = o * p.n * p.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < p.n; ++j) mx = std::max(mx, px[base + j * p.inner]);
      double sum = 0.0;
      for (int64_t j = 0; j < p.n; ++j) sum += std::exp(px[base + j * p.inner] - mx);
      const double lse = mx + std::log(sum);
      for (int64_t j = 0; j < p.n; ++j) {
        out[base + j * p.inner] = px[base + j * p.inner] - lse;
      }
    }
  }
  Tensor result = make_result(x.shape(), std::move(out), "log_softmax");
  if (track_output(result, {&x})) {
    auto xn = x.node, on = result.node;
    Tape::active()->record([xn, on, p]() {
      if (on->grad.empty()) return;
      double* gx = ensure_grad(*xn).data();
      const double* go = on->grad.data();
      const double* py = on->data.data();
      for (int64_t o = 0; o < p.outer; ++o) {
        for (int64_t in = 0; in < p.inner; ++in) {
          const int64_t base = o * p.n * p.inner + in;
          double gsum = 0.0;
          for (int64_t j = 0; j < p.n; ++j) gsum += go[base + j * p.inner];
          for (int64_t j = 0; j < p.n; ++j) {
            const int64_t k = base + j * p.inner;
            gx[k] += go[k] - std::exp(py[k]) * gsum;
          }
        }
      }
    });
  }
  return result;
}

// ---- finite differences ----

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f,
                              const Tensor& x, double h) {
  if (h <= 0.0) throw NumericError("finite difference step must be positive");
  Tensor probe = Tensor::from(x.shape(), x.data());
  Tensor grad = Tensor::zeros(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) {
    const double orig = probe.node->data[i];
    probe.node->data[i] = orig + h;
    const double fp = f(probe);
    probe.node->data[i] = orig - h;
    const double fm = f(probe);
    probe.node->data[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("objective returned a non-finite value during finite differences");
    }
    grad.node->data[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

double max_rel_err(const std::vector<double>& analytic, const std::vector<double>& fd) {
  if (analytic.size() != fd.size()) throw ShapeError("max_rel_err size mismatch");
  double worst = 0.0;
  for (size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(fd[i])});
    worst = std::max(worst, std::abs(analytic[i] - fd[i]) / denom);
  }
  return worst;
}

double max_rel_err(const Tensor& analytic, const Tensor& fd) {
  if (analytic.shape() != fd.shape()) throw ShapeError("max_rel_err shape mismatch");
  return max_rel_err(analytic.data(), fd.data());
}

}  // namespace dtok
