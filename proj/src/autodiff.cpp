#include "advdiff/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "advdiff/error.hpp"
#include "advdiff/kernels.hpp"

namespace advdiff {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible operand shapes " + shape_str(a) + " and " + shape_str(b));
}

void require_same_tape(Var a, Var b, const char* op) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape()) {
    throw Error(std::string(op) + ": operands are not recorded on the same tape");
  }
}

void require_bound(Var a, const char* op) {
  if (!a.valid()) throw Error(std::string(op) + ": unbound operand");
}

void accumulate(std::vector<Tensor>& grads, std::vector<bool>& has, std::size_t id, Tensor g) {
  if (!has[id]) {
    grads[id] = std::move(g);
    has[id] = true;
    return;
  }
  auto dst = grads[id].data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <class F>
Tensor map(const Tensor& x, F f) {
  Tensor out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <class F>
Tensor zip(const Tensor& x, const Tensor& y, F f) {
  Tensor out(x.shape());
  auto a = x.data();
  auto b = y.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) dst[i] = f(a[i], b[i]);
  return out;
}

}  // namespace

const Tensor& Var::value() const {
  if (!tape_) throw Error("value() on an unbound Var");
  return tape_->value(*this);
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value) {
  Node n{OpKind::kLeaf, std::move(value)};
  n.needs_grad = true;
  return push(std::move(n));
}

Var Tape::constant(Tensor value) { return push(Node{OpKind::kLeaf, std::move(value)}); }

const Tensor& Tape::value(Var v) const {
  check_owned(v, "value");
  return nodes_[v.id()].value;
}

void Tape::check_owned(Var v, const char* op) const {
  if (v.tape() != this || v.id() >= nodes_.size()) {
    throw Error(std::string(op) + ": tensor is detached from this tape");
  }
}

Var record(OpKind kind, Tensor value, Var a, Var b, double scalar) {
  Tape& tape = *a.tape();
  Tape::Node n{kind, std::move(value)};
  n.in0 = a.id();
  n.in1 = b.valid() ? b.id() : a.id();
  n.scalar = scalar;
  n.needs_grad = tape.nodes_[n.in0].needs_grad || tape.nodes_[n.in1].needs_grad;
  return tape.push(std::move(n));
}

std::vector<Tensor> Tape::backward(Var root, std::span<const Var> wrt) const {
  check_owned(root, "backward");
  if (value(root).numel() != 1) {
    throw ShapeError("backward: root must be scalar, got shape " + shape_str(value(root).shape()));
  }
  for (const Var& w : wrt) check_owned(w, "backward wrt");

  std::vector<Tensor> grads(root.id() + 1);
  std::vector<bool> has(root.id() + 1, false);
  if (nodes_[root.id()].needs_grad) {
    grads[root.id()] = Tensor::full(value(root).shape(), 1.0);
    has[root.id()] = true;
  }
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    if (!has[i] || nodes_[i].kind == OpKind::kLeaf) continue;
    propagate(nodes_[i], grads[i], grads, has);
    grads[i] = Tensor();  // interior gradients are not needed past this point
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (w.id() < has.size() && has[w.id()]) {
      out.push_back(grads[w.id()]);
    } else {
      out.push_back(Tensor::zeros(nodes_[w.id()].value.shape()));
    }
  }
  return out;
}

void Tape::propagate(const Node& node, const Tensor& g, std::vector<Tensor>& grads, std::vector<bool>& has) const {
  const std::size_t ia = node.in0;
  const std::size_t ib = node.in1;
  const Tensor& a = nodes_[ia].value;
  const Tensor& b = nodes_[ib].value;
  const bool want_a = nodes_[ia].needs_grad;
  const bool want_b = nodes_[ib].needs_grad;

  switch (node.kind) {
    case OpKind::kLeaf:
      break;
    case OpKind::kAdd:
      if (want_a) accumulate(grads, has, ia, g);
      if (want_b) accumulate(grads, has, ib, g);
      break;
    case OpKind::kSub:
      if (want_a) accumulate(grads, has, ia, g);
      if (want_b) accumulate(grads, has, ib, map(g, [](double v) { return -v; }));
      break;
    case OpKind::kMul:
      if (want_a) accumulate(grads, has, ia, zip(g, b, [](double u, double v) { return u * v; }));
      if (want_b) accumulate(grads, has, ib, zip(g, a, [](double u, double v) { return u * v; }));
      break;
    case OpKind::kMatmul: {
      const std::size_t m = a.rows();
      const std::size_t k = a.cols();
      if (b.rank() == 1) {
        if (want_a) {
          Tensor da(a.shape());
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) da.at(i, p) = g[i] * b[p];
          accumulate(grads, has, ia, std::move(da));
        }
        if (want_b) {
          Tensor db(b.shape());
          kernels::gemm_tn({k, 1, m}, a.data(), g.data(), db.data());
          accumulate(grads, has, ib, std::move(db));
        }
      } else {
        const std::size_t n = b.cols();
        if (want_a) {
          Tensor da(a.shape());
          kernels::gemm_nt({m, k, n}, g.data(), b.data(), da.data());
          accumulate(grads, has, ia, std::move(da));
        }
        if (want_b) {
          Tensor db(b.shape());
          kernels::gemm_tn({k, n, m}, a.data(), g.data(), db.data());
          accumulate(grads, has, ib, std::move(db));
        }
      }
      break;
    }
    case OpKind::kScale: {
      const double s = node.scalar;
      if (want_a) accumulate(grads, has, ia, map(g, [s](double v) { return s * v; }));
      break;
    }
    case OpKind::kSum:
      if (want_a) accumulate(grads, has, ia, Tensor::full(a.shape(), g.item()));
      break;
    case OpKind::kMean:
      if (want_a) accumulate(grads, has, ia, Tensor::full(a.shape(), g.item() / static_cast<double>(a.numel())));
      break;
    case OpKind::kRelu:
      if (want_a) accumulate(grads, has, ia, zip(g, a, [](double u, double x) { return x > 0.0 ? u : 0.0; }));
      break;
    case OpKind::kSilu:
      if (want_a) {
        accumulate(grads, has, ia, zip(g, a, [](double u, double x) {
                     const double s = sigmoid(x);
                     return u * s * (1.0 + x * (1.0 - s));
                   }));
      }
      break;
    case OpKind::kSin:
      if (want_a) accumulate(grads, has, ia, zip(g, a, [](double u, double x) { return u * std::cos(x); }));
      break;
    case OpKind::kCos:
      if (want_a) accumulate(grads, has, ia, zip(g, a, [](double u, double x) { return -u * std::sin(x); }));
      break;
    case OpKind::kBroadcastRows:
      if (want_a) {
        Tensor da(a.shape());
        kernels::column_sums(g.rows(), g.cols(), g.data(), da.data());
        accumulate(grads, has, ia, std::move(da));
      }
      break;
    case OpKind::kBroadcastCols:
      if (want_a) {
        Tensor da(a.shape());
        for (std::size_t i = 0; i < g.rows(); ++i) {
          double s = 0.0;
          for (double v : g.row(i)) s += v;
          da[i] = s;
        }
        accumulate(grads, has, ia, std::move(da));
      }
      break;
    case OpKind::kConcatCols: {
      const std::size_t p = a.cols();
      const std::size_t q = b.cols();
      if (want_a) {
        Tensor da(a.shape());
        for (std::size_t i = 0; i < g.rows(); ++i) std::copy_n(g.row(i).begin(), p, da.row(i).begin());
        accumulate(grads, has, ia, std::move(da));
      }
      if (want_b) {
        Tensor db(b.shape());
        for (std::size_t i = 0; i < g.rows(); ++i) std::copy_n(g.row(i).begin() + p, q, db.row(i).begin());
        accumulate(grads, has, ib, std::move(db));
      }
      break;
    }
    case OpKind::kL2NormSq: {
      const double s = 2.0 * g.item();
      if (want_a) accumulate(grads, has, ia, map(a, [s](double x) { return s * x; }));
      break;
    }
  }
}

Var add(Var a, Var b) {
  require_same_tape(a, b, "add");
  if (a.shape() != b.shape()) shape_fail("add", a.shape(), b.shape());
  return record(OpKind::kAdd, zip(a.value(), b.value(), std::plus<>{}), a, b, 0.0);
}

Var sub(Var a, Var b) {
  require_same_tape(a, b, "sub");
  if (a.shape() != b.shape()) shape_fail("sub", a.shape(), b.shape());
  return record(OpKind::kSub, zip(a.value(), b.value(), std::minus<>{}), a, b, 0.0);
}

Var mul(Var a, Var b) {
  require_same_tape(a, b, "mul");
  if (a.shape() != b.shape()) shape_fail("mul", a.shape(), b.shape());
  return record(OpKind::kMul, zip(a.value(), b.value(), std::multiplies<>{}), a, b, 0.0);
}

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || (y.rank() != 1 && y.rank() != 2)) shape_fail("matmul", x.shape(), y.shape());
  const std::size_t m = x.rows();
  const std::size_t k = x.cols();
  if (y.rank() == 1) {
    if (y.numel() != k) shape_fail("matmul", x.shape(), y.shape());
    Tensor out(Shape{m});
    kernels::gemm_nn({m, 1, k}, x.data(), y.data(), out.data());
    return record(OpKind::kMatmul, std::move(out), a, b, 0.0);
  }
  if (y.rows() != k) shape_fail("matmul", x.shape(), y.shape());
  Tensor out(Shape{m, y.cols()});
  kernels::gemm_nn({m, y.cols(), k}, x.data(), y.data(), out.data());
  return record(OpKind::kMatmul, std::move(out), a, b, 0.0);
}

Var scale(Var a, double s) {
  require_bound(a, "scale");
  return record(OpKind::kScale, map(a.value(), [s](double v) { return s * v; }), a, Var(), s);
}

Var sum(Var a) {
  require_bound(a, "sum");
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return record(OpKind::kSum, Tensor::scalar(s), a, Var(), 0.0);
}

Var mean(Var a) {
  require_bound(a, "mean");
  const Tensor& x = a.value();
  if (x.numel() == 0) throw ShapeError("mean of an empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  return record(OpKind::kMean, Tensor::scalar(s / static_cast<double>(x.numel())), a, Var(), 0.0);
}

Var relu(Var a) {
  require_bound(a, "relu");
  return record(OpKind::kRelu, map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }), a, Var(), 0.0);
}

Var silu(Var a) {
  require_bound(a, "silu");
  return record(OpKind::kSilu, map(a.value(), [](double x) { return x * sigmoid(x); }), a, Var(), 0.0);
}

Var sin(Var a) {
  require_bound(a, "sin");
  return record(OpKind::kSin, map(a.value(), [](double x) { return std::sin(x); }), a, Var(), 0.0);
}

Var cos(Var a) {
  require_bound(a, "cos");
  return record(OpKind::kCos, map(a.value(), [](double x) { return std::cos(x); }), a, Var(), 0.0);
}

Var broadcast_rows(Var a, std::size_t rows) {
  require_bound(a, "broadcast_rows");
  const Tensor& x = a.value();
  if (!(x.rank() == 1 || (x.rank() == 2 && x.rows() == 1))) {
    throw ShapeError("broadcast_rows: expected a row vector, got " + shape_str(x.shape()));
  }
  const std::size_t n = x.cols();
  Tensor out(Shape{rows, n});
  for (std::size_t i = 0; i < rows; ++i) std::copy_n(x.data().begin(), n, out.row(i).begin());
  return record(OpKind::kBroadcastRows, std::move(out), a, Var(), 0.0);
}

Var broadcast_cols(Var a, std::size_t cols) {
  require_bound(a, "broadcast_cols");
  const Tensor& x = a.value();
  if (x.rank() != 1) throw ShapeError("broadcast_cols: expected a vector, got " + shape_str(x.shape()));
  Tensor out(Shape{x.numel(), cols});
  for (std::size_t i = 0; i < x.numel(); ++i) std::fill_n(out.row(i).begin(), cols, x[i]);
  return record(OpKind::kBroadcastCols, std::move(out), a, Var(), 0.0);
}

Var concat_cols(Var a, Var b) {
  require_same_tape(a, b, "concat_cols");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.rows() != y.rows()) shape_fail("concat_cols", x.shape(), y.shape());
  const std::size_t p = x.cols();
  const std::size_t q = y.cols();
  Tensor out(Shape{x.rows(), p + q});
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::copy_n(x.row(i).begin(), p, out.row(i).begin());
    std::copy_n(y.row(i).begin(), q, out.row(i).begin() + static_cast<std::ptrdiff_t>(p));
  }
  return record(OpKind::kConcatCols, std::move(out), a, b, 0.0);
}

Var l2_norm_sq(Var a) {
  require_bound(a, "l2_norm_sq");
  return record(OpKind::kL2NormSq, Tensor::scalar(squared_norm(a.value().data())), a, Var(), 0.0);
}

}  // namespace advdiff
