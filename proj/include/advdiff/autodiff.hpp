#pragma once

// Reverse-mode automatic differentiation over a per-step tape.
//
// A Tape owns every value recorded during one forward pass. Var is a light
// handle (tape pointer + node index); ops append nodes, so node inputs always
// precede the node. backward() walks the nodes once in reverse order.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "advdiff/tensor.hpp"

namespace advdiff {

class Tape;

class Var {
 public:
  Var() = default;
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

enum class OpKind : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kMatmul,
  kScale,
  kSum,
  kMean,
  kRelu,
  kSilu,
  kSin,
  kCos,
  kBroadcastRows,
  kBroadcastCols,
  kConcatCols,
  kL2NormSq,
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // A differentiable input (parameter or data we want gradients for).
  Var leaf(Tensor value);
  // A value that never receives gradient.
  Var constant(Tensor value);
  // Same value as `v`, cut from the graph.
  Var detach(Var v) { return constant(value(v)); }

  const Tensor& value(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  // d(root)/d(w) for each w; w off the path of root gets zeros of its shape.
  std::vector<Tensor> backward(Var root, std::span<const Var> wrt) const;

 private:
  friend Var record(OpKind kind, Tensor value, Var a, Var b, double scalar);
  struct Node {
    OpKind kind;
    Tensor value;
    std::size_t in0 = 0;
    std::size_t in1 = 0;
    double scalar = 0.0;
    bool needs_grad = false;
  };

  Var push(Node node);
  void check_owned(Var v, const char* op) const;
  void propagate(const Node& node, const Tensor& g, std::vector<Tensor>& grads, std::vector<bool>& has) const;

  std::vector<Node> nodes_;
};

// Primitive ops. Shapes are checked eagerly; mismatches throw ShapeError
// naming both operand shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
// (m x k)(k x n) -> (m x n); (m x k)(k) -> (m)
Var matmul(Var a, Var b);
Var scale(Var a, double s);
Var sum(Var a);
Var mean(Var a);
Var relu(Var a);
Var silu(Var a);
Var sin(Var a);
Var cos(Var a);
// (n) or (1 x n) -> (rows x n)
Var broadcast_rows(Var a, std::size_t rows);
// (m) -> (m x cols)
Var broadcast_cols(Var a, std::size_t cols);
// (m x p), (m x q) -> (m x (p+q))
Var concat_cols(Var a, Var b);
Var l2_norm_sq(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

}  // namespace advdiff
