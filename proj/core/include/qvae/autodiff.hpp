#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "qvae/tensor.hpp"

namespace qvae::ad {

// One vertex of the reverse-mode graph: a dense value, a same-shape gradient
// accumulator, and the closure that scatters this node's gradient into its
// parents. Nodes are created by the op functions below and owned via
// shared_ptr handles (Var); a forward pass builds a fresh acyclic graph.
struct Node {
  Matrix value;
  Matrix grad;  // lazily allocated, zero-initialized
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // reads this->grad, adds into parents
  const char* op = "leaf";
  bool requires_grad = false;
  bool backward_ran = false;

  Matrix& ensure_grad() {
    if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
    return grad;
  }
};

using NodePtr = std::shared_ptr<Node>;

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr n) : node_(std::move(n)) {}

  const Matrix& value() const { return node_->value; }
  const Matrix& grad() const { return node_->ensure_grad(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  bool defined() const { return node_ != nullptr; }
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

Var make_var(Matrix value, bool requires_grad);
inline Var constant(Matrix value) { return make_var(std::move(value), false); }
Var scalar(double value);

// When enabled, every op verifies its output is finite and throws
// std::runtime_error otherwise. Off by default; tests switch it on.
void set_finite_checks(bool enabled);
bool finite_checks() noexcept;

// Elementwise / structural primitives. Shape mismatches throw
// std::invalid_argument; log of a non-positive entry throws
// std::domain_error.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var divide(const Var& a, const Var& b);
Var matmul(const Var& a, const Var& b);
Var neg(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var expm1(const Var& x);
Var square(const Var& x);
Var sigmoid(const Var& x);
Var clamp(const Var& x, double lo, double hi);  // gradient 0 outside [lo, hi]
Var scale(const Var& x, double s);
Var add_scalar(const Var& x, double c);
Var sum(const Var& x);   // -> 1x1
Var mean(const Var& x);  // -> 1x1
Var row_sum(const Var& x);                  // (n,f) -> (n,1)
Var bias_add(const Var& x, const Var& b);   // (n,f) + (1,f) broadcast

// Per-sample matrix-vector product: b_flat row i holds a (out_dim x m)
// matrix in row-major order, u row i the vector; result row i the product.
Var batched_matvec(const Var& b_flat, const Var& u, Index out_dim);

// Per-row standardization with affine gain/bias (both (1,f)); population
// variance with eps inside the square root.
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

Var swish(const Var& x);  // x * sigmoid(x)

// Value passes through; no gradient flows through this edge.
Var stop_gradient(const Var& x);

// Accumulates d(root)/d(node) into every reachable node that requires a
// gradient. root must be 1x1; a second call on the same root throws
// std::logic_error.
void backward(const Var& root);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& x) { return neg(x); }

}  // namespace qvae::ad
