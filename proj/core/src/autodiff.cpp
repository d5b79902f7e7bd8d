#include "qvae/autodiff.hpp"

#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace qvae::ad {

namespace {

std::atomic<bool> g_finite_checks{false};

[[noreturn]] void shape_error(const char* op, const Var& a, const Var& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch (" +
                              std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                              " vs " + std::to_string(b.rows()) + "x" +
                              std::to_string(b.cols()) + ")");
}

NodePtr fresh(Matrix value, const char* op) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  if (g_finite_checks.load(std::memory_order_relaxed) && !n->value.allFinite())
    throw std::runtime_error(std::string("non-finite values produced by op '") + op + "'");
  return n;
}

// Wires parents/backprop only when a gradient can actually reach this node.
Var attach(NodePtr n, std::initializer_list<Var> inputs,
           std::function<void(Node&)> backprop) {
  bool needs = false;
  for (const auto& v : inputs) needs = needs || v.requires_grad();
  if (needs) {
    n->requires_grad = true;
    for (const auto& v : inputs) n->parents.push_back(v.node());
    n->backprop = std::move(backprop);
  }
  return Var(std::move(n));
}

}  // namespace

Var make_var(Matrix value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  if (requires_grad) n->ensure_grad();
  return Var(std::move(n));
}

Var scalar(double value) { return constant(Matrix::Constant(1, 1, value)); }

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks() noexcept { return g_finite_checks.load(); }

Var add(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("add", a, b);
  auto n = fresh(a.value() + b.value(), "add");
  return attach(n, {a, b}, [pa = a.node(), pb = b.node()](Node& self) {
    if (pa->requires_grad) pa->ensure_grad() += self.grad;
    if (pb->requires_grad) pb->ensure_grad() += self.grad;
  });
}

Var sub(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("subtract", a, b);
  auto n = fresh(a.value() - b.value(), "subtract");
  return attach(n, {a, b}, [pa = a.node(), pb = b.node()](Node& self) {
    if (pa->requires_grad) pa->ensure_grad() += self.grad;
    if (pb->requires_grad) pb->ensure_grad() -= self.grad;
  });
}

Var mul(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("multiply", a, b);
  auto n = fresh(a.value().cwiseProduct(b.value()), "multiply");
  return attach(n, {a, b}, [pa = a.node(), pb = b.node()](Node& self) {
    if (pa->requires_grad)
      pa->ensure_grad().array() += self.grad.array() * pb->value.array();
    if (pb->requires_grad)
      pb->ensure_grad().array() += self.grad.array() * pa->value.array();
  });
}

Var divide(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("divide", a, b);
  auto n = fresh(a.value().cwiseQuotient(b.value()), "divide");
  return attach(n, {a, b}, [pa = a.node(), pb = b.node()](Node& self) {
    if (pa->requires_grad)
      pa->ensure_grad().array() += self.grad.array() / pb->value.array();
    if (pb->requires_grad)
      pb->ensure_grad().array() -= self.grad.array() * pa->value.array() /
                                   (pb->value.array() * pb->value.array());
  });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) shape_error("matmul", a, b);
  auto n = fresh(a.value() * b.value(), "matmul");
  return attach(n, {a, b}, [pa = a.node(), pb = b.node()](Node& self) {
    if (pa->requires_grad)
      pa->ensure_grad().noalias() += self.grad * pb->value.transpose();
    if (pb->requires_grad)
      pb->ensure_grad().noalias() += pa->value.transpose() * self.grad;
  });
}

Var neg(const Var& x) {
  auto n = fresh(-x.value(), "negate");
  return attach(n, {x}, [p = x.node()](Node& self) {
    p->ensure_grad() -= self.grad;
  });
}

Var exp(const Var& x) {
  auto n = fresh(x.value().array().exp().matrix(), "exp");
  return attach(n, {x}, [p = x.node()](Node& self) {
    p->ensure_grad().array() += self.grad.array() * self.value.array();
  });
}

Var log(const Var& x) {
  if ((x.value().array() <= 0.0).any())
    throw std::domain_error("log: non-positive entry");
  auto n = fresh(x.value().array().log().matrix(), "log");
  return attach(n, {x}, [p = x.node()](Node& self) {
    p->ensure_grad().array() += self.grad.array() / p->value.array();
  });
}

Var expm1(const Var& x) {
  Matrix v = x.value().unaryExpr([](double e) { return std::expm1(e); });
  auto n = fresh(std::move(v), "expm1");
  return attach(n, {x}, [p = x.node()](Node& self) {
    p->ensure_grad().array() += self.grad.array() * p->value.array().exp();
  });
}

Var square(const Var& x) {
  auto n = fresh(x.value().array().square().matrix(), "square");
  return attach(n, {x}, [p = x.node()](Node& self) {
    p->ensure_grad().array() += 2.0 * self.grad.array() * p->value.array();
  });
}

Var sigmoid(const Var& x) {
  Matrix v = (1.0 + (-x.value().array()).exp()).inverse().matrix();
  auto n = fresh(std::move(v), "sigmoid");
  return attach(n, {x}, [p = x.node()](Node& self) {
    const auto s = self.value.array();
    p->ensure_grad().array() += self.grad.array() * s * (1.0 - s);
  });
}

Var clamp(const Var& x, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  auto n = fresh(x.value().cwiseMax(lo).cwiseMin(hi), "clamp");
  return attach(n, {x}, [p = x.node(), lo, hi](Node& self) {
    const auto inside =
        (p->value.array() >= lo && p->value.array() <= hi).cast<double>();
    p->ensure_grad().array() += self.grad.array() * inside;
  });
}

Var scale(const Var& x, double s) {
  auto n = fresh(s * x.value(), "scale");
  return attach(n, {x}, [p = x.node(), s](Node& self) {
    p->ensure_grad() += s * self.grad;
  });
}

Var add_scalar(const Var& x, double c) {
  auto n = fresh((x.value().array() + c).matrix(), "add_scalar");
  return attach(n, {x}, [p = x.node()](Node& self) {
    p->ensure_grad() += self.grad;
  });
}

Var sum(const Var& x) {
  auto n = fresh(Matrix::Constant(1, 1, x.value().sum()), "sum");
  return attach(n, {x}, [p = x.node()](Node& self) {
    p->ensure_grad().array() += self.grad(0, 0);
  });
}

Var mean(const Var& x) {
  auto n = fresh(Matrix::Constant(1, 1, x.value().mean()), "mean");
  return attach(n, {x}, [p = x.node()](Node& self) {
    p->ensure_grad().array() += self.grad(0, 0) / static_cast<double>(p->value.size());
  });
}

Var row_sum(const Var& x) {
  auto n = fresh(x.value().rowwise().sum(), "row_sum");
  return attach(n, {x}, [p = x.node()](Node& self) {
    p->ensure_grad().colwise() += self.grad.col(0);
  });
}

Var bias_add(const Var& x, const Var& b) {
  if (b.rows() != 1 || b.cols() != x.cols()) shape_error("bias_add", x, b);
  Matrix v = x.value();
  v.rowwise() += b.value().row(0);
  auto n = fresh(std::move(v), "bias_add");
  return attach(n, {x, b}, [px = x.node(), pb = b.node()](Node& self) {
    if (px->requires_grad) px->ensure_grad() += self.grad;
    if (pb->requires_grad) pb->ensure_grad() += self.grad.colwise().sum();
  });
}

Var batched_matvec(const Var& b_flat, const Var& u, Index out_dim) {
  const Index n_rows = b_flat.rows();
  const Index m = u.cols();
  if (u.rows() != n_rows || b_flat.cols() != out_dim * m)
    shape_error("batched_matvec", b_flat, u);
  Matrix v(n_rows, out_dim);
  for (Index i = 0; i < n_rows; ++i) {
    for (Index r = 0; r < out_dim; ++r) {
      double acc = 0.0;
      for (Index c = 0; c < m; ++c)
        acc += b_flat.value()(i, r * m + c) * u.value()(i, c);
      v(i, r) = acc;
    }
  }
  auto n = fresh(std::move(v), "batched_matvec");
  return attach(n, {b_flat, u},
                [pb = b_flat.node(), pu = u.node(), out_dim, m](Node& self) {
                  const Index rows = self.value.rows();
                  for (Index i = 0; i < rows; ++i) {
                    for (Index r = 0; r < out_dim; ++r) {
                      const double g = self.grad(i, r);
                      for (Index c = 0; c < m; ++c) {
                        if (pb->requires_grad)
                          pb->ensure_grad()(i, r * m + c) += g * pu->value(i, c);
                        if (pu->requires_grad)
                          pu->ensure_grad()(i, c) += g * pb->value(i, r * m + c);
                      }
                    }
                  }
                });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  if (x.cols() < 1) throw std::invalid_argument("layer_norm: empty feature dim");
  if (gain.rows() != 1 || gain.cols() != x.cols()) shape_error("layer_norm", x, gain);
  if (bias.rows() != 1 || bias.cols() != x.cols()) shape_error("layer_norm", x, bias);
  const Index f = x.cols();
  const double inv_f = 1.0 / static_cast<double>(f);
  Vector mu = x.value().rowwise().mean();
  Matrix centered = x.value().colwise() - mu;
  Vector inv_std =
      ((centered.array().square().rowwise().sum() * inv_f) + eps).sqrt().inverse();
  Matrix xhat = centered.array().colwise() * inv_std.array();
  Matrix v = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  v.rowwise() += bias.value().row(0);
  auto n = fresh(std::move(v), "layer_norm");
  return attach(
      n, {x, gain, bias},
      [px = x.node(), pg = gain.node(), pbias = bias.node(),
       xhat = std::move(xhat), inv_std = std::move(inv_std), inv_f](Node& self) {
        if (pg->requires_grad)
          pg->ensure_grad() += self.grad.cwiseProduct(xhat).colwise().sum();
        if (pbias->requires_grad) pbias->ensure_grad() += self.grad.colwise().sum();
        if (px->requires_grad) {
          // dx = s * (g - mean(g) - xhat * mean(g .* xhat)), per row
          Matrix g = self.grad.array().rowwise() * pg->value.row(0).array();
          Vector g_mean = g.rowwise().mean();
          Vector gx_mean = g.cwiseProduct(xhat).rowwise().mean();
          Matrix dx = ((g.colwise() - g_mean) -
                       (xhat.array().colwise() * gx_mean.array()).matrix())
                          .array()
                          .colwise() *
                      inv_std.array();
          px->ensure_grad() += dx;
        }
      });
}

Var swish(const Var& x) { return mul(x, sigmoid(x)); }

Var stop_gradient(const Var& x) {
  auto n = fresh(x.value(), "stop_gradient");
  n->requires_grad = false;
  return Var(std::move(n));
}

void backward(const Var& root) {
  if (!root.defined()) throw std::invalid_argument("backward: undefined root");
  if (root.rows() != 1 || root.cols() != 1)
    throw std::invalid_argument("backward: root must be a 1x1 scalar");
  Node* root_node = root.node().get();
  if (root_node->backward_ran)
    throw std::logic_error("backward: already ran on this root");
  root_node->backward_ran = true;

  // Iterative post-order DFS; reversed post-order is a valid topological
  // order for the backward sweep.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root_node, 0);
  visited.insert(root_node);
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      Node* child = node->parents[next_child++].get();
      if (child->requires_grad && visited.insert(child).second)
        stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root_node->ensure_grad()(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop) {
      node->ensure_grad();
      node->backprop(*node);
    }
  }
}

}  // namespace qvae::ad
