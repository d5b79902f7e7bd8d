#pragma once

#include <stdexcept>

namespace qvae {

// Deformation parameter of the Tsallis-statistics function family.
// The deformed functions are concave/invertible for q > 0 and the diagonal
// Gaussian divergence below is well defined for q < 2, so construction
// enforces q in (0, 2). Values within kOneThreshold of 1 select the
// undeformed (natural log / exp) branch.
class QValue {
 public:
  static constexpr double kOneThreshold = 1e-12;

  explicit QValue(double q);

  double value() const noexcept { return q_; }
  bool is_one() const noexcept;

 private:
  double q_;
};

// ln_q(x) = (x^(1-q) - 1) / (1 - q), natural log at q = 1.
// Throws std::domain_error for x <= 0 or non-finite x.
double q_log(double x, QValue q);

// Inverse of q_log: [1 + (1-q) x]^(1/(1-q)) where the bracket is positive,
// 0 at or beyond the cutoff. exp(x) at q = 1.
double q_exp(double x, QValue q);

// Deformed product: (x^(1-q) + y^(1-q) - 1)^(1/(1-q)) when the inner sum
// exceeds 1, else 0. Under it q_log is additive. Requires x, y >= 0.
double q_product(double x, double y, QValue q);

}  // namespace qvae
