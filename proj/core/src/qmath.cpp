#include "qvae/qmath.hpp"

#include <cmath>

namespace qvae {

QValue::QValue(double q) : q_(q) {
  if (!std::isfinite(q) || q <= 0.0 || q >= 2.0)
    throw std::domain_error("QValue: q must be finite and in (0, 2)");
}

bool QValue::is_one() const noexcept { return std::abs(q_ - 1.0) < kOneThreshold; }

double q_log(double x, QValue q) {
  if (!std::isfinite(x)) throw std::domain_error("q_log: non-finite argument");
  if (x <= 0.0) throw std::domain_error("q_log: argument must be positive");
  if (q.is_one()) return std::log(x);
  const double om = 1.0 - q.value();
  // x^(1-q) = exp((1-q) ln x); expm1 keeps precision near q = 1.
  return std::expm1(om * std::log(x)) / om;
}

double q_exp(double x, QValue q) {
  if (q.is_one()) return std::exp(x);
  const double om = 1.0 - q.value();
  const double base = 1.0 + om * x;
  if (base <= 0.0) return 0.0;
  return std::pow(base, 1.0 / om);
}

double q_product(double x, double y, QValue q) {
  if (x < 0.0 || y < 0.0)
    throw std::domain_error("q_product: arguments must be nonnegative");
  if (q.is_one()) return x * y;
  const double om = 1.0 - q.value();
  // For q > 1 a zero factor sends x^(1-q) to +inf; the product limit is 0.
  if (om < 0.0 && (x == 0.0 || y == 0.0)) return 0.0;
  const double s = std::pow(x, om) + std::pow(y, om);
  if (s <= 1.0) return 0.0;
  return std::pow(s - 1.0, 1.0 / om);
}

}  // namespace qvae
