#pragma once

#include <cstdint>
#include <stdexcept>

#include "qvae/qmath.hpp"
#include "qvae/tensor.hpp"

namespace qvae {

// Gaussian with diagonal covariance, parameterized by mean and log-variance.
// Log-variances are clamped to [kLogVarMin, kLogVarMax] at construction so
// density ratios and determinant terms cannot overflow.
class DiagonalGaussian {
 public:
  static constexpr double kLogVarMin = -20.0;
  static constexpr double kLogVarMax = 20.0;

  DiagonalGaussian(Vector mean, Vector log_variance);

  static DiagonalGaussian standard(Index dim);

  Index dim() const noexcept { return mean_.size(); }
  const Vector& mean() const noexcept { return mean_; }
  const Vector& log_variance() const noexcept { return log_variance_; }
  Vector variance() const { return log_variance_.array().exp().matrix(); }

 private:
  Vector mean_;
  Vector log_variance_;
};

// Raised when the mixture covariance q*var2 + (1-q)*var1 of the deformed
// divergence loses positivity (possible only for q > 1).
struct definiteness_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

double gauss_log_density(const Vector& z, const DiagonalGaussian& g);

// Standard KL divergence KL(p1 || p2).
double kl_divergence(const DiagonalGaussian& p1, const DiagonalGaussian& p2);

// Deformed divergence -E_{p1}[ln_q(p2/p1)], evaluated in closed form as
// (integral of p1^q p2^(1-q) - 1) / (q - 1). Collapses to kl_divergence at
// the q = 1 branch and converges to it as q -> 1.
double tsallis_divergence(const DiagonalGaussian& p1, const DiagonalGaussian& p2,
                          QValue q);

struct MonteCarloEstimate {
  double estimate;
  double std_error;
};

// Sample-mean estimate of -ln_q(p2(z)/p1(z)) over z ~ p1, with its standard
// error. Oracle for tsallis_divergence; owns its generator per call.
MonteCarloEstimate tsallis_divergence_monte_carlo(const DiagonalGaussian& p1,
                                                  const DiagonalGaussian& p2,
                                                  QValue q, long n_samples,
                                                  std::uint64_t seed);

}  // namespace qvae
