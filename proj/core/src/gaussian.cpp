#include "qvae/gaussian.hpp"

#include <cmath>

#include "qvae/rng.hpp"

namespace qvae {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;

void require_same_dim(const DiagonalGaussian& a, const DiagonalGaussian& b) {
  if (a.dim() != b.dim())
    throw std::invalid_argument("diagonal Gaussians have mismatched dimensions");
}
}  // namespace

DiagonalGaussian::DiagonalGaussian(Vector mean, Vector log_variance)
    : mean_(std::move(mean)), log_variance_(std::move(log_variance)) {
  if (mean_.size() < 1 || mean_.size() != log_variance_.size())
    throw std::invalid_argument("DiagonalGaussian: mean/log-variance size mismatch");
  if (!mean_.allFinite() || !log_variance_.allFinite())
    throw std::invalid_argument("DiagonalGaussian: non-finite parameter");
  log_variance_ = log_variance_.cwiseMax(kLogVarMin).cwiseMin(kLogVarMax);
}

DiagonalGaussian DiagonalGaussian::standard(Index dim) {
  return DiagonalGaussian(Vector::Zero(dim), Vector::Zero(dim));
}

double gauss_log_density(const Vector& z, const DiagonalGaussian& g) {
  if (z.size() != g.dim())
    throw std::invalid_argument("gauss_log_density: dimension mismatch");
  const auto& lv = g.log_variance();
  double acc = 0.0;
  for (Index i = 0; i < z.size(); ++i) {
    const double d = z[i] - g.mean()[i];
    acc += kLog2Pi + lv[i] + d * d * std::exp(-lv[i]);
  }
  return -0.5 * acc;
}

double kl_divergence(const DiagonalGaussian& p1, const DiagonalGaussian& p2) {
  require_same_dim(p1, p2);
  const auto& lv1 = p1.log_variance();
  const auto& lv2 = p2.log_variance();
  double acc = 0.0;
  for (Index i = 0; i < p1.dim(); ++i) {
    const double ratio = std::exp(lv1[i] - lv2[i]);
    const double d = p2.mean()[i] - p1.mean()[i];
    acc += ratio + lv2[i] - lv1[i] - 1.0 + d * d * std::exp(-lv2[i]);
  }
  return 0.5 * acc;
}

double tsallis_divergence(const DiagonalGaussian& p1, const DiagonalGaussian& p2,
                          QValue q) {
  require_same_dim(p1, p2);
  if (q.is_one()) return kl_divergence(p1, p2);
  const double qv = q.value();
  // integral of p1^q p2^(1-q) dz = exp(J/2) with, per dimension,
  //   J += q ln v2 + (1-q) ln v1 - ln(q v2 + (1-q) v1)
  //        - q (1-q) (mu2-mu1)^2 / (q v2 + (1-q) v1)
  // (complete the square in the blended exponent; the 2*pi powers cancel).
  double j = 0.0;
  for (Index i = 0; i < p1.dim(); ++i) {
    const double lv1 = p1.log_variance()[i];
    const double lv2 = p2.log_variance()[i];
    const double mix = qv * std::exp(lv2) + (1.0 - qv) * std::exp(lv1);
    if (mix <= 0.0)
      throw definiteness_error(
          "tsallis_divergence: mixture variance not positive (q > 1)");
    const double d = p2.mean()[i] - p1.mean()[i];
    j += qv * lv2 + (1.0 - qv) * lv1 - std::log(mix) - qv * (1.0 - qv) * d * d / mix;
  }
  return std::expm1(0.5 * j) / (qv - 1.0);
}

MonteCarloEstimate tsallis_divergence_monte_carlo(const DiagonalGaussian& p1,
                                                  const DiagonalGaussian& p2,
                                                  QValue q, long n_samples,
                                                  std::uint64_t seed) {
  require_same_dim(p1, p2);
  if (n_samples < 1000)
    throw std::invalid_argument("tsallis_divergence_monte_carlo: need >= 1000 samples");
  auto rng = make_rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  const Vector scale = (0.5 * p1.log_variance()).array().exp().matrix();
  Vector z(p1.dim());
  double sum = 0.0, sum_sq = 0.0;
  const double om = 1.0 - q.value();
  for (long n = 0; n < n_samples; ++n) {
    for (Index i = 0; i < z.size(); ++i)
      z[i] = p1.mean()[i] + scale[i] * unit(rng);
    const double log_ratio = gauss_log_density(z, p2) - gauss_log_density(z, p1);
    const double w =
        q.is_one() ? -log_ratio : -std::expm1(om * log_ratio) / om;
    sum += w;
    sum_sq += w * w;
  }
  const double n = static_cast<double>(n_samples);
  const double mean = sum / n;
  const double var = std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0));
  return {mean, std::sqrt(var / n)};
}

}  // namespace qvae
