#pragma once

#include "qvae/tensor.hpp"

namespace qvae {

// Multivariate excess kurtosis of the rows of Z (N x d):
//   mean of [ (z - mu)' Sigma^{-1} (z - mu) ]^2  -  d (d + 2)
// with the sample covariance (1/(N-1)). Zero in expectation for Gaussian
// rows; larger values indicate heavier-tailed axis usage. A ridge of
// 1e-6 I is added only when the covariance factorization is near-singular,
// so the statistic stays affine-invariant on well-conditioned data.
// Requires N > d + 1; throws std::runtime_error if the covariance stays
// singular even after the ridge.
double mardia_kurtosis(const Matrix& z_samples);

// Mean over rows of the per-row sum of -[x ln p + (1-x) ln(1-p)], with p
// clamped into [1e-7, 1-1e-7] before the logs.
double bce(const Matrix& x, const Matrix& p);

double mse(const Matrix& a, const Matrix& b);

}  // namespace qvae
