#include "qvae/metrics.hpp"

#include <Eigen/Cholesky>
#include <stdexcept>

namespace qvae {

double mardia_kurtosis(const Matrix& z_samples) {
  const Index n = z_samples.rows();
  const Index d = z_samples.cols();
  if (n <= d + 1)
    throw std::invalid_argument("mardia_kurtosis: need more samples than d + 1");
  if (!z_samples.allFinite())
    throw std::invalid_argument("mardia_kurtosis: non-finite entries");

  const Eigen::RowVectorXd mu = z_samples.colwise().mean();
  const Matrix centered = z_samples.rowwise() - mu;
  Matrix cov = (centered.transpose() * centered) / static_cast<double>(n - 1);

  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success || llt.rcond() < 1e-10) {
    cov += 1e-6 * Matrix::Identity(d, d);
    llt.compute(cov);
    if (llt.info() != Eigen::Success || llt.rcond() < 1e-14)
      throw std::runtime_error("mardia_kurtosis: covariance numerically singular");
  }

  const Matrix solved = llt.solve(centered.transpose());  // (d, N)
  double acc = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double maha_sq = centered.row(i).dot(solved.col(i));
    acc += maha_sq * maha_sq;
  }
  return acc / static_cast<double>(n) -
         static_cast<double>(d) * static_cast<double>(d + 2);
}

double bce(const Matrix& x, const Matrix& p) {
  if (x.rows() != p.rows() || x.cols() != p.cols())
    throw std::invalid_argument("bce: shape mismatch");
  const auto pc = p.array().max(1e-7).min(1.0 - 1e-7);
  const auto per_entry = x.array() * pc.log() + (1.0 - x.array()) * (1.0 - pc).log();
  return -per_entry.rowwise().sum().mean();
}

double mse(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("mse: shape mismatch");
  return (a - b).array().square().mean();
}

}  // namespace qvae
