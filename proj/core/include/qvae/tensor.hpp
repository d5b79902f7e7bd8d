#pragma once

#include <Eigen/Core>

namespace qvae {

// Dense double-precision storage for everything in the library. Batches of
// vectors are (batch, features) matrices; weights are (in, out); scalars 1x1.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

}  // namespace qvae
