#pragma once

#include <Eigen/Dense>
#include <string>

namespace ncs {

/// Diagonal jitter ladder tried in order before a factorization is declared
/// failed.
inline constexpr double kJitterLadder[] = {0.0, 1e-12, 1e-10, 1e-8};

/// Lower Cholesky factor of a symmetric matrix, retrying with the jitter
/// ladder. Throws a numerical error naming `what` when every rung fails.
Eigen::MatrixXd cholesky_with_jitter(const Eigen::MatrixXd& a, const std::string& what,
                                     double* used_jitter = nullptr);

/// Eigen-decomposition of a symmetric PSD matrix; eigenvalues below zero
/// (round-off) are clipped to zero.
struct SymmetricEigen {
  Eigen::MatrixXd vectors;
  Eigen::VectorXd values;
};
SymmetricEigen symmetric_eigen(const Eigen::MatrixXd& a);

}  // namespace ncs
