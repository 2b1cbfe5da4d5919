#include "ncs/linalg.hpp"

#include "ncs/error.hpp"

namespace ncs {

Eigen::MatrixXd cholesky_with_jitter(const Eigen::MatrixXd& a, const std::string& what,
                                     double* used_jitter) {
  if (a.rows() != a.cols()) throw invalid_argument(what + ": matrix is not square");
  if (a.rows() == 0) return Eigen::MatrixXd(0, 0);
  for (double jitter : kJitterLadder) {
    Eigen::MatrixXd m = a;
    m.diagonal().array() += jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(m);
    if (llt.info() == Eigen::Success) {
      if (used_jitter) *used_jitter = jitter;
      return llt.matrixL();
    }
  }
  throw numerical_error(what + ": Cholesky factorization failed after maximum jitter 1e-8");
}

SymmetricEigen symmetric_eigen(const Eigen::MatrixXd& a) {
  if (a.rows() == 0) return {Eigen::MatrixXd(0, 0), Eigen::VectorXd(0)};
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  if (es.info() != Eigen::Success) throw numerical_error("symmetric eigen-decomposition failed");
  SymmetricEigen out{es.eigenvectors(), es.eigenvalues()};
  out.values = out.values.cwiseMax(0.0);
  return out;
}

}  // namespace ncs
