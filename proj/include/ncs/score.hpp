#pragma once

#include <Eigen/Dense>
#include <span>

namespace ncs {

/// A batch of score queries. Each column of `states` is a full row-major
/// field x_t whose observed entries hold the (frozen) observations; `masks`
/// has the same shape with 1.0 at observed entries.
struct ScoreQuery {
  const Eigen::MatrixXd& states;
  const Eigen::MatrixXd& masks;
  std::span<const double> thetas;
  std::span<const int> steps;
};

/// Conditional score s(x_t, M, theta, t). Implementations must return exact
/// zeros at every observed entry and be safe for concurrent const calls.
class ScoreFunction {
 public:
  virtual ~ScoreFunction() = default;
  virtual Eigen::MatrixXd evaluate(const ScoreQuery& q) const = 0;
  /// True when the function reads theta_1 (parameter-amortized networks).
  virtual bool requires_theta() const { return false; }
};

}  // namespace ncs
