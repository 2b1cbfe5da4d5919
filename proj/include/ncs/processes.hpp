#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <vector>

#include "ncs/grid.hpp"
#include "ncs/rng.hpp"
#include "ncs/schedule.hpp"
#include "ncs/score.hpp"

namespace ncs {

// ---------------------------------------------------------------------------
// Gaussian process with exponential covariance nu * exp(-d / ell).

struct GPParams {
  double length_scale = 3.0;
  double variance = 1.5;
  void validate() const;
};

Eigen::MatrixXd gp_covariance(const GridSpec& g, const GPParams& p);

/// Unconditional zero-mean simulator; holds the Cholesky factor of the grid
/// covariance so repeated draws cost one triangular product.
class GaussianSimulator {
 public:
  GaussianSimulator(const GridSpec& g, const GPParams& p);

  Field sample(RngStream& rng) const;
  /// `count` independent draws as columns.
  Eigen::MatrixXd sample_columns(std::size_t count, RngStream& rng) const;
  const Eigen::MatrixXd& factor() const noexcept { return chol_; }

 private:
  Eigen::MatrixXd chol_;
};

Field gp_unconditional(const GridSpec& g, const GPParams& p, RngStream& rng);

/// Law of the unobserved entries given the observed ones. `unobserved`
/// lists the grid indices of the mean/covariance rows in ascending order.
struct ExactConditional {
  Mask mask;
  std::vector<std::size_t> unobserved;
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

ExactConditional gp_exact_conditional(const GridSpec& g, const GPParams& p, const Field& obs,
                                      const Mask& mask);
ExactConditional gp_exact_conditional(const Eigen::MatrixXd& covariance, const Field& obs,
                                      const Mask& mask);

/// Draws from an ExactConditional through its symmetric square root.
class ConditionalNormalSampler {
 public:
  explicit ConditionalNormalSampler(const ExactConditional& c);
  Eigen::VectorXd sample(RngStream& rng) const;
  const ExactConditional& conditional() const noexcept { return cond_; }

 private:
  ExactConditional cond_;
  Eigen::MatrixXd root_;
};

/// Exact score of the forward-diffused conditional law
/// N(sqrt(ab) mu, ab Sigma + (1 - ab) I) evaluated at x_t (unobserved part).
Eigen::VectorXd gp_perturbed_score(const Eigen::VectorXd& x_unobserved, int t, const Schedule& sched,
                                   const ExactConditional& cond);

/// ScoreFunction wrapper around gp_perturbed_score for one conditioning set.
/// Caches an eigen-decomposition of the conditional covariance so each call
/// costs two dense products per batch.
class GaussianConditionalScore final : public ScoreFunction {
 public:
  GaussianConditionalScore(ExactConditional cond, const Schedule& sched);
  Eigen::MatrixXd evaluate(const ScoreQuery& q) const override;

 private:
  ExactConditional cond_;
  Eigen::MatrixXd vectors_;
  Eigen::VectorXd values_;
  std::vector<double> alpha_bar_;
};

// ---------------------------------------------------------------------------
// Brown-Resnick max-stable process with semivariogram (h / range)^smoothness.

struct BRParams {
  double range = 3.0;
  double smoothness = 1.5;
  void validate() const;
};

double br_semivariogram(double h, const BRParams& p);
/// Closed-form pairwise extremal coefficient 2 Phi(sqrt(2 gamma(h)) / 2),
/// where 2 gamma is the variogram of the log spectral field.
double br_extremal_coefficient(double h, const BRParams& p);

/// Truncation of the spectral construction. A point with Poisson intensity
/// value eta is skipped (and simulation stops) once eta * bound is below the
/// pointwise minimum of the running maximum. bound <= 0 selects the exact
/// bound n, valid because the normalized spectral functions never exceed n.
struct StoppingConfig {
  double bound = 0.0;
  std::size_t max_points = 5'000'000;
};

struct BRSample {
  Field field;              // unit Frechet scale
  std::size_t points = 0;   // spectral functions used
  bool truncated = false;   // max_points reached before the stopping rule fired
};

class BrownResnickSimulator {
 public:
  BrownResnickSimulator(const GridSpec& g, const BRParams& p);

  BRSample sample(RngStream& rng, const StoppingConfig& stop = {}) const;
  /// Empirical `quantile` of max_s W(s) over `draws` spectral functions,
  /// times `safety`, capped at the exact bound n.
  double calibrate_bound(RngStream& rng, std::size_t draws = 20000, double quantile = 0.9999,
                         double safety = 10.0) const;

 private:
  void spectral_block(RngStream& rng, std::size_t count, Eigen::MatrixXd& log_w) const;

  std::size_t n_;
  Eigen::MatrixXd chol_;   // factor over indices 1..n-1; index 0 is the anchor
  Eigen::MatrixXd gamma_;  // semivariogram between all grid pairs
};

BRSample br_unconditional(const GridSpec& g, const BRParams& p, RngStream& rng,
                          const StoppingConfig& stop = {});

Field frechet_to_gumbel(const Field& f);
Field gumbel_to_frechet(const Field& f);

double normal_cdf(double x);

}  // namespace ncs
