#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ncs/grid.hpp"
#include "ncs/rng.hpp"
#include "ncs/schedule.hpp"
#include "ncs/score.hpp"

namespace ncs {

/// Training/evaluation examples in column layout. Column b holds the
/// assembled state x_t (observed entries equal to x0, unobserved entries
/// diffused), its mask, the standard-normal noise that produced the
/// unobserved entries (zero at observed entries), theta_1 and t.
struct DiffusionBatch {
  Eigen::MatrixXd states;
  Eigen::MatrixXd masks;
  Eigen::MatrixXd noise;
  std::vector<double> thetas;
  std::vector<int> steps;

  std::size_t size() const noexcept { return steps.size(); }
  void validate(const Schedule& sched) const;
  DiffusionBatch select(std::span<const std::size_t> columns) const;
  /// Appends all columns of `other`.
  void append(const DiffusionBatch& other);
};

/// Direct draw from the forward kernel: sqrt(ab_t) x0 + sigma_t eps.
Eigen::VectorXd forward_transition_sample(const Eigen::VectorXd& x0, int t, const Schedule& sched, RngStream& rng);

/// One forward step x_{t-1} -> x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps,
/// for t in [1, T]. Composing steps 1..t reproduces the direct kernel.
Eigen::VectorXd forward_step(const Eigen::VectorXd& x_prev, int t, const Schedule& sched, RngStream& rng);

struct SamplerOptions {
  /// Drop the sqrt(beta_1) noise term of the final (t = 1) reverse step. The
  /// noise is still drawn so streams stay paired with the noisy variant.
  bool suppress_final_noise = false;
  /// Columns advanced together through the score function.
  std::size_t chunk = 64;
  int threads = 1;
};

/// Masked reverse sampler. Column b of `observations` is a full-length field
/// whose entries at masks(:, b) == 1 are kept bit-exactly; the remaining
/// entries start from N(0, I) and follow
///   x_{t-1} = (1 - beta_t)^{-1/2} (x_t + beta_t s(x_t, M, theta, t)) + sqrt(beta_t) eps
/// for t = T..1. Column b draws its randomness from `streams[b]` only.
Eigen::MatrixXd reverse_conditional_sample_batch(const Eigen::MatrixXd& observations, const Eigen::MatrixXd& masks,
                                                 std::span<const double> thetas, const Schedule& sched,
                                                 const ScoreFunction& score, std::span<RngStream> streams,
                                                 const SamplerOptions& opts = {});

Field reverse_conditional_sample(const Field& obs, const Mask& mask, std::optional<double> theta,
                                 const Schedule& sched, const ScoreFunction& score, RngStream& rng,
                                 const SamplerOptions& opts = {});

/// Per-example weighted score-matching loss
///   lambda(t) * || s(x_t) + eps / sigma_t ||^2 over unobserved entries.
std::vector<double> dsm_loss_per_example(const DiffusionBatch& batch, const ScoreFunction& score,
                                         const Schedule& sched);
/// Mean of dsm_loss_per_example.
double dsm_loss(const DiffusionBatch& batch, const ScoreFunction& score, const Schedule& sched);
/// Same loss written as || sigma_t s + eps ||^2, per example.
std::vector<double> dsm_loss_noise_form(const DiffusionBatch& batch, const ScoreFunction& score,
                                        const Schedule& sched);

/// Column matrix of a mask (1.0 = observed).
Eigen::VectorXd mask_column(const Mask& m);

}  // namespace ncs
