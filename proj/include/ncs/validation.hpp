#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ncs/diffusion.hpp"
#include "ncs/grid.hpp"
#include "ncs/processes.hpp"
#include "ncs/rng.hpp"
#include "ncs/schedule.hpp"
#include "ncs/score.hpp"
#include "ncs/simulator.hpp"

namespace ncs {

enum class SampleSource { NCS, ExactGaussian };

const char* to_string(SampleSource s);

/// Completes partially observed fields. Column b of `observations` holds a
/// full-length field whose entries at masks(:, b) == 1 are kept; the result
/// has the same shape with every unobserved entry filled in. Column b uses
/// rng.substream(first + b) only.
class ConditionalSampler {
 public:
  virtual ~ConditionalSampler() = default;
  virtual Eigen::MatrixXd complete(const Eigen::MatrixXd& observations, const Eigen::MatrixXd& masks,
                                   std::span<const double> thetas, const RngStream& rng, std::uint64_t first,
                                   int threads) const = 0;
  virtual SampleSource source() const = 0;
};

/// Exact kriging sampler for the Gaussian process. Columns sharing a mask
/// (consecutively) reuse one conditional factorization.
class ExactGaussianSampler final : public ConditionalSampler {
 public:
  ExactGaussianSampler(const GridSpec& g, const GPParams& p);
  Eigen::MatrixXd complete(const Eigen::MatrixXd& observations, const Eigen::MatrixXd& masks,
                           std::span<const double> thetas, const RngStream& rng, std::uint64_t first,
                           int threads) const override;
  SampleSource source() const override { return SampleSource::ExactGaussian; }

 private:
  GridSpec grid_;
  Eigen::MatrixXd cov_;
};

/// Reverse-diffusion sampler over any ScoreFunction.
class DiffusionSampler final : public ConditionalSampler {
 public:
  DiffusionSampler(const Schedule& sched, const ScoreFunction& score, SamplerOptions opts = {})
      : sched_(sched), score_(score), opts_(opts) {}
  Eigen::MatrixXd complete(const Eigen::MatrixXd& observations, const Eigen::MatrixXd& masks,
                           std::span<const double> thetas, const RngStream& rng, std::uint64_t first,
                           int threads) const override;
  SampleSource source() const override { return SampleSource::NCS; }

 private:
  Schedule sched_;
  const ScoreFunction& score_;
  SamplerOptions opts_;
};

/// Mask law for evaluation data: Bernoulli(rho) or a uniform size-k subset.
struct MaskLaw {
  enum class Kind { Bernoulli, FixedCount } kind = Kind::Bernoulli;
  double rho = 0.05;
  std::size_t k = 1;

  Mask sample(const GridSpec& g, RngStream& rng) const;
  std::string describe() const;
};

struct CondEvalSet {
  Field reference;
  Mask mask;
  double theta = 0.0;
  SampleSource source = SampleSource::NCS;
  /// |unobserved| x m; row r is grid index mask.unobserved_indices()[r].
  Eigen::MatrixXd completions;
  std::size_t m() const noexcept { return static_cast<std::size_t>(completions.cols()); }
};

struct UncondEvalSet {
  /// n x m merged fields [observed, completion].
  Eigen::MatrixXd merged;
  /// n x m masks used for each merged field.
  Eigen::MatrixXd masks;
  /// n x m independent draws from the true unconditional law.
  Eigen::MatrixXd truth;
  double theta = 0.0;
  MaskLaw law;
  SampleSource source = SampleSource::NCS;
  std::size_t m() const noexcept { return static_cast<std::size_t>(merged.cols()); }
};

/// One reference field, one mask from `law`, m completions.
CondEvalSet build_cond_eval(const ConditionalSampler& sampler, const ProcessSimulator& sim, const MaskLaw& law,
                            std::size_t m, const RngStream& rng, int threads = 1);
/// Same, with a caller-supplied reference and mask.
CondEvalSet build_cond_eval(const ConditionalSampler& sampler, const Field& reference, const Mask& mask,
                            double theta, std::size_t m, const RngStream& rng, int threads = 1);

/// Fresh field, fresh mask and one completion per replicate,
/// plus m independent reference draws from the simulator.
UncondEvalSet build_uncond_eval(const ConditionalSampler& sampler, const ProcessSimulator& sim, const MaskLaw& law,
                                std::size_t m, const RngStream& rng, int threads = 1);

// ---------------------------------------------------------------------------
// Statistics

struct DistanceBins {
  int count = 30;
  double max_distance = 0.0;  // <= 0: half the domain diagonal
  double resolved_max(const GridSpec& g) const;
};

struct ChiRow {
  double h_lo = 0.0;
  double h_hi = 0.0;
  double h_mean = 0.0;
  std::size_t pairs = 0;
  double zeta = 1.0;
  double chi = 1.0;
};

struct ChiTable {
  std::vector<ChiRow> rows;  // first row is the h = 0 self-pair row
  std::vector<std::string> warnings;
};

/// F-madogram estimate of the pairwise extremal coefficient pooled over
/// pixel pairs in each distance bin. Columns of `fields` are replicates.
ChiTable extremal_correlation(const Eigen::MatrixXd& fields, const GridSpec& g, const DistanceBins& bins);

/// Bin-averaged Brown-Resnick closed form, pooled over the same pairs the
/// estimator uses.
ChiTable theoretical_extremal_correlation(const GridSpec& g, const BRParams& p, const DistanceBins& bins);

/// Per-replicate min, max and sum of absolute values.
struct SummaryValues {
  std::vector<double> min;
  std::vector<double> max;
  std::vector<double> abs_sum;
};
SummaryValues summary_distributions(const Eigen::MatrixXd& fields);

/// Scott's rule bandwidth factor m^(-1/(d+4)).
double scott_factor(std::size_t m, int d);
/// Gaussian KDE of 1-D samples evaluated at `points`.
std::vector<double> kde1d(std::span<const double> samples, std::span<const double> points);
/// Gaussian KDE of 2-D samples with a diagonal Scott bandwidth, evaluated on
/// the tensor grid xs x ys (result index = iy * xs.size() + ix).
std::vector<double> kde2d(std::span<const double> x, std::span<const double> y, std::span<const double> xs,
                          std::span<const double> ys);
/// Evenly spaced points over the [q_lo, q_hi] empirical quantile range.
std::vector<double> quantile_grid(std::span<const double> samples, double q_lo, double q_hi, std::size_t count);
double empirical_quantile(std::vector<double> samples, double q);

/// Pixelwise mean of completions on the full grid; observed pixels are NaN.
std::vector<double> conditional_mean_field(const CondEvalSet& c);
/// Pearson correlation of each unobserved pixel with `anchor`; observed
/// pixels are NaN; the anchor itself is 1.
std::vector<double> pcc_heatmap(const CondEvalSet& c, std::size_t anchor);

double ks_two_sample(std::vector<double> a, std::vector<double> b);
double ks_normal(std::vector<double> a, double mean, double sd);
/// Two-sample KS statistic per row (pixel) of two replicate matrices.
std::vector<double> per_pixel_ks(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);
/// V-statistic energy distance between two sets of column vectors.
double energy_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);
/// Upper `level` quantile of the energy distance under random relabelling.
double energy_permutation_threshold(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, std::size_t permutations,
                                    double level, RngStream& rng);

}  // namespace ncs
