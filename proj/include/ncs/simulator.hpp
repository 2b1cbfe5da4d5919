#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <string>

#include "ncs/grid.hpp"
#include "ncs/processes.hpp"
#include "ncs/rng.hpp"

namespace ncs {

enum class ProcessKind { Gaussian, BrownResnick };

const char* to_string(ProcessKind k);
ProcessKind process_from_string(const std::string& s);

struct ProcessSpec {
  ProcessKind kind = ProcessKind::Gaussian;
  GPParams gp;
  BRParams br;
  StoppingConfig stopping;

  void validate() const;
  /// theta_1: the Gaussian length scale or the Brown-Resnick range.
  double theta1() const;
  ProcessSpec with_theta1(double theta) const;
  /// Scale of simulated fields as used for training and evaluation.
  Scale field_scale() const { return kind == ProcessKind::Gaussian ? Scale::Raw : Scale::Gumbel; }
};

/// Unconditional draws on the training/evaluation scale (Gumbel for
/// Brown-Resnick). Immutable after construction.
class ProcessSimulator {
 public:
  ProcessSimulator(const GridSpec& g, const ProcessSpec& spec);

  const ProcessSpec& spec() const noexcept { return spec_; }
  const GridSpec& grid() const noexcept { return grid_; }

  Field sample(RngStream& rng) const;
  /// Column j is drawn from rng.substream(first + j); deterministic for any
  /// thread count.
  Eigen::MatrixXd sample_columns(std::size_t count, const RngStream& rng, std::uint64_t first, int threads) const;
  /// Number of Brown-Resnick draws that hit StoppingConfig::max_points.
  std::size_t truncated_draws() const noexcept;

 private:
  GridSpec grid_;
  ProcessSpec spec_;
  std::unique_ptr<GaussianSimulator> gauss_;
  std::unique_ptr<BrownResnickSimulator> br_;
  std::shared_ptr<std::size_t> truncated_;
};

}  // namespace ncs
