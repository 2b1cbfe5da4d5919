#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ncs {

/// Discretized variance-preserving noise schedule with linear beta_t for
/// t = 0..T. alpha_bar_t is the product of (1 - beta_s) over s = 1..t, so
/// alpha_bar_0 = 1 and the forward kernel at step t is
/// N(sqrt(alpha_bar_t) x0, (1 - alpha_bar_t) I).
class Schedule {
 public:
  static Schedule build(int steps, double beta0, double betaT);

  int steps() const noexcept { return steps_; }
  double beta0() const noexcept { return beta_.front(); }
  double betaT() const noexcept { return beta_.back(); }

  double beta(int t) const { return beta_.at(t); }
  double alpha(int t) const { return 1.0 - beta_.at(t); }
  double alpha_bar(int t) const { return alpha_bar_.at(t); }
  /// Standard deviation of the forward kernel, sqrt(1 - alpha_bar_t).
  double sigma_bar(int t) const { return sigma_bar_.at(t); }
  /// Loss weight lambda(t) = 1 - alpha_bar_t.
  double weight(int t) const { return 1.0 - alpha_bar_.at(t); }

  /// FNV-1a hash of (T, beta0, betaT); identifies the schedule in checkpoints.
  std::uint64_t fingerprint() const noexcept;
  std::string fingerprint_hex() const;

 private:
  Schedule() = default;

  int steps_ = 0;
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
  std::vector<double> sigma_bar_;
};

}  // namespace ncs
