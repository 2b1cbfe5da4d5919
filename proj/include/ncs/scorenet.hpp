#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "ncs/diffusion.hpp"
#include "ncs/rng.hpp"
#include "ncs/schedule.hpp"
#include "ncs/score.hpp"

namespace ncs {

enum class ConditioningMode { MaskOnly, ThetaScaledMask };

const char* to_string(ConditioningMode m);
ConditioningMode conditioning_from_string(const std::string& s);

struct NetConfig {
  int side = 16;
  int base_width = 16;
  int depth = 2;
  int fourier_features = 64;   // sin/cos pairs: fourier_features / 2 frequencies
  double fourier_scale = 16.0;
  std::uint64_t fourier_seed = 0;
  int embed_width = 64;
  ConditioningMode mode = ConditioningMode::MaskOnly;
  int micro_batch = 32;

  void validate() const;
  int width(int level) const { return base_width << level; }
  bool operator==(const NetConfig&) const = default;
};

struct LayoutEntry {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const noexcept { return rows * cols; }
  bool operator==(const LayoutEntry&) const = default;
};

class ParamLayout {
 public:
  std::size_t add(const std::string& name, std::size_t rows, std::size_t cols);
  std::size_t total() const noexcept { return total_; }
  const std::vector<LayoutEntry>& entries() const noexcept { return entries_; }
  const LayoutEntry& at(std::size_t k) const { return entries_.at(k); }
  const LayoutEntry& find(const std::string& name) const;
  bool operator==(const ParamLayout&) const = default;

 private:
  std::vector<LayoutEntry> entries_;
  std::size_t total_ = 0;
};

struct ModelParams {
  ParamLayout layout;
  std::vector<double> values;
  void validate() const;
};

/// U-shaped convolutional encoder-decoder. Input channels: x_t and M (or
/// theta * M); time enters through fixed Gaussian Fourier features of t/T
/// and a two-layer embedding added as a per-channel bias in every block.
/// The head predicts the forward noise; the score is -(1 - M) * head / sigma_t.
class ScoreNet {
 public:
  ScoreNet(NetConfig cfg, const Schedule& sched);

  const NetConfig& config() const noexcept { return cfg_; }
  const ParamLayout& layout() const noexcept { return layout_; }
  const Schedule& schedule() const noexcept { return sched_; }
  std::size_t pixels() const noexcept { return static_cast<std::size_t>(cfg_.side) * cfg_.side; }

  /// Fan-in scaled uniform weights; the output convolution is zero.
  ModelParams init_params(RngStream& rng) const;

  /// Noise prediction, zero at observed entries. Columns are examples.
  Eigen::MatrixXd predict_noise(const ModelParams& p, const ScoreQuery& q) const;
  Eigen::MatrixXd score(const ModelParams& p, const ScoreQuery& q) const;

  /// Mean over the batch of || (1 - M) (eps_hat - eps) ||^2, which equals the
  /// weighted score-matching loss of the induced score. When `grad` is
  /// non-null it receives the exact gradient (resized to the layout total).
  double loss(const ModelParams& p, const DiffusionBatch& batch, std::vector<double>* grad = nullptr) const;
  std::vector<double> loss_per_example(const ModelParams& p, const DiffusionBatch& batch) const;

 private:
  struct Cache;
  void check_query(const ModelParams& p, const Eigen::MatrixXd& states, const Eigen::MatrixXd& masks,
                   std::span<const double> thetas, std::span<const int> steps) const;
  Eigen::MatrixXd forward(const ModelParams& p, const Eigen::MatrixXd& states, const Eigen::MatrixXd& masks,
                          std::span<const double> thetas, std::span<const int> steps, Cache* cache) const;
  void backward(const ModelParams& p, const Cache& cache, const Eigen::MatrixXd& d_out, double* grad) const;

  NetConfig cfg_;
  Schedule sched_;
  ParamLayout layout_;
  Eigen::VectorXd freqs_;
  // layout indices
  std::size_t l_in_w_, l_in_b_, l_e1_w_, l_e1_b_, l_e2_w_, l_e2_b_, l_out_w_, l_out_b_;
  std::vector<std::size_t> l_down_w_, l_down_b_, l_down_t_, l_down_tb_;
  std::vector<std::size_t> l_up_w_, l_up_b_, l_up_t_, l_up_tb_;
  std::size_t l_mid_w_, l_mid_b_, l_mid_t_, l_mid_tb_;
};

/// Adapts a network and parameter vector to the ScoreFunction interface.
class NetworkScore final : public ScoreFunction {
 public:
  NetworkScore(const ScoreNet& net, const ModelParams& params) : net_(net), params_(params) {}
  Eigen::MatrixXd evaluate(const ScoreQuery& q) const override { return net_.score(params_, q); }
  bool requires_theta() const override { return net_.config().mode == ConditioningMode::ThetaScaledMask; }

 private:
  const ScoreNet& net_;
  const ModelParams& params_;
};

}  // namespace ncs
