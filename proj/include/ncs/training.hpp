#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ncs/diffusion.hpp"
#include "ncs/grid.hpp"
#include "ncs/schedule.hpp"
#include "ncs/scorenet.hpp"
#include "ncs/simulator.hpp"

namespace ncs {

enum class AmortizationMode { FixedAll, ProportionAmortized, ParameterAmortized, SmallConditioningSet };

const char* to_string(AmortizationMode m);
AmortizationMode amortization_from_string(const std::string& s);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  bool operator==(const Range&) const = default;
};

/// Sizes of one simulated data set: r proportions, p parameters, s fields per
/// (proportion, parameter) or per observation count, m masks and steps per field.
struct DataCounts {
  int r = 1;
  int p = 1;
  int s = 1;
  int m = 1;
  bool operator==(const DataCounts&) const = default;
};

struct TrainSpec {
  ProcessSpec process;
  AmortizationMode mode = AmortizationMode::ProportionAmortized;
  double rho = 0.05;
  Range rho_range{0.01, 0.525};
  Range theta_range{0.5, 5.5};
  int obs_lo = 1;
  int obs_hi = 10;
  int val_obs_lo = 3;
  int val_obs_hi = 3;
  DataCounts train{50, 1, 25, 100};
  DataCounts val{50, 1, 1, 1};
  int draws = 40;
  int epochs = 10;
  int batch_size = 2048;
  double learning_rate = 1e-3;
  double lr_decay = 0.5;
  int patience = 3;
  double min_learning_rate = 1e-5;
  std::uint64_t seed = 0;

  void validate(int grid_size) const;
};

/// One simulated training set of fields and masks, proportion or fixed-count.
/// Fields are drawn in parallel from per-field substreams of `rng`.
DiffusionBatch generate_training_batch(const TrainSpec& spec, const DataCounts& counts, const GridSpec& g,
                                       const Schedule& sched, const RngStream& rng, bool validation,
                                       int threads = 1, const std::vector<double>* proportions = nullptr,
                                       std::vector<double>* proportions_used = nullptr);

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
  double learning_rate = 1e-3;
  double best_val = 0.0;
  int bad_epochs = 0;
  bool has_best = false;
};

struct CurveRow {
  int draw = 0;
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double learning_rate = 0.0;
};

struct Checkpoint {
  NetConfig net;
  ModelParams params;
  int steps = 0;
  double beta0 = 0.0;
  double betaT = 0.0;
  std::string schedule_fingerprint;
  int draws_completed = 0;
  int epochs_completed = 0;
  std::string train_spec_json;
  AdamState optimizer;
  std::vector<CurveRow> curve;

  Schedule schedule() const { return Schedule::build(steps, beta0, betaT); }
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
std::string serialize_checkpoint(const Checkpoint& c);
/// Rejects other format versions and, when given, a different grid side.
Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<int> expected_side = std::nullopt);

std::string train_spec_json(const TrainSpec& spec);

struct TrainOptions {
  int threads = 1;
  std::function<void(const CurveRow&)> progress;
};

/// Runs draws [resume.draws_completed, spec.draws). A fresh run starts from
/// init_params. Identical inputs give identical checkpoints.
Checkpoint train(const TrainSpec& spec, const NetConfig& cfg, const GridSpec& g, const Schedule& sched,
                 const TrainOptions& opts = {}, const Checkpoint* resume = nullptr);

void write_training_curve(const std::vector<CurveRow>& curve, const std::filesystem::path& path);

}  // namespace ncs
