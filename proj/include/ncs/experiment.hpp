#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ncs/grid.hpp"
#include "ncs/schedule.hpp"
#include "ncs/scorenet.hpp"
#include "ncs/simulator.hpp"
#include "ncs/training.hpp"
#include "ncs/validation.hpp"

namespace ncs {

struct ScheduleConfig {
  int steps = 1000;
  double beta0 = 1e-4;
  double betaT = 0.02;
  bool suppress_final_noise = false;
  int sample_chunk = 64;
};

struct EvalConfig {
  std::size_t m = 4000;
  std::vector<std::string> metrics{"chi", "summaries", "kde", "mean", "pcc", "ks", "energy"};
  DistanceBins bins;
  std::vector<double> rho_values;
  std::vector<std::size_t> k_values;
  std::vector<double> theta_values;
  std::size_t kde_points = 256;
  std::size_t kde2d_points = 64;
  std::size_t permutations = 200;
  std::size_t energy_max = 2000;
  std::vector<std::size_t> probe_pixels;
};

struct ExperimentConfig {
  int side = 32;
  double lower = -10.0;
  double upper = 10.0;
  ProcessSpec process;
  ScheduleConfig schedule;
  MaskLaw mask;
  NetConfig net;
  TrainSpec train;
  EvalConfig eval;
  std::filesystem::path out = "out";
  std::uint64_t seed = 0;
  int threads = 1;

  GridSpec grid() const { return GridSpec::build(side, lower, upper); }
  Schedule build_schedule() const { return Schedule::build(schedule.steps, schedule.beta0, schedule.betaT); }
  /// Checks every block; throws a config error naming the first bad key.
  void validate() const;
  /// Canonical JSON echo used in manifests.
  std::string to_json() const;
};

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::optional<int> threads;
};

/// Parses TOML text. Unknown tables or keys are rejected. Relative output
/// paths are resolved against `base_dir`.
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {},
                              const Overrides& ov = {});
ExperimentConfig load_config(const std::filesystem::path& path, const Overrides& ov = {});

/// Verbosity of progress lines on standard error (0 = silent).
void set_verbosity(int level);

void cmd_simulate(const ExperimentConfig& cfg, std::size_t count, bool with_masks);
void cmd_train(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& resume);
void cmd_sample(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                const std::filesystem::path& observations, const std::filesystem::path& mask, std::size_t count);
void cmd_validate(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& checkpoint, bool oracle);
void cmd_report(const ExperimentConfig& cfg, const std::filesystem::path& dataset_dir);

/// FNV-1a of a file's bytes, as 16 hex digits.
std::string file_fingerprint(const std::filesystem::path& path);

inline constexpr const char* kVersion = "0.1.0";

}  // namespace ncs
