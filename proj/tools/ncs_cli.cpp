#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "ncs/ncs.h"

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> threads;
  bool quiet = false;
};

// Flags win over the environment, which wins over the config file.
bool env_overrides(Globals& g) {
  if (!g.seed) {
    if (const char* s = std::getenv("NCS_SEED"); s && *s) {
      try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(s, &used);
        if (used != std::string(s).size() || s[0] == '-') throw std::invalid_argument("trailing");
        g.seed = v;
      } catch (const std::exception&) {
        std::cerr << "error: NCS_SEED must be a non-negative integer\n";
        return false;
      }
    }
  }
  if (!g.threads) {
    if (const char* s = std::getenv("NCS_THREADS"); s && *s) {
      try {
        std::size_t used = 0;
        const int v = std::stoi(s, &used);
        if (used != std::string(s).size() || v < 1) throw std::invalid_argument("range");
        g.threads = v;
      } catch (const std::exception&) {
        std::cerr << "error: NCS_THREADS must be a positive integer\n";
        return false;
      }
    }
  }
  return true;
}

int fail(ncs_status s) {
  std::cerr << "error: " << ncs_last_error() << '\n';
  return ncs_exit_code(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural conditional simulation for gridded spatial processes"};
  app.set_version_flag("--version", std::string(ncs_version()));
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config, "Experiment configuration (TOML)")->required()->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Override io.seed");
  app.add_option("--out", g.out, "Override io.out");
  app.add_option("--threads", g.threads, "Override io.threads")->check(CLI::PositiveNumber);
  app.add_flag("-q,--quiet", g.quiet, "No progress lines");

  std::size_t sim_count = 0;
  bool sim_masks = false;
  auto* simulate = app.add_subcommand("simulate", "Draw unconditional fields");
  simulate->add_option("--count", sim_count, "Number of fields")->required();
  simulate->add_flag("--masks", sim_masks, "Also draw one mask per field from the mask block");

  std::optional<std::string> resume;
  auto* train = app.add_subcommand("train", "Train the score network");
  train->add_option("--resume", resume, "Continue from a checkpoint")->check(CLI::ExistingFile);

  std::string s_ckpt, s_obs, s_mask;
  std::size_t s_count = 0;
  auto* sample = app.add_subcommand("sample", "Conditional completions from a trained network");
  sample->add_option("--checkpoint", s_ckpt, "Checkpoint file")->required();
  sample->add_option("--observations", s_obs, "Observed field file")->required();
  sample->add_option("--mask", s_mask, "Mask file (1 = observed)")->required();
  sample->add_option("--count", s_count, "Number of completions")->required();

  std::optional<std::string> v_ckpt;
  bool v_oracle = false;
  auto* validate = app.add_subcommand("validate", "Build evaluation datasets and the report");
  auto* vc = validate->add_option("--checkpoint", v_ckpt, "Checkpoint file");
  auto* vo = validate->add_flag("--oracle", v_oracle, "Use the exact Gaussian sampler");
  vc->excludes(vo);

  std::string r_dir;
  auto* report = app.add_subcommand("report", "Recompute report tables from saved datasets");
  report->add_option("--datasets", r_dir, "Dataset directory written by validate")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  if (validate->parsed() && !v_ckpt && !v_oracle) {
    std::cerr << "error: validate needs --checkpoint or --oracle\n";
    return 2;
  }
  if (!env_overrides(g)) return 2;
  ncs_set_verbosity(g.quiet ? 0 : 1);

  ncs_overrides ov{};
  if (g.seed) {
    ov.has_seed = 1;
    ov.seed = *g.seed;
  }
  if (g.out) ov.out = g.out->c_str();
  if (g.threads) ov.threads = *g.threads;

  ncs_experiment* exp = nullptr;
  if (ncs_status s = ncs_experiment_load(g.config.c_str(), &ov, &exp); s != NCS_OK) return fail(s);

  ncs_status s = NCS_OK;
  if (simulate->parsed()) s = ncs_cmd_simulate(exp, sim_count, sim_masks ? 1 : 0);
  else if (train->parsed()) s = ncs_cmd_train(exp, resume ? resume->c_str() : nullptr);
  else if (sample->parsed()) s = ncs_cmd_sample(exp, s_ckpt.c_str(), s_obs.c_str(), s_mask.c_str(), s_count);
  else if (validate->parsed()) s = ncs_cmd_validate(exp, v_ckpt ? v_ckpt->c_str() : nullptr, v_oracle ? 1 : 0);
  else if (report->parsed()) s = ncs_cmd_report(exp, r_dir.c_str());
  ncs_experiment_destroy(exp);
  return s == NCS_OK ? 0 : fail(s);
}
