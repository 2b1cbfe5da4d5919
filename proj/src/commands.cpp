#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>

#include "json.hpp"
#include "ncs/csv.hpp"
#include "ncs/error.hpp"
#include "ncs/experiment.hpp"
#include "ncs/field_io.hpp"
#include "ncs/parallel.hpp"

namespace ncs {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

int g_verbosity = 1;

constexpr std::uint64_t kSimulateStream = 0x73696d756c617465;
constexpr std::uint64_t kSampleStream = 0x73616d706c65;
constexpr std::uint64_t kValidateStream = 0x76616c6964617465;
constexpr std::uint64_t kReportStream = 0x7265706f7274;

void note(const std::string& line) {
  if (g_verbosity > 0) std::cerr << line << '\n';
}

std::string numbered(const char* prefix, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%06zu.%s", prefix, i, ext);
  return buf;
}

void make_dirs(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw io_error("cannot create directory " + p.string() + ": " + ec.message());
}

void write_json(const fs::path& p, const json& j) { write_file_atomic(p, j.dump(2) + "\n"); }

json read_json(const fs::path& p) {
  const std::string text = read_file(p);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw io_error("malformed JSON in " + p.string() + ": " + e.what());
  }
}

json base_manifest(const char* command, const ExperimentConfig& cfg) {
  json j;
  j["command"] = command;
  j["version"] = kVersion;
  j["seed"] = cfg.seed;
  j["config"] = json::parse(cfg.to_json());
  return j;
}

json law_json(const MaskLaw& law) {
  if (law.kind == MaskLaw::Kind::FixedCount) return {{"law", "fixed_count"}, {"k", law.k}};
  return {{"law", "bernoulli"}, {"rho", law.rho}};
}

// Heap members keep the score's references valid when the struct is moved.
struct LoadedModel {
  std::unique_ptr<Checkpoint> ckpt;
  std::unique_ptr<ScoreNet> net;
  std::unique_ptr<NetworkScore> score;
  std::string fingerprint;
};

LoadedModel load_model(const ExperimentConfig& cfg, const fs::path& path, int side) {
  LoadedModel m;
  m.ckpt = std::make_unique<Checkpoint>(load_checkpoint(path, side));
  const Schedule sched = cfg.build_schedule();
  if (m.ckpt->schedule_fingerprint != sched.fingerprint_hex())
    throw config_error("checkpoint schedule fingerprint " + m.ckpt->schedule_fingerprint +
                       " does not match the configured schedule " + sched.fingerprint_hex());
  m.net = std::make_unique<ScoreNet>(m.ckpt->net, sched);
  m.score = std::make_unique<NetworkScore>(*m.net, m.ckpt->params);
  m.fingerprint = file_fingerprint(path);
  return m;
}

SamplerOptions sampler_options(const ExperimentConfig& cfg) {
  SamplerOptions o;
  o.suppress_final_noise = cfg.schedule.suppress_final_noise;
  o.chunk = static_cast<std::size_t>(cfg.schedule.sample_chunk);
  o.threads = cfg.threads;
  return o;
}

Eigen::MatrixXd full_completions(const CondEvalSet& c) {
  const auto un = c.mask.unobserved_indices();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(c.reference.size()), c.completions.cols());
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    for (std::size_t i = 0; i < c.reference.size(); ++i) out(static_cast<Eigen::Index>(i), j) = c.reference[i];
    for (std::size_t r = 0; r < un.size(); ++r)
      out(static_cast<Eigen::Index>(un[r]), j) = c.completions(static_cast<Eigen::Index>(r), j);
  }
  return out;
}

// Configured probes that are unobserved, or three automatic ones near the
// quarter points of the diagonal.
std::vector<std::size_t> choose_probes(const GridSpec& g, const Mask& mask, const std::vector<std::size_t>& configured,
                                       std::vector<std::string>& warnings) {
  std::vector<std::size_t> out;
  if (!configured.empty()) {
    for (auto p : configured) {
      if (mask.observed(p)) warnings.push_back("probe pixel " + std::to_string(p) + " is observed; skipped");
      else out.push_back(p);
    }
    return out;
  }
  const double span = static_cast<double>(g.side() - 1);
  for (double f : {0.25, 0.5, 0.75}) {
    const double r0 = f * span, c0 = f * span;
    std::size_t best = g.size();
    double best_d = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (mask.observed(i) || std::find(out.begin(), out.end(), i) != out.end()) continue;
      const double dr = g.row(i) - r0, dc = g.col(i) - c0;
      const double d = dr * dr + dc * dc;
      if (best == g.size() || d < best_d) {
        best = i;
        best_d = d;
      }
    }
    if (best < g.size()) out.push_back(best);
  }
  return out;
}

std::vector<double> row_values(const Eigen::MatrixXd& m, Eigen::Index row) {
  std::vector<double> v(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index j = 0; j < m.cols(); ++j) v[static_cast<std::size_t>(j)] = m(row, j);
  return v;
}

double normal_pdf(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return std::exp(-0.5 * z * z) / (sd * std::sqrt(2.0 * M_PI));
}

double ecdf_at(const std::vector<double>& sorted, double x) {
  return static_cast<double>(std::upper_bound(sorted.begin(), sorted.end(), x) - sorted.begin()) /
         static_cast<double>(sorted.size());
}

std::string fmt(double v) { return format_double(v); }
std::string fmt(std::size_t v) { return std::to_string(v); }

}  // namespace

void set_verbosity(int level) { g_verbosity = level; }

std::string file_fingerprint(const fs::path& path) {
  const std::string bytes = read_file(path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

// ---------------------------------------------------------------------------

void cmd_simulate(const ExperimentConfig& cfg, std::size_t count, bool with_masks) {
  const GridSpec g = cfg.grid();
  const ProcessSimulator sim(g, cfg.process);
  const RngStream base(cfg.seed, kSimulateStream);
  const Scale scale = cfg.process.field_scale();

  note("simulate: " + std::to_string(count) + " " + to_string(cfg.process.kind) + " fields on a " +
       std::to_string(g.side()) + "x" + std::to_string(g.side()) + " grid");
  const Eigen::MatrixXd fields = sim.sample_columns(count, base.substream(0), 0, cfg.threads);

  const fs::path dir = cfg.out / "fields";
  make_dirs(dir);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> v(fields.col(static_cast<Eigen::Index>(i)).data(),
                          fields.col(static_cast<Eigen::Index>(i)).data() + fields.rows());
    write_field(dir / numbered("field", i, "ncsf"), g.side(), Field(std::move(v), scale));
  }
  std::size_t observed = 0;
  if (with_masks) {
    const fs::path mdir = cfg.out / "masks";
    make_dirs(mdir);
    const RngStream mrng = base.substream(1);
    for (std::size_t i = 0; i < count; ++i) {
      RngStream r = mrng.substream(i);
      const Mask m = cfg.mask.sample(g, r);
      observed += m.observed_count();
      write_mask(mdir / numbered("mask", i, "ncsm"), g.side(), m);
    }
  }

  json j = base_manifest("simulate", cfg);
  j["count"] = count;
  j["scale"] = to_string(scale);
  j["fields"] = "fields/field_NNNNNN.ncsf";
  j["masks"] = with_masks ? json("masks/mask_NNNNNN.ncsm") : json(nullptr);
  j["mask_law"] = law_json(cfg.mask);
  j["observed_total"] = observed;
  j["truncated_draws"] = sim.truncated_draws();
  write_json(cfg.out / "simulate_manifest.json", j);
  if (sim.truncated_draws() > 0)
    note("simulate: warning: " + std::to_string(sim.truncated_draws()) + " draws hit stopping.max_points");
}

// ---------------------------------------------------------------------------

void cmd_train(const ExperimentConfig& cfg, const std::optional<fs::path>& resume) {
  const GridSpec g = cfg.grid();
  const Schedule sched = cfg.build_schedule();
  std::optional<Checkpoint> start;
  if (resume) start = load_checkpoint(*resume, g.side());

  TrainOptions opts;
  opts.threads = cfg.threads;
  opts.progress = [](const CurveRow& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "train: draw %d epoch %d  train %.6g  val %.6g  lr %.3g", r.draw, r.epoch,
                  r.train_loss, r.val_loss, r.learning_rate);
    note(buf);
  };
  note("train: " + std::string(to_string(cfg.train.mode)) + " mode, " + std::to_string(cfg.train.draws) +
       " draws x " + std::to_string(cfg.train.epochs) + " epochs");
  const Checkpoint ck = train(cfg.train, cfg.net, g, sched, opts, start ? &*start : nullptr);

  make_dirs(cfg.out);
  const fs::path ckpt_path = cfg.out / "checkpoint.ncsc";
  save_checkpoint(ck, ckpt_path);
  write_training_curve(ck.curve, cfg.out / "training_curve.csv");

  json j = base_manifest("train", cfg);
  j["checkpoint"] = "checkpoint.ncsc";
  j["checkpoint_fingerprint"] = file_fingerprint(ckpt_path);
  j["schedule_fingerprint"] = ck.schedule_fingerprint;
  j["parameters"] = ck.params.values.size();
  j["draws_completed"] = ck.draws_completed;
  j["epochs_completed"] = ck.epochs_completed;
  j["final_val_loss"] = ck.curve.empty() ? json(nullptr) : json(ck.curve.back().val_loss);
  write_json(cfg.out / "train_manifest.json", j);
}

// ---------------------------------------------------------------------------

void cmd_sample(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& observations,
                const fs::path& mask_path, std::size_t count) {
  const GridSpec g = cfg.grid();
  const FieldFile obs = read_field(observations);
  const MaskFile mf = read_mask(mask_path);
  if (obs.side != g.side())
    throw invalid_argument("observations have grid side " + std::to_string(obs.side) + ", config has " +
                           std::to_string(g.side()));
  if (mf.side != obs.side) throw invalid_argument("mask and observations have different grid sides");
  if (obs.field.scale() != cfg.process.field_scale())
    throw invalid_argument(std::string("observations are on the ") + to_string(obs.field.scale()) +
                           " scale; expected " + to_string(cfg.process.field_scale()));
  const LoadedModel model = load_model(cfg, checkpoint, obs.side);
  const Schedule sched = cfg.build_schedule();

  const auto n = static_cast<Eigen::Index>(g.size());
  const auto cols = static_cast<Eigen::Index>(count);
  Eigen::MatrixXd states(n, cols), masks(n, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < n; ++i) {
      states(i, j) = obs.field[static_cast<std::size_t>(i)];
      masks(i, j) = mf.mask.observed(static_cast<std::size_t>(i)) ? 1.0 : 0.0;
    }
  const std::vector<double> thetas(count, cfg.process.theta1());
  const RngStream base(cfg.seed, kSampleStream);
  std::vector<RngStream> streams;
  streams.reserve(count);
  for (std::size_t i = 0; i < count; ++i) streams.push_back(base.substream(i));

  note("sample: " + std::to_string(count) + " completions, " + std::to_string(mf.mask.observed_count()) +
       " observed pixels");
  const Eigen::MatrixXd out =
      reverse_conditional_sample_batch(states, masks, thetas, sched, *model.score, streams, sampler_options(cfg));

  const fs::path dir = cfg.out / "completions";
  make_dirs(dir);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (Eigen::Index r = 0; r < n; ++r) v[static_cast<std::size_t>(r)] = out(r, static_cast<Eigen::Index>(i));
    write_field(dir / numbered("completion", i, "ncsf"), g.side(), Field(std::move(v), obs.field.scale()));
  }
  json j = base_manifest("sample", cfg);
  j["count"] = count;
  j["checkpoint_fingerprint"] = model.fingerprint;
  j["observations_fingerprint"] = file_fingerprint(observations);
  j["mask_fingerprint"] = file_fingerprint(mask_path);
  j["observed"] = mf.mask.observed_count();
  j["theta"] = cfg.process.theta1();
  j["completions"] = "completions/completion_NNNNNN.ncsf";
  write_json(cfg.out / "sample_manifest.json", j);
}

// ---------------------------------------------------------------------------

void cmd_validate(const ExperimentConfig& cfg, const std::optional<fs::path>& checkpoint, bool oracle) {
  if (oracle == checkpoint.has_value()) throw config_error("validate needs exactly one of a checkpoint or --oracle");
  if (oracle && cfg.process.kind != ProcessKind::Gaussian)
    throw config_error("--oracle is only available for the Gaussian process");
  const GridSpec g = cfg.grid();

  json vm = base_manifest("validate", cfg);
  vm["source"] = oracle ? "exact_gaussian" : "ncs";
  if (cfg.eval.metrics.empty()) {
    make_dirs(cfg.out);
    vm["configurations"] = json::array();
    vm["note"] = "empty metrics list";
    write_json(cfg.out / "validate_manifest.json", vm);
    return;
  }

  std::optional<LoadedModel> model;
  if (checkpoint) model = load_model(cfg, *checkpoint, g.side());
  const Schedule sched = cfg.build_schedule();

  std::vector<double> thetas = cfg.eval.theta_values;
  if (thetas.empty()) thetas.push_back(cfg.process.theta1());
  std::vector<MaskLaw> laws;
  for (double r : cfg.eval.rho_values) laws.push_back({MaskLaw::Kind::Bernoulli, r, 1});
  for (auto k : cfg.eval.k_values) laws.push_back({MaskLaw::Kind::FixedCount, 0.0, k});
  if (laws.empty()) laws.push_back(cfg.mask);

  const fs::path dir = cfg.out / "datasets";
  make_dirs(dir);
  const RngStream base(cfg.seed, kValidateStream);
  const Scale scale = cfg.process.field_scale();
  json configs = json::array();
  std::size_t index = 0;
  for (double theta : thetas) {
    const ProcessSpec spec = cfg.process.with_theta1(theta);
    const ProcessSimulator sim(g, spec);
    std::unique_ptr<ConditionalSampler> sampler;
    if (oracle) sampler = std::make_unique<ExactGaussianSampler>(g, spec.gp);
    else sampler = std::make_unique<DiffusionSampler>(sched, *model->score, sampler_options(cfg));

    for (const MaskLaw& law : laws) {
      char id[16];
      std::snprintf(id, sizeof id, "c%02zu", index);
      note(std::string("validate: ") + id + " theta=" + format_double(theta) + " " + law.describe() + " m=" +
           std::to_string(cfg.eval.m));
      const RngStream rc = base.substream(index);
      const CondEvalSet cond = build_cond_eval(*sampler, sim, law, cfg.eval.m, rc.substream(0), cfg.threads);
      const UncondEvalSet unc = build_uncond_eval(*sampler, sim, law, cfg.eval.m, rc.substream(1), cfg.threads);

      const fs::path cdir = dir / id;
      make_dirs(cdir);
      write_field(cdir / "cond_reference.ncsf", g.side(), cond.reference);
      write_mask(cdir / "cond_mask.ncsm", g.side(), cond.mask);
      write_field_stream(cdir / "cond_completions.ncsf", g.side(), full_completions(cond), scale);
      write_field_stream(cdir / "uncond_merged.ncsf", g.side(), unc.merged, scale);
      write_mask_stream(cdir / "uncond_masks.ncsm", g.side(), unc.masks);
      write_field_stream(cdir / "uncond_truth.ncsf", g.side(), unc.truth, scale);

      json c;
      c["id"] = id;
      c["theta"] = theta;
      c["mask"] = law_json(law);
      c["mask_law"] = law.describe();
      c["m"] = cfg.eval.m;
      c["cond_observed"] = cond.mask.observed_count();
      c["process"] = {{"kind", to_string(spec.kind)},
                      {"length_scale", spec.gp.length_scale},
                      {"variance", spec.gp.variance},
                      {"range", spec.br.range},
                      {"smoothness", spec.br.smoothness}};
      c["files"] = {{"cond_reference", "cond_reference.ncsf"}, {"cond_mask", "cond_mask.ncsm"},
                    {"cond_completions", "cond_completions.ncsf"}, {"uncond_merged", "uncond_merged.ncsf"},
                    {"uncond_masks", "uncond_masks.ncsm"},         {"uncond_truth", "uncond_truth.ncsf"}};
      c["truncated_draws"] = sim.truncated_draws();
      configs.push_back(c);
      ++index;
    }
  }

  json dm = base_manifest("validate", cfg);
  dm["format"] = "ncs-dataset";
  dm["source"] = oracle ? "exact_gaussian" : "ncs";
  dm["checkpoint_fingerprint"] = model ? json(model->fingerprint) : json(nullptr);
  dm["grid_side"] = g.side();
  dm["scale"] = to_string(scale);
  dm["configurations"] = configs;
  write_json(dir / "manifest.json", dm);

  vm["datasets"] = "datasets/manifest.json";
  vm["checkpoint_fingerprint"] = dm["checkpoint_fingerprint"];
  vm["configurations"] = configs.size();
  write_json(cfg.out / "validate_manifest.json", vm);

  cmd_report(cfg, dir);
}

// ---------------------------------------------------------------------------

namespace {

struct Tables {
  CsvTable chi{{"config", "theta", "mask_law", "m", "source", "h_lo", "h_hi", "h_mean", "pairs", "zeta", "chi"}};
  CsvTable summaries{{"config", "theta", "mask_law", "m", "source", "replicate", "min", "max", "abs_sum"}};
  CsvTable summary_kde{{"config", "theta", "mask_law", "m", "source", "statistic", "x", "density", "ecdf"}};
  CsvTable kde1d{{"config", "theta", "mask_law", "m", "source", "pixel", "row", "col", "observed_value", "x",
                  "density"}};
  CsvTable kde2d{{"config", "theta", "mask_law", "m", "source", "pixel_a", "pixel_b", "x", "y", "density"}};
  CsvTable mean{{"config", "theta", "mask_law", "m", "index", "row", "col", "observed", "reference", "mean",
                 "exact_mean"}};
  CsvTable pcc{{"config", "theta", "mask_law", "m", "anchor", "index", "row", "col", "observed", "pcc",
                "exact_pcc"}};
  CsvTable ks{{"config", "theta", "mask_law", "m", "index", "row", "col", "ks"}};
  CsvTable cond_ks{{"config", "theta", "mask_law", "m", "index", "row", "col", "ks_exact"}};
  CsvTable energy{{"config", "theta", "mask_law", "m", "energy", "threshold_95", "permutations", "subsample",
                   "within_band"}};
};

bool wants(const ExperimentConfig& cfg, const char* metric) {
  return std::find(cfg.eval.metrics.begin(), cfg.eval.metrics.end(), metric) != cfg.eval.metrics.end();
}

Eigen::MatrixXd leading_columns(const Eigen::MatrixXd& m, std::size_t k) {
  return m.leftCols(std::min<Eigen::Index>(m.cols(), static_cast<Eigen::Index>(k)));
}

}  // namespace

void cmd_report(const ExperimentConfig& cfg, const fs::path& dataset_dir) {
  const json dm = read_json(dataset_dir / "manifest.json");
  if (dm.value("format", "") != "ncs-dataset") throw io_error(dataset_dir.string() + " is not a dataset directory");
  const GridSpec g = cfg.grid();
  if (dm.at("grid_side").get<int>() != g.side())
    throw config_error("dataset grid side " + std::to_string(dm.at("grid_side").get<int>()) +
                       " does not match the configured grid");
  const std::string source = dm.at("source").get<std::string>();

  Tables t;
  json summary = json::array();
  std::vector<std::string> warnings;
  const RngStream report_rng(cfg.seed, kReportStream);
  std::size_t cindex = 0;

  for (const json& c : dm.at("configurations")) {
    const std::string id = c.at("id").get<std::string>();
    const fs::path cdir = dataset_dir / id;
    const double theta = c.at("theta").get<double>();
    const std::string law = c.at("mask_law").get<std::string>();
    const std::size_t m = c.at("m").get<std::size_t>();
    const std::vector<std::string> tag{id, fmt(theta), law, fmt(m)};
    auto row = [&tag](std::initializer_list<std::string> rest) {
      std::vector<std::string> r = tag;
      r.insert(r.end(), rest);
      return r;
    };

    ProcessSpec spec;
    const json& pj = c.at("process");
    spec.kind = process_from_string(pj.at("kind").get<std::string>());
    spec.gp.length_scale = pj.at("length_scale").get<double>();
    spec.gp.variance = pj.at("variance").get<double>();
    spec.br.range = pj.at("range").get<double>();
    spec.br.smoothness = pj.at("smoothness").get<double>();
    const bool gaussian = spec.kind == ProcessKind::Gaussian;

    const FieldFile ref = read_field(cdir / "cond_reference.ncsf");
    const MaskFile cmask = read_mask(cdir / "cond_mask.ncsm");
    const FieldStream ccomp = read_field_stream(cdir / "cond_completions.ncsf");
    const FieldStream merged = read_field_stream(cdir / "uncond_merged.ncsf");
    const FieldStream truth = read_field_stream(cdir / "uncond_truth.ncsf");
    for (int side : {ref.side, cmask.side, ccomp.side, merged.side, truth.side})
      if (side != g.side()) throw io_error(cdir.string() + ": record grid side differs from the configured grid");

    CondEvalSet cond;
    cond.reference = ref.field;
    cond.mask = cmask.mask;
    cond.theta = theta;
    const auto un = cond.mask.unobserved_indices();
    cond.completions.resize(static_cast<Eigen::Index>(un.size()), ccomp.columns.cols());
    for (std::size_t r = 0; r < un.size(); ++r)
      cond.completions.row(static_cast<Eigen::Index>(r)) = ccomp.columns.row(static_cast<Eigen::Index>(un[r]));

    std::optional<ExactConditional> exact;
    if (gaussian && !un.empty()) exact = gp_exact_conditional(g, spec.gp, cond.reference, cond.mask);
    std::vector<std::size_t> un_pos(g.size(), g.size());
    for (std::size_t r = 0; r < un.size(); ++r) un_pos[un[r]] = r;

    json cs;
    cs["config"] = id;

    if (wants(cfg, "chi")) {
      auto emit = [&](const char* src, const ChiTable& table) {
        for (const auto& r : table.rows)
          t.chi.add_row(row({src, fmt(r.h_lo), fmt(r.h_hi), fmt(r.h_mean), fmt(r.pairs), fmt(r.zeta), fmt(r.chi)}));
        if (!table.warnings.empty())
          warnings.push_back(id + " chi (" + src + "): " + std::to_string(table.warnings.size()) +
                             " empty distance bins omitted");
      };
      emit(source.c_str(), extremal_correlation(merged.columns, g, cfg.eval.bins));
      emit("truth", extremal_correlation(truth.columns, g, cfg.eval.bins));
      if (!gaussian) {
        // Theory rows carry m = 0: they do not depend on samples.
        const ChiTable th = theoretical_extremal_correlation(g, spec.br, cfg.eval.bins);
        for (const auto& r : th.rows)
          t.chi.add_row({id, fmt(theta), law, "0", "theory", fmt(r.h_lo), fmt(r.h_hi), fmt(r.h_mean), fmt(r.pairs),
                         fmt(r.zeta), fmt(r.chi)});
      }
    }

    if (wants(cfg, "summaries")) {
      const SummaryValues a = summary_distributions(merged.columns);
      const SummaryValues b = summary_distributions(truth.columns);
      for (const auto& [src, sv] : {std::pair{source, &a}, std::pair{std::string("truth"), &b}})
        for (std::size_t i = 0; i < sv->min.size(); ++i)
          t.summaries.add_row(row({src, fmt(i), fmt(sv->min[i]), fmt(sv->max[i]), fmt(sv->abs_sum[i])}));
      const std::pair<const char*, std::pair<const std::vector<double>*, const std::vector<double>*>> stats[] = {
          {"min", {&a.min, &b.min}}, {"max", {&a.max, &b.max}}, {"abs_sum", {&a.abs_sum, &b.abs_sum}}};
      for (const auto& [name, pair] : stats) {
        std::vector<double> pooled = *pair.first;
        pooled.insert(pooled.end(), pair.second->begin(), pair.second->end());
        const auto xs = quantile_grid(pooled, 0.005, 0.995, cfg.eval.kde_points);
        for (const auto& [src, vals] : {std::pair{source, pair.first}, std::pair{std::string("truth"), pair.second}}) {
          const auto dens = kde1d(*vals, xs);
          std::vector<double> sorted = *vals;
          std::sort(sorted.begin(), sorted.end());
          for (std::size_t k = 0; k < xs.size(); ++k)
            t.summary_kde.add_row(row({src, name, fmt(xs[k]), fmt(dens[k]), fmt(ecdf_at(sorted, xs[k]))}));
        }
      }
    }

    std::vector<std::size_t> probes;
    if (!un.empty() && (wants(cfg, "kde") || wants(cfg, "pcc"))) {
      std::vector<std::string> w;
      probes = choose_probes(g, cond.mask, cfg.eval.probe_pixels, w);
      for (auto& s : w) warnings.push_back(id + ": " + s);
    }

    if (wants(cfg, "kde") && !probes.empty()) {
      for (auto p : probes) {
        const auto r = static_cast<Eigen::Index>(un_pos[p]);
        const auto vals = row_values(cond.completions, r);
        const auto xs = quantile_grid(vals, 0.005, 0.995, cfg.eval.kde_points);
        const auto dens = kde1d(vals, xs);
        for (std::size_t k = 0; k < xs.size(); ++k)
          t.kde1d.add_row(row({source, fmt(p), fmt(static_cast<std::size_t>(g.row(p))),
                               fmt(static_cast<std::size_t>(g.col(p))), fmt(cond.reference[p]), fmt(xs[k]),
                               fmt(dens[k])}));
        if (exact) {
          const double mu = exact->mean(r), sd = std::sqrt(exact->covariance(r, r));
          for (std::size_t k = 0; k < xs.size(); ++k)
            t.kde1d.add_row(row({"exact", fmt(p), fmt(static_cast<std::size_t>(g.row(p))),
                                 fmt(static_cast<std::size_t>(g.col(p))), fmt(cond.reference[p]), fmt(xs[k]),
                                 fmt(normal_pdf(xs[k], mu, sd))}));
        }
      }
      for (std::size_t q = 0; q + 1 < probes.size(); ++q) {
        const std::size_t pa = probes[q], pb = probes[q + 1];
        const auto ra = static_cast<Eigen::Index>(un_pos[pa]), rb = static_cast<Eigen::Index>(un_pos[pb]);
        const auto va = row_values(cond.completions, ra), vb = row_values(cond.completions, rb);
        const auto xs = quantile_grid(va, 0.01, 0.99, cfg.eval.kde2d_points);
        const auto ys = quantile_grid(vb, 0.01, 0.99, cfg.eval.kde2d_points);
        const auto dens = kde2d(va, vb, xs, ys);
        for (std::size_t iy = 0; iy < ys.size(); ++iy)
          for (std::size_t ix = 0; ix < xs.size(); ++ix)
            t.kde2d.add_row(row({source, fmt(pa), fmt(pb), fmt(xs[ix]), fmt(ys[iy]), fmt(dens[iy * xs.size() + ix])}));
        if (exact) {
          const double ma = exact->mean(ra), mb = exact->mean(rb);
          const double saa = exact->covariance(ra, ra), sbb = exact->covariance(rb, rb), sab = exact->covariance(ra, rb);
          const double det = saa * sbb - sab * sab;
          for (std::size_t iy = 0; iy < ys.size(); ++iy)
            for (std::size_t ix = 0; ix < xs.size(); ++ix) {
              const double dx = xs[ix] - ma, dy = ys[iy] - mb;
              const double qf = (sbb * dx * dx - 2.0 * sab * dx * dy + saa * dy * dy) / det;
              const double d = std::exp(-0.5 * qf) / (2.0 * M_PI * std::sqrt(det));
              t.kde2d.add_row(row({"exact", fmt(pa), fmt(pb), fmt(xs[ix]), fmt(ys[iy]), fmt(d)}));
            }
        }
      }
    }

    if (wants(cfg, "mean")) {
      const auto mean = conditional_mean_field(cond);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const bool obs = cond.mask.observed(i);
        const double em = (!obs && exact) ? exact->mean(static_cast<Eigen::Index>(un_pos[i])) : NAN;
        t.mean.add_row(row({fmt(i), fmt(static_cast<std::size_t>(g.row(i))), fmt(static_cast<std::size_t>(g.col(i))),
                            obs ? "1" : "0", fmt(cond.reference[i]), fmt(mean[i]), fmt(em)}));
      }
    }

    if (wants(cfg, "pcc") && !probes.empty()) {
      const std::size_t anchor = probes.front();
      const auto heat = pcc_heatmap(cond, anchor);
      const auto ra = static_cast<Eigen::Index>(un_pos[anchor]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const bool obs = cond.mask.observed(i);
        double ep = NAN;
        if (!obs && exact) {
          const auto ri = static_cast<Eigen::Index>(un_pos[i]);
          ep = exact->covariance(ri, ra) / std::sqrt(exact->covariance(ri, ri) * exact->covariance(ra, ra));
        }
        t.pcc.add_row(row({fmt(anchor), fmt(i), fmt(static_cast<std::size_t>(g.row(i))),
                           fmt(static_cast<std::size_t>(g.col(i))), obs ? "1" : "0", fmt(heat[i]), fmt(ep)}));
      }
    }

    if (wants(cfg, "ks")) {
      const auto ks = per_pixel_ks(merged.columns, truth.columns);
      std::size_t ok = 0;
      double worst = 0.0;
      for (std::size_t i = 0; i < ks.size(); ++i) {
        t.ks.add_row(row({fmt(i), fmt(static_cast<std::size_t>(g.row(i))), fmt(static_cast<std::size_t>(g.col(i))),
                          fmt(ks[i])}));
        ok += ks[i] <= 0.05;
        worst = std::max(worst, ks[i]);
      }
      cs["ks_max"] = worst;
      cs["ks_fraction_le_0.05"] = ks.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(ks.size());
      if (exact) {
        double cworst = 0.0;
        for (std::size_t r = 0; r < un.size(); ++r) {
          const auto ri = static_cast<Eigen::Index>(r);
          const double k =
              ks_normal(row_values(cond.completions, ri), exact->mean(ri), std::sqrt(exact->covariance(ri, ri)));
          cworst = std::max(cworst, k);
          const std::size_t i = un[r];
          t.cond_ks.add_row(row({fmt(i), fmt(static_cast<std::size_t>(g.row(i))),
                                 fmt(static_cast<std::size_t>(g.col(i))), fmt(k)}));
        }
        cs["cond_ks_max"] = cworst;
      }
    }

    if (wants(cfg, "energy")) {
      const Eigen::MatrixXd a = leading_columns(merged.columns, cfg.eval.energy_max);
      const Eigen::MatrixXd b = leading_columns(truth.columns, cfg.eval.energy_max);
      const double e = energy_distance(a, b);
      RngStream prng = report_rng.substream(cindex);
      const double thr = cfg.eval.permutations > 0
                             ? energy_permutation_threshold(a, b, cfg.eval.permutations, 0.95, prng)
                             : NAN;
      const bool within = cfg.eval.permutations > 0 && e <= thr;
      t.energy.add_row(row({fmt(e), fmt(thr), fmt(cfg.eval.permutations), fmt(static_cast<std::size_t>(a.cols())),
                            within ? "1" : "0"}));
      cs["energy"] = e;
      cs["energy_threshold_95"] = thr;
      cs["energy_within_band"] = within;
    }
    summary.push_back(cs);
    ++cindex;
  }

  const fs::path rdir = cfg.out / "report";
  make_dirs(rdir);
  json tables = json::array();
  auto put = [&](const char* metric, const char* name, const CsvTable& table) {
    if (!wants(cfg, metric)) return;
    table.write(rdir / name);
    tables.push_back({{"name", name}, {"rows", table.rows()}});
  };
  put("chi", "chi.csv", t.chi);
  put("summaries", "summaries.csv", t.summaries);
  put("summaries", "summary_kde.csv", t.summary_kde);
  put("kde", "cond_kde1d.csv", t.kde1d);
  put("kde", "cond_kde2d.csv", t.kde2d);
  put("mean", "cond_mean.csv", t.mean);
  put("pcc", "cond_pcc.csv", t.pcc);
  put("ks", "ks.csv", t.ks);
  if (t.cond_ks.rows() > 0) put("ks", "cond_ks.csv", t.cond_ks);
  put("energy", "energy.csv", t.energy);

  json rm = base_manifest("report", cfg);
  rm["source"] = source;
  rm["checkpoint_fingerprint"] = dm.at("checkpoint_fingerprint");
  rm["dataset_seed"] = dm.at("seed");
  rm["tables"] = tables;
  rm["summary"] = summary;
  rm["warnings"] = warnings;
  write_json(rdir / "manifest.json", rm);
  for (const auto& w : warnings) note("report: warning: " + w);
}

}  // namespace ncs
