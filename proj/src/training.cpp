#include "ncs/training.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <memory>
#include <numeric>

#include "json.hpp"
#include "ncs/csv.hpp"
#include "ncs/error.hpp"
#include "ncs/field_io.hpp"
#include "ncs/parallel.hpp"

namespace ncs {

using json = nlohmann::json;

namespace {

constexpr char kCheckpointMagic[8] = {'N', 'C', 'S', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint64_t kTrainStream = 0x747261696eULL;
constexpr std::uint64_t kInitId = 0x696e6974ULL;
constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

struct Unit {
  double rho = 0.0;
  double theta = 0.0;
  int fixed_count = -1;  // >= 0 selects a fixed-count mask
};

void require(bool ok, const std::string& what) {
  if (!ok) throw config_error("train: " + what);
}

}  // namespace

const char* to_string(AmortizationMode m) {
  switch (m) {
    case AmortizationMode::FixedAll: return "fixed";
    case AmortizationMode::ProportionAmortized: return "proportion";
    case AmortizationMode::ParameterAmortized: return "parameter";
    case AmortizationMode::SmallConditioningSet: return "small_set";
  }
  return "?";
}

AmortizationMode amortization_from_string(const std::string& s) {
  if (s == "fixed") return AmortizationMode::FixedAll;
  if (s == "proportion") return AmortizationMode::ProportionAmortized;
  if (s == "parameter") return AmortizationMode::ParameterAmortized;
  if (s == "small_set") return AmortizationMode::SmallConditioningSet;
  throw config_error("unknown training mode '" + s + "' (expected fixed, proportion, parameter or small_set)");
}

void TrainSpec::validate(int grid_size) const {
  process.validate();
  require(rho >= 0.0 && rho <= 1.0, "rho must lie in [0, 1]");
  require(rho_range.lo <= rho_range.hi && rho_range.lo >= 0.0 && rho_range.hi <= 1.0,
          "rho_range must be a nonempty subinterval of [0, 1]");
  require(theta_range.lo <= theta_range.hi && theta_range.lo > 0.0, "theta_range must be nonempty and positive");
  require(obs_lo >= 0 && obs_lo <= obs_hi && obs_hi <= grid_size, "obs_range must satisfy 0 <= lo <= hi <= n");
  require(val_obs_lo >= 0 && val_obs_lo <= val_obs_hi && val_obs_hi <= grid_size,
          "val_obs_range must satisfy 0 <= lo <= hi <= n");
  for (const auto* c : {&train, &val})
    require(c->r > 0 && c->p > 0 && c->s > 0 && c->m > 0, "counts r, p, s, m must be positive");
  require(draws >= 0, "draws must be >= 0");
  require(epochs > 0, "epochs must be positive");
  require(batch_size > 0, "batch_size must be positive");
  require(learning_rate > 0.0 && std::isfinite(learning_rate), "learning_rate must be positive");
  require(lr_decay > 0.0 && lr_decay <= 1.0, "lr_decay must lie in (0, 1]");
  require(patience > 0, "patience must be positive");
  require(min_learning_rate >= 0.0 && min_learning_rate <= learning_rate,
          "min_learning_rate must lie in [0, learning_rate]");
}

DiffusionBatch generate_training_batch(const TrainSpec& spec, const DataCounts& counts, const GridSpec& g,
                                       const Schedule& sched, const RngStream& rng, bool validation, int threads,
                                       const std::vector<double>* proportions,
                                       std::vector<double>* proportions_used) {
  RngStream top = rng.substream(0);
  std::vector<Unit> units;
  const double theta0 = spec.process.theta1();
  switch (spec.mode) {
    case AmortizationMode::FixedAll:
      for (int i = 0; i < counts.r * counts.p; ++i) units.push_back({spec.rho, theta0});
      break;
    case AmortizationMode::ProportionAmortized:
      for (int i = 0; i < counts.r; ++i) {
        const double q = proportions && !proportions->empty()
                             ? (*proportions)[static_cast<std::size_t>(i) % proportions->size()]
                             : top.uniform(spec.rho_range.lo, spec.rho_range.hi);
        if (proportions_used) proportions_used->push_back(q);
        for (int j = 0; j < counts.p; ++j) units.push_back({q, theta0});
      }
      break;
    case AmortizationMode::ParameterAmortized:
      for (int i = 0; i < counts.r; ++i)
        for (int j = 0; j < counts.p; ++j)
          units.push_back({spec.rho, top.uniform(spec.theta_range.lo, spec.theta_range.hi)});
      break;
    case AmortizationMode::SmallConditioningSet: {
      const int lo = validation ? spec.val_obs_lo : spec.obs_lo;
      const int hi = validation ? spec.val_obs_hi : spec.obs_hi;
      for (int o = lo; o <= hi; ++o) units.push_back({0.0, theta0, o});
      break;
    }
  }

  std::vector<std::unique_ptr<ProcessSimulator>> sims(units.size());
  parallel_for(units.size(), threads, [&](std::size_t u) {
    sims[u] = std::make_unique<ProcessSimulator>(g, spec.process.with_theta1(units[u].theta));
  });

  const auto n = static_cast<Eigen::Index>(g.size());
  const std::size_t fields = units.size() * static_cast<std::size_t>(counts.s);
  const auto per_field = static_cast<Eigen::Index>(counts.m);
  DiffusionBatch b;
  const auto total = static_cast<Eigen::Index>(fields) * per_field;
  b.states.resize(n, total);
  b.masks.resize(n, total);
  b.noise.resize(n, total);
  b.thetas.resize(static_cast<std::size_t>(total));
  b.steps.resize(static_cast<std::size_t>(total));

  parallel_for(fields, threads, [&](std::size_t f) {
    const Unit& unit = units[f / static_cast<std::size_t>(counts.s)];
    RngStream frng = rng.substream(1 + f);
    const Field x0 = sims[f / static_cast<std::size_t>(counts.s)]->sample(frng);
    for (Eigen::Index l = 0; l < per_field; ++l) {
      const Eigen::Index c = static_cast<Eigen::Index>(f) * per_field + l;
      const Mask mask = unit.fixed_count >= 0
                            ? sample_fixed_count_mask(g, static_cast<std::size_t>(unit.fixed_count), frng)
                            : sample_bernoulli_mask(g, unit.rho, frng);
      const int t = static_cast<int>(frng.integer(1, sched.steps()));
      const double a = std::sqrt(sched.alpha_bar(t));
      const double s = sched.sigma_bar(t);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double x = x0[static_cast<std::size_t>(i)];
        if (mask.observed(static_cast<std::size_t>(i))) {
          b.masks(i, c) = 1.0;
          b.states(i, c) = x;
          b.noise(i, c) = 0.0;
        } else {
          const double e = frng.normal();
          b.masks(i, c) = 0.0;
          b.states(i, c) = a * x + s * e;
          b.noise(i, c) = e;
        }
      }
      b.thetas[static_cast<std::size_t>(c)] = unit.theta;
      b.steps[static_cast<std::size_t>(c)] = t;
    }
  });
  return b;
}

std::string train_spec_json(const TrainSpec& s) {
  json j;
  j["process"] = {{"kind", to_string(s.process.kind)},
                  {"length_scale", s.process.gp.length_scale},
                  {"variance", s.process.gp.variance},
                  {"range", s.process.br.range},
                  {"smoothness", s.process.br.smoothness},
                  {"stopping_bound", s.process.stopping.bound},
                  {"stopping_max_points", s.process.stopping.max_points}};
  j["mode"] = to_string(s.mode);
  j["rho"] = s.rho;
  j["rho_range"] = {s.rho_range.lo, s.rho_range.hi};
  j["theta_range"] = {s.theta_range.lo, s.theta_range.hi};
  j["obs_range"] = {s.obs_lo, s.obs_hi};
  j["val_obs_range"] = {s.val_obs_lo, s.val_obs_hi};
  j["counts"] = {s.train.r, s.train.p, s.train.s, s.train.m};
  j["val_counts"] = {s.val.r, s.val.p, s.val.s, s.val.m};
  j["draws"] = s.draws;
  j["epochs"] = s.epochs;
  j["batch_size"] = s.batch_size;
  j["learning_rate"] = s.learning_rate;
  j["lr_decay"] = s.lr_decay;
  j["patience"] = s.patience;
  j["min_learning_rate"] = s.min_learning_rate;
  j["seed"] = s.seed;
  return j.dump();
}

namespace {

json net_to_json(const NetConfig& c) {
  return {{"side", c.side},
          {"base_width", c.base_width},
          {"depth", c.depth},
          {"fourier_features", c.fourier_features},
          {"fourier_scale", c.fourier_scale},
          {"fourier_seed", c.fourier_seed},
          {"embed_width", c.embed_width},
          {"conditioning", to_string(c.mode)},
          {"micro_batch", c.micro_batch}};
}

NetConfig net_from_json(const json& j) {
  NetConfig c;
  c.side = j.at("side").get<int>();
  c.base_width = j.at("base_width").get<int>();
  c.depth = j.at("depth").get<int>();
  c.fourier_features = j.at("fourier_features").get<int>();
  c.fourier_scale = j.at("fourier_scale").get<double>();
  c.fourier_seed = j.at("fourier_seed").get<std::uint64_t>();
  c.embed_width = j.at("embed_width").get<int>();
  c.mode = conditioning_from_string(j.at("conditioning").get<std::string>());
  c.micro_batch = j.at("micro_batch").get<int>();
  return c;
}

void put_u32(std::string& s, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) s.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}
void put_u64(std::string& s, std::uint64_t v) {
  for (int k = 0; k < 8; ++k) s.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}
void put_f64s(std::string& s, const std::vector<double>& v) {
  for (double d : v) put_u64(s, std::bit_cast<std::uint64_t>(d));
}

std::uint64_t get_u64(const std::string& s, std::size_t at) {
  std::uint64_t v = 0;
  for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[at + k])) << (8 * k);
  return v;
}
std::uint32_t get_u32(const std::string& s, std::size_t at) {
  std::uint32_t v = 0;
  for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + k])) << (8 * k);
  return v;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& c) {
  json j;
  j["format_version"] = kCheckpointVersion;
  j["net"] = net_to_json(c.net);
  j["schedule"] = {{"steps", c.steps}, {"beta0", c.beta0}, {"betaT", c.betaT}, {"fingerprint", c.schedule_fingerprint}};
  json layout = json::array();
  for (const auto& e : c.params.layout.entries()) layout.push_back({e.name, e.offset, e.rows, e.cols});
  j["layout"] = layout;
  j["parameter_count"] = c.params.values.size();
  json curve = json::array();
  for (const auto& r : c.curve) curve.push_back({r.draw, r.epoch, r.train_loss, r.val_loss, r.learning_rate});
  j["training"] = {{"draws_completed", c.draws_completed},
                   {"epochs_completed", c.epochs_completed},
                   {"spec", c.train_spec_json.empty() ? json(nullptr) : json::parse(c.train_spec_json)},
                   {"curve", curve}};
  const bool moments = !c.optimizer.m.empty();
  j["optimizer"] = {{"step", c.optimizer.step},
                    {"learning_rate", c.optimizer.learning_rate},
                    {"best_val", c.optimizer.best_val},
                    {"bad_epochs", c.optimizer.bad_epochs},
                    {"has_best", c.optimizer.has_best},
                    {"moments", moments}};
  const std::string meta = j.dump();

  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  put_u32(out, kCheckpointVersion);
  put_u32(out, 0);
  put_u64(out, meta.size());
  out += meta;
  put_f64s(out, c.params.values);
  if (moments) {
    if (c.optimizer.m.size() != c.params.values.size() || c.optimizer.v.size() != c.params.values.size())
      throw invalid_argument("checkpoint: optimizer moments have the wrong length");
    put_f64s(out, c.optimizer.m);
    put_f64s(out, c.optimizer.v);
  }
  return out;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(c));
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<int> expected_side) {
  const std::string bytes = read_file(path);
  const std::string where = "checkpoint " + path.string() + ": ";
  if (bytes.size() < 24 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw io_error(where + "not a checkpoint file");
  const auto version = get_u32(bytes, 8);
  if (version != kCheckpointVersion)
    throw io_error(where + "format version " + std::to_string(version) + " is not supported (expected " +
                   std::to_string(kCheckpointVersion) + ")");
  const auto meta_len = get_u64(bytes, 16);
  if (meta_len > bytes.size() - 24) throw io_error(where + "truncated metadata");
  json j;
  try {
    j = json::parse(bytes.substr(24, meta_len));
  } catch (const json::exception& e) {
    throw io_error(where + "corrupt metadata (" + e.what() + ")");
  }

  Checkpoint c;
  try {
    c.net = net_from_json(j.at("net"));
    const auto& s = j.at("schedule");
    c.steps = s.at("steps").get<int>();
    c.beta0 = s.at("beta0").get<double>();
    c.betaT = s.at("betaT").get<double>();
    c.schedule_fingerprint = s.at("fingerprint").get<std::string>();
    const auto& t = j.at("training");
    c.draws_completed = t.at("draws_completed").get<int>();
    c.epochs_completed = t.at("epochs_completed").get<int>();
    if (!t.at("spec").is_null()) c.train_spec_json = t.at("spec").dump();
    for (const auto& r : t.at("curve"))
      c.curve.push_back({r.at(0).get<int>(), r.at(1).get<int>(), r.at(2).get<double>(), r.at(3).get<double>(),
                         r.at(4).get<double>()});
    const auto& o = j.at("optimizer");
    c.optimizer.step = o.at("step").get<std::uint64_t>();
    c.optimizer.learning_rate = o.at("learning_rate").get<double>();
    c.optimizer.best_val = o.at("best_val").get<double>();
    c.optimizer.bad_epochs = o.at("bad_epochs").get<int>();
    c.optimizer.has_best = o.at("has_best").get<bool>();
    const bool moments = o.at("moments").get<bool>();

    if (expected_side && c.net.side != *expected_side)
      throw io_error(where + "grid side " + std::to_string(c.net.side) + " does not match the expected side " +
                     std::to_string(*expected_side));
    try {
      c.net.validate();
    } catch (const Error& e) {
      throw io_error(where + e.what());
    }
    const Schedule sched = c.schedule();
    if (sched.fingerprint_hex() != c.schedule_fingerprint) throw io_error(where + "schedule fingerprint mismatch");
    const ScoreNet net(c.net, sched);
    ParamLayout stored;
    for (const auto& e : j.at("layout")) {
      stored.add(e.at(0).get<std::string>(), e.at(2).get<std::size_t>(), e.at(3).get<std::size_t>());
      if (stored.entries().back().offset != e.at(1).get<std::size_t>()) throw io_error(where + "bad layout offsets");
    }
    if (!(stored == net.layout())) throw io_error(where + "layout table does not match the network configuration");
    const std::size_t count = j.at("parameter_count").get<std::size_t>();
    if (count != stored.total()) throw io_error(where + "parameter count disagrees with the layout");
    const std::size_t arrays = moments ? 3 : 1;
    const std::size_t start = 24 + meta_len;
    if (bytes.size() != start + arrays * count * 8) throw io_error(where + "payload size mismatch");
    auto read_vec = [&](std::size_t k) {
      std::vector<double> v(count);
      for (std::size_t i = 0; i < count; ++i) v[i] = std::bit_cast<double>(get_u64(bytes, start + (k * count + i) * 8));
      return v;
    };
    c.params.layout = stored;
    c.params.values = read_vec(0);
    if (moments) {
      c.optimizer.m = read_vec(1);
      c.optimizer.v = read_vec(2);
    }
    c.params.validate();
  } catch (const json::exception& e) {
    throw io_error(where + "corrupt metadata (" + e.what() + ")");
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Io) throw;
    throw io_error(where + e.what());
  }
  return c;
}

namespace {

void adam_update(std::vector<double>& p, const std::vector<double>& g, AdamState& s) {
  ++s.step;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < p.size(); ++i) {
    s.m[i] = kAdamBeta1 * s.m[i] + (1.0 - kAdamBeta1) * g[i];
    s.v[i] = kAdamBeta2 * s.v[i] + (1.0 - kAdamBeta2) * g[i] * g[i];
    p[i] -= s.learning_rate * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + kAdamEps);
  }
}

std::string spec_without_draws(const std::string& s) {
  if (s.empty()) return s;
  json j = json::parse(s);
  j.erase("draws");
  return j.dump();
}

}  // namespace

Checkpoint train(const TrainSpec& spec, const NetConfig& cfg, const GridSpec& g, const Schedule& sched,
                 const TrainOptions& opts, const Checkpoint* resume) {
  spec.validate(static_cast<int>(g.size()));
  cfg.validate();
  if (cfg.side != g.side()) throw config_error("net side differs from the grid side");
  const ScoreNet net(cfg, sched);
  const RngStream base(spec.seed, kTrainStream);

  Checkpoint ck;
  const std::string spec_json = train_spec_json(spec);
  if (resume) {
    if (!(resume->net == cfg)) throw config_error("resume: network configuration differs from the checkpoint");
    if (resume->schedule_fingerprint != sched.fingerprint_hex())
      throw config_error("resume: schedule fingerprint differs from the checkpoint");
    if (spec_without_draws(resume->train_spec_json) != spec_without_draws(spec_json))
      throw config_error("resume: training settings differ from the checkpoint");
    if (resume->draws_completed > spec.draws)
      throw config_error("resume: checkpoint already has more draws than configured");
    ck = *resume;
  } else {
    RngStream init = base.substream(kInitId);
    ck.net = cfg;
    ck.params = net.init_params(init);
    ck.steps = sched.steps();
    ck.beta0 = sched.beta0();
    ck.betaT = sched.betaT();
    ck.schedule_fingerprint = sched.fingerprint_hex();
    ck.optimizer.m.assign(ck.params.values.size(), 0.0);
    ck.optimizer.v.assign(ck.params.values.size(), 0.0);
    ck.optimizer.learning_rate = spec.learning_rate;
  }
  ck.train_spec_json = spec_json;
  if (ck.optimizer.m.empty()) {
    ck.optimizer.m.assign(ck.params.values.size(), 0.0);
    ck.optimizer.v.assign(ck.params.values.size(), 0.0);
  }

  std::vector<double> grad;
  for (int d = ck.draws_completed; d < spec.draws; ++d) {
    const RngStream drng = base.substream(1000 + static_cast<std::uint64_t>(d));
    std::vector<double> props;
    const DiffusionBatch train_set =
        generate_training_batch(spec, spec.train, g, sched, drng.substream(0), false, opts.threads, nullptr, &props);
    const DiffusionBatch val_set =
        generate_training_batch(spec, spec.val, g, sched, drng.substream(1), true, opts.threads, &props);
    RngStream shuffle = drng.substream(2);
    std::vector<std::size_t> order(train_set.size());
    for (int e = 0; e < spec.epochs; ++e) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);
      double acc = 0.0;
      try {
        for (std::size_t k = 0; k < order.size(); k += static_cast<std::size_t>(spec.batch_size)) {
          const std::size_t len = std::min(order.size() - k, static_cast<std::size_t>(spec.batch_size));
          const DiffusionBatch mb = train_set.select(std::span<const std::size_t>(order.data() + k, len));
          acc += net.loss(ck.params, mb, &grad) * static_cast<double>(len);
          adam_update(ck.params.values, grad, ck.optimizer);
        }
      } catch (const Error& err) {
        throw Error(err.code(), "training diverged at draw " + std::to_string(d) + ", epoch " + std::to_string(e) +
                                    ": " + err.what());
      }
      double val = 0.0;
      try {
        val = net.loss(ck.params, val_set);
      } catch (const Error& err) {
        throw Error(err.code(), "validation diverged at draw " + std::to_string(d) + ", epoch " + std::to_string(e) +
                                    ": " + err.what());
      }
      const CurveRow row{d, e, acc / static_cast<double>(order.size()), val, ck.optimizer.learning_rate};
      ck.curve.push_back(row);
      ++ck.epochs_completed;
      auto& o = ck.optimizer;
      if (!o.has_best || val < o.best_val) {
        o.best_val = val;
        o.has_best = true;
        o.bad_epochs = 0;
      } else if (++o.bad_epochs >= spec.patience) {
        o.learning_rate = std::max(o.learning_rate * spec.lr_decay, spec.min_learning_rate);
        o.bad_epochs = 0;
      }
      if (opts.progress) opts.progress(row);
    }
    ck.draws_completed = d + 1;
  }
  return ck;
}

void write_training_curve(const std::vector<CurveRow>& curve, const std::filesystem::path& path) {
  CsvTable t({"draw", "epoch", "train_loss", "val_loss", "learning_rate"});
  for (const auto& r : curve)
    t.add_row({std::to_string(r.draw), std::to_string(r.epoch), format_double(r.train_loss),
               format_double(r.val_loss), format_double(r.learning_rate)});
  t.write(path);
}

}  // namespace ncs
