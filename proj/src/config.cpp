#include <algorithm>
#include <set>
#include <sstream>

#include "json.hpp"
#include "ncs/error.hpp"
#include "ncs/experiment.hpp"
#include "ncs/field_io.hpp"
#include "tomlplusplus/toml.hpp"

namespace ncs {

namespace {

using json = nlohmann::ordered_json;

const std::set<std::string> kMetrics{"chi", "summaries", "kde", "mean", "pcc", "ks", "energy"};

// Typed reader over one TOML table; remembers which keys were consumed so
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const toml::table* t, std::string name) : t_(t), name_(std::move(name)) {}

  bool has(const char* key) const { return t_ && t_->contains(key); }

  double real(const char* key, double def) {
    const toml::node* n = take(key);
    if (!n) return def;
    if (auto v = n->as_floating_point()) return v->get();
    if (auto v = n->as_integer()) return static_cast<double>(v->get());
    throw bad(key, "a number");
  }

  std::int64_t integer(const char* key, std::int64_t def) {
    const toml::node* n = take(key);
    if (!n) return def;
    if (auto v = n->as_integer()) return v->get();
    throw bad(key, "an integer");
  }

  int small_int(const char* key, int def) {
    const std::int64_t v = integer(key, def);
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
      throw config_error(path(key) + " is out of range");
    return static_cast<int>(v);
  }

  std::size_t count(const char* key, std::size_t def) {
    const std::int64_t v = integer(key, static_cast<std::int64_t>(def));
    if (v < 0) throw config_error(path(key) + " must be non-negative");
    return static_cast<std::size_t>(v);
  }

  bool boolean(const char* key, bool def) {
    const toml::node* n = take(key);
    if (!n) return def;
    if (auto v = n->as_boolean()) return v->get();
    throw bad(key, "a boolean");
  }

  std::string string(const char* key, const std::string& def) {
    const toml::node* n = take(key);
    if (!n) return def;
    if (auto v = n->as_string()) return v->get();
    throw bad(key, "a string");
  }

  std::vector<double> reals(const char* key, std::vector<double> def) {
    const toml::array* a = array(key);
    if (!a) return def;
    std::vector<double> out;
    for (const auto& e : *a) {
      if (auto v = e.as_floating_point()) out.push_back(v->get());
      else if (auto w = e.as_integer()) out.push_back(static_cast<double>(w->get()));
      else throw bad(key, "an array of numbers");
    }
    return out;
  }

  std::vector<std::int64_t> integers(const char* key, std::vector<std::int64_t> def) {
    const toml::array* a = array(key);
    if (!a) return def;
    std::vector<std::int64_t> out;
    for (const auto& e : *a) {
      if (auto v = e.as_integer()) out.push_back(v->get());
      else throw bad(key, "an array of integers");
    }
    return out;
  }

  std::vector<std::string> strings(const char* key, std::vector<std::string> def) {
    const toml::array* a = array(key);
    if (!a) return def;
    std::vector<std::string> out;
    for (const auto& e : *a) {
      if (auto v = e.as_string()) out.push_back(v->get());
      else throw bad(key, "an array of strings");
    }
    return out;
  }

  Range range(const char* key, Range def) {
    auto v = reals(key, {def.lo, def.hi});
    if (v.size() != 2) throw config_error(path(key) + " must have two entries [lo, hi]");
    return {v[0], v[1]};
  }

  std::pair<int, int> int_range(const char* key, std::pair<int, int> def) {
    auto v = integers(key, {def.first, def.second});
    if (v.size() != 2) throw config_error(path(key) + " must have two entries [lo, hi]");
    return {static_cast<int>(v[0]), static_cast<int>(v[1])};
  }

  DataCounts counts(const char* key, DataCounts def) {
    auto v = integers(key, {def.r, def.p, def.s, def.m});
    if (v.size() != 4) throw config_error(path(key) + " must have four entries [r, p, s, m]");
    for (auto x : v)
      if (x < 1 || x > 1'000'000) throw config_error(path(key) + " entries must be in [1, 1000000]");
    return {static_cast<int>(v[0]), static_cast<int>(v[1]), static_cast<int>(v[2]), static_cast<int>(v[3])};
  }

  void finish() const {
    if (!t_) return;
    for (const auto& [k, v] : *t_) {
      (void)v;
      if (!used_.count(std::string(k.str()))) throw config_error("unknown key " + path(std::string(k.str()).c_str()));
    }
  }

 private:
  std::string path(const char* key) const { return name_ + "." + key; }
  Error bad(const char* key, const char* what) const { return config_error(path(key) + " must be " + what); }

  const toml::node* take(const char* key) {
    used_.insert(key);
    if (!t_) return nullptr;
    return t_->get(key);
  }

  const toml::array* array(const char* key) {
    const toml::node* n = take(key);
    if (!n) return nullptr;
    if (auto a = n->as_array()) return a;
    throw bad(key, "an array");
  }

  const toml::table* t_;
  std::string name_;
  std::set<std::string> used_;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw config_error(what);
}

ExperimentConfig parse_config_impl(const std::string& text, const std::filesystem::path& base_dir,
                                   const Overrides& ov) {
  toml::table root;
  try {
    root = toml::parse(text);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << "config parse error at line " << e.source().begin.line << ": " << e.description();
    throw config_error(os.str());
  }

  static const std::set<std::string> blocks{"grid",  "process", "stopping", "schedule", "mask",
                                            "net",   "train",   "eval",     "io"};
  for (const auto& [k, v] : root) {
    const std::string key(k.str());
    if (!blocks.count(key)) throw config_error("unknown config block [" + key + "]");
    if (!v.is_table()) throw config_error("[" + key + "] must be a table");
  }
  auto block = [&](const char* name) { return Section(root[name].as_table(), name); };

  ExperimentConfig c;

  Section grid = block("grid");
  c.side = grid.small_int("side", c.side);
  c.lower = grid.real("lower", c.lower);
  c.upper = grid.real("upper", c.upper);
  grid.finish();

  Section proc = block("process");
  c.process.kind = process_from_string(proc.string("kind", to_string(c.process.kind)));
  c.process.gp.length_scale = proc.real("length_scale", c.process.gp.length_scale);
  c.process.gp.variance = proc.real("variance", c.process.gp.variance);
  c.process.br.range = proc.real("range", c.process.br.range);
  c.process.br.smoothness = proc.real("smoothness", c.process.br.smoothness);
  proc.finish();

  Section stop = block("stopping");
  c.process.stopping.bound = stop.real("bound", c.process.stopping.bound);
  c.process.stopping.max_points = stop.count("max_points", c.process.stopping.max_points);
  stop.finish();

  Section sch = block("schedule");
  c.schedule.steps = sch.small_int("steps", c.schedule.steps);
  c.schedule.beta0 = sch.real("beta0", c.schedule.beta0);
  c.schedule.betaT = sch.real("betaT", c.schedule.betaT);
  c.schedule.suppress_final_noise = sch.boolean("suppress_final_noise", c.schedule.suppress_final_noise);
  c.schedule.sample_chunk = sch.small_int("sample_chunk", c.schedule.sample_chunk);
  sch.finish();

  Section mask = block("mask");
  const std::string law = mask.string("law", "bernoulli");
  if (law == "bernoulli") c.mask.kind = MaskLaw::Kind::Bernoulli;
  else if (law == "fixed_count") c.mask.kind = MaskLaw::Kind::FixedCount;
  else throw config_error("mask.law must be \"bernoulli\" or \"fixed_count\"");
  c.mask.rho = mask.real("rho", c.mask.rho);
  c.mask.k = mask.count("k", c.mask.k);
  mask.finish();

  Section net = block("net");
  c.net.base_width = net.small_int("base_width", c.net.base_width);
  c.net.depth = net.small_int("depth", c.net.depth);
  c.net.fourier_features = net.small_int("fourier_features", c.net.fourier_features);
  c.net.fourier_scale = net.real("fourier_scale", c.net.fourier_scale);
  c.net.fourier_seed = static_cast<std::uint64_t>(net.integer("fourier_seed", 0));
  c.net.embed_width = net.small_int("embed_width", c.net.embed_width);
  c.net.mode = conditioning_from_string(net.string("conditioning", to_string(c.net.mode)));
  c.net.micro_batch = net.small_int("micro_batch", c.net.micro_batch);
  net.finish();

  Section tr = block("train");
  c.train.mode = amortization_from_string(tr.string("mode", to_string(c.train.mode)));
  c.train.rho = tr.real("rho", c.train.rho);
  c.train.rho_range = tr.range("rho_range", c.train.rho_range);
  c.train.theta_range = tr.range("theta_range", c.train.theta_range);
  std::tie(c.train.obs_lo, c.train.obs_hi) = tr.int_range("obs_range", {c.train.obs_lo, c.train.obs_hi});
  std::tie(c.train.val_obs_lo, c.train.val_obs_hi) =
      tr.int_range("val_obs_range", {c.train.val_obs_lo, c.train.val_obs_hi});
  c.train.train = tr.counts("counts", c.train.train);
  c.train.val = tr.counts("val_counts", c.train.val);
  c.train.draws = tr.small_int("draws", c.train.draws);
  c.train.epochs = tr.small_int("epochs", c.train.epochs);
  c.train.batch_size = tr.small_int("batch_size", c.train.batch_size);
  c.train.learning_rate = tr.real("learning_rate", c.train.learning_rate);
  c.train.lr_decay = tr.real("lr_decay", c.train.lr_decay);
  c.train.patience = tr.small_int("patience", c.train.patience);
  c.train.min_learning_rate = tr.real("min_learning_rate", c.train.min_learning_rate);
  tr.finish();

  Section ev = block("eval");
  c.eval.m = ev.count("m", c.eval.m);
  c.eval.metrics = ev.strings("metrics", c.eval.metrics);
  c.eval.bins.count = ev.small_int("bins", c.eval.bins.count);
  c.eval.bins.max_distance = ev.real("max_distance", c.eval.bins.max_distance);
  c.eval.rho_values = ev.reals("rho_values", c.eval.rho_values);
  for (auto k : ev.integers("k_values", {})) {
    require(k >= 0, "eval.k_values entries must be non-negative");
    c.eval.k_values.push_back(static_cast<std::size_t>(k));
  }
  c.eval.theta_values = ev.reals("theta_values", c.eval.theta_values);
  c.eval.kde_points = ev.count("kde_points", c.eval.kde_points);
  c.eval.kde2d_points = ev.count("kde2d_points", c.eval.kde2d_points);
  c.eval.permutations = ev.count("permutations", c.eval.permutations);
  c.eval.energy_max = ev.count("energy_max", c.eval.energy_max);
  for (auto p : ev.integers("probe_pixels", {})) {
    require(p >= 0, "eval.probe_pixels entries must be non-negative");
    c.eval.probe_pixels.push_back(static_cast<std::size_t>(p));
  }
  ev.finish();

  Section io = block("io");
  c.out = io.string("out", c.out.string());
  const std::int64_t seed = io.integer("seed", 0);
  require(seed >= 0, "io.seed must be non-negative");
  c.seed = static_cast<std::uint64_t>(seed);
  c.threads = io.small_int("threads", c.threads);
  io.finish();

  if (ov.seed) c.seed = *ov.seed;
  if (ov.out) c.out = *ov.out;
  if (ov.threads) c.threads = *ov.threads;
  if (c.out.is_relative() && !base_dir.empty() && !ov.out) c.out = base_dir / c.out;

  c.net.side = c.side;
  c.train.process = c.process;
  c.train.seed = c.seed;
  c.validate();
  return c;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir, const Overrides& ov) {
  try {
    return parse_config_impl(text, base_dir, ov);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::InvalidArgument) throw config_error(e.what());
    throw;
  }
}

ExperimentConfig load_config(const std::filesystem::path& path, const Overrides& ov) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error& e) {
    throw config_error("cannot read config " + path.string() + ": " + e.what());
  }
  return parse_config(text, path.parent_path(), ov);
}

void ExperimentConfig::validate() const {
  require(side >= 1 && side <= 512, "grid.side must be in [1, 512]");
  GridSpec g = [&] {
    try {
      return grid();
    } catch (const Error& e) {
      throw config_error(std::string("grid: ") + e.what());
    }
  }();
  auto wrap = [](const char* block, auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      if (e.code() == ErrorCode::Config) throw;
      throw config_error(std::string(block) + ": " + e.what());
    }
  };
  wrap("process", [&] { process.validate(); });
  require(process.stopping.bound >= 0.0, "stopping.bound must be non-negative");
  require(process.stopping.max_points >= 1, "stopping.max_points must be at least 1");
  wrap("schedule", [&] { build_schedule(); });
  require(schedule.sample_chunk >= 1, "schedule.sample_chunk must be at least 1");
  require(mask.rho >= 0.0 && mask.rho <= 1.0, "mask.rho must be in [0, 1]");
  if (mask.kind == MaskLaw::Kind::FixedCount)
    require(mask.k <= g.size(), "mask.k exceeds the number of grid points");
  wrap("net", [&] { net.validate(); });
  wrap("train", [&] { train.validate(static_cast<int>(g.size())); });

  require(eval.m >= 1, "eval.m must be at least 1");
  for (const auto& m : eval.metrics) require(kMetrics.count(m) > 0, "eval.metrics: unknown metric \"" + m + "\"");
  require(eval.bins.count >= 1, "eval.bins must be at least 1");
  require(eval.bins.max_distance >= 0.0, "eval.max_distance must be non-negative");
  for (double r : eval.rho_values) require(r >= 0.0 && r <= 1.0, "eval.rho_values entries must be in [0, 1]");
  for (auto k : eval.k_values) require(k <= g.size(), "eval.k_values entries exceed the number of grid points");
  for (double t : eval.theta_values) require(t > 0.0, "eval.theta_values entries must be positive");
  require(eval.kde_points >= 2, "eval.kde_points must be at least 2");
  require(eval.kde2d_points >= 2, "eval.kde2d_points must be at least 2");
  require(eval.energy_max >= 2, "eval.energy_max must be at least 2");
  for (auto p : eval.probe_pixels) require(p < g.size(), "eval.probe_pixels entries must be grid indices");
  require(threads >= 1 && threads <= 1024, "io.threads must be in [1, 1024]");
  require(!out.empty(), "io.out must not be empty");
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["grid"] = {{"side", side}, {"lower", lower}, {"upper", upper}};
  j["process"] = {{"kind", to_string(process.kind)},
                  {"length_scale", process.gp.length_scale},
                  {"variance", process.gp.variance},
                  {"range", process.br.range},
                  {"smoothness", process.br.smoothness}};
  j["stopping"] = {{"bound", process.stopping.bound}, {"max_points", process.stopping.max_points}};
  j["schedule"] = {{"steps", schedule.steps},
                   {"beta0", schedule.beta0},
                   {"betaT", schedule.betaT},
                   {"suppress_final_noise", schedule.suppress_final_noise},
                   {"sample_chunk", schedule.sample_chunk}};
  j["mask"] = {{"law", mask.kind == MaskLaw::Kind::Bernoulli ? "bernoulli" : "fixed_count"},
               {"rho", mask.rho},
               {"k", mask.k}};
  j["net"] = {{"base_width", net.base_width},   {"depth", net.depth},
              {"fourier_features", net.fourier_features}, {"fourier_scale", net.fourier_scale},
              {"fourier_seed", net.fourier_seed}, {"embed_width", net.embed_width},
              {"conditioning", to_string(net.mode)}, {"micro_batch", net.micro_batch}};
  j["train"] = json::parse(train_spec_json(train));
  j["eval"] = {{"m", eval.m},
               {"metrics", eval.metrics},
               {"bins", eval.bins.count},
               {"max_distance", eval.bins.max_distance},
               {"rho_values", eval.rho_values},
               {"k_values", eval.k_values},
               {"theta_values", eval.theta_values},
               {"kde_points", eval.kde_points},
               {"kde2d_points", eval.kde2d_points},
               {"permutations", eval.permutations},
               {"energy_max", eval.energy_max},
               {"probe_pixels", eval.probe_pixels}};
  j["io"] = {{"seed", seed}};
  return j.dump();
}

}  // namespace ncs
