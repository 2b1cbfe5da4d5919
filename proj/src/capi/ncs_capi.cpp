#include "ncs/ncs.h"

#include <algorithm>
#include <new>
#include <optional>
#include <string>

#include "ncs/error.hpp"
#include "ncs/experiment.hpp"
#include "ncs/field_io.hpp"
#include "ncs/training.hpp"

struct ncs_grid {
  ncs::GridSpec g;
};
struct ncs_field {
  ncs::Field f;
};
struct ncs_mask {
  ncs::Mask m;
};
struct ncs_model {
  ncs::Checkpoint ckpt;
};
struct ncs_experiment {
  ncs::ExperimentConfig cfg;
  std::string out;
};

namespace {

thread_local std::string g_last_error;

template <class F>
ncs_status guarded(F&& fn) {
  try {
    fn();
    g_last_error.clear();
    return NCS_OK;
  } catch (const ncs::Error& e) {
    g_last_error = e.what();
    return static_cast<ncs_status>(e.code());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return NCS_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return NCS_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  if (!p) throw ncs::invalid_argument(std::string(what) + " is null");
}

ncs::Overrides overrides(const ncs_overrides* ov) {
  ncs::Overrides o;
  if (!ov) return o;
  if (ov->has_seed) o.seed = ov->seed;
  if (ov->out) o.out = ov->out;
  if (ov->threads > 0) o.threads = ov->threads;
  return o;
}

}  // namespace

extern "C" {

const char* ncs_version(void) { return ncs::kVersion; }
const char* ncs_last_error(void) { return g_last_error.c_str(); }

int ncs_exit_code(ncs_status s) {
  switch (s) {
    case NCS_OK: return 0;
    case NCS_ERR_INVALID_ARGUMENT:
    case NCS_ERR_CONFIG: return 2;
    case NCS_ERR_NUMERICAL:
    case NCS_ERR_CONTRACT: return 3;
    case NCS_ERR_IO: return 4;
    default: return 1;
  }
}

void ncs_set_verbosity(int level) { ncs::set_verbosity(level); }

ncs_status ncs_grid_create(int side, double lower, double upper, ncs_grid** out) {
  return guarded([&] {
    need(out, "out");
    *out = new ncs_grid{ncs::GridSpec::build(side, lower, upper)};
  });
}
void ncs_grid_destroy(ncs_grid* g) { delete g; }
size_t ncs_grid_size(const ncs_grid* g) { return g ? g->g.size() : 0; }
ncs_status ncs_grid_location(const ncs_grid* g, size_t index, double* x, double* y) {
  return guarded([&] {
    need(g, "grid");
    need(x, "x");
    need(y, "y");
    if (index >= g->g.size()) throw ncs::invalid_argument("grid index out of range");
    const auto loc = g->g.location(index);
    *x = loc.x;
    *y = loc.y;
  });
}

ncs_status ncs_field_create(const double* values, size_t n, int scale, ncs_field** out) {
  return guarded([&] {
    need(out, "out");
    if (n > 0) need(values, "values");
    if (scale < NCS_SCALE_RAW || scale > NCS_SCALE_GUMBEL) throw ncs::invalid_argument("unknown scale tag");
    *out = new ncs_field{ncs::Field(std::vector<double>(values, values + n), static_cast<ncs::Scale>(scale))};
  });
}
ncs_status ncs_field_read(const char* path, ncs_field** out, int* side) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    auto f = ncs::read_field(path);
    if (side) *side = f.side;
    *out = new ncs_field{std::move(f.field)};
  });
}
ncs_status ncs_field_write(const char* path, int side, const ncs_field* f) {
  return guarded([&] {
    need(path, "path");
    need(f, "field");
    ncs::write_field(path, side, f->f);
  });
}
size_t ncs_field_size(const ncs_field* f) { return f ? f->f.size() : 0; }
int ncs_field_scale(const ncs_field* f) { return f ? static_cast<int>(f->f.scale()) : -1; }
ncs_status ncs_field_values(const ncs_field* f, double* out, size_t n) {
  return guarded([&] {
    need(f, "field");
    need(out, "out");
    if (n < f->f.size()) throw ncs::invalid_argument("output buffer too small");
    std::copy(f->f.values().begin(), f->f.values().end(), out);
  });
}
void ncs_field_destroy(ncs_field* f) { delete f; }

ncs_status ncs_mask_create(const uint8_t* bits, size_t n, ncs_mask** out) {
  return guarded([&] {
    need(out, "out");
    if (n > 0) need(bits, "bits");
    std::vector<std::uint8_t> b(bits, bits + n);
    for (auto& v : b) v = v != 0;
    *out = new ncs_mask{ncs::Mask(std::move(b))};
  });
}
ncs_status ncs_mask_sample_bernoulli(const ncs_grid* g, double rho, uint64_t seed, ncs_mask** out) {
  return guarded([&] {
    need(g, "grid");
    need(out, "out");
    ncs::RngStream rng(seed, 0x6d61736b);
    *out = new ncs_mask{ncs::sample_bernoulli_mask(g->g, rho, rng)};
  });
}
ncs_status ncs_mask_sample_fixed_count(const ncs_grid* g, size_t k, uint64_t seed, ncs_mask** out) {
  return guarded([&] {
    need(g, "grid");
    need(out, "out");
    ncs::RngStream rng(seed, 0x6d61736b);
    *out = new ncs_mask{ncs::sample_fixed_count_mask(g->g, k, rng)};
  });
}
ncs_status ncs_mask_read(const char* path, ncs_mask** out, int* side) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    auto m = ncs::read_mask(path);
    if (side) *side = m.side;
    *out = new ncs_mask{std::move(m.mask)};
  });
}
ncs_status ncs_mask_write(const char* path, int side, const ncs_mask* m) {
  return guarded([&] {
    need(path, "path");
    need(m, "mask");
    ncs::write_mask(path, side, m->m);
  });
}
size_t ncs_mask_size(const ncs_mask* m) { return m ? m->m.size() : 0; }
size_t ncs_mask_observed_count(const ncs_mask* m) { return m ? m->m.observed_count() : 0; }
void ncs_mask_destroy(ncs_mask* m) { delete m; }

ncs_status ncs_model_load(const char* path, int expected_side, ncs_model** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    std::optional<int> side;
    if (expected_side > 0) side = expected_side;
    *out = new ncs_model{ncs::load_checkpoint(path, side)};
  });
}
int ncs_model_side(const ncs_model* m) { return m ? m->ckpt.net.side : 0; }
size_t ncs_model_parameter_count(const ncs_model* m) { return m ? m->ckpt.params.values.size() : 0; }

ncs_status ncs_model_sample(const ncs_model* m, const ncs_field* obs, const ncs_mask* mask, double theta,
                            uint64_t seed, size_t count, int suppress_final_noise, double* out) {
  return guarded([&] {
    need(m, "model");
    need(obs, "observations");
    need(mask, "mask");
    if (count > 0) need(out, "out");
    const std::size_t n = static_cast<std::size_t>(m->ckpt.net.side) * m->ckpt.net.side;
    if (obs->f.size() != n || mask->m.size() != n)
      throw ncs::invalid_argument("observations or mask do not match the model grid");
    const ncs::Schedule sched = m->ckpt.schedule();
    const ncs::ScoreNet net(m->ckpt.net, sched);
    const ncs::NetworkScore score(net, m->ckpt.params);
    const auto rows = static_cast<Eigen::Index>(n);
    const auto cols = static_cast<Eigen::Index>(count);
    Eigen::MatrixXd states(rows, cols), masks(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) {
        states(i, j) = obs->f[static_cast<std::size_t>(i)];
        masks(i, j) = mask->m.observed(static_cast<std::size_t>(i)) ? 1.0 : 0.0;
      }
    const std::vector<double> thetas(count, theta);
    const ncs::RngStream base(seed, 0x73616d706c65);
    std::vector<ncs::RngStream> streams;
    for (std::size_t i = 0; i < count; ++i) streams.push_back(base.substream(i));
    ncs::SamplerOptions opts;
    opts.suppress_final_noise = suppress_final_noise != 0;
    const Eigen::MatrixXd res = ncs::reverse_conditional_sample_batch(states, masks, thetas, sched, score, streams, opts);
    std::copy(res.data(), res.data() + res.size(), out);
  });
}
void ncs_model_destroy(ncs_model* m) { delete m; }

ncs_status ncs_experiment_load(const char* path, const ncs_overrides* ov, ncs_experiment** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    auto cfg = ncs::load_config(path, overrides(ov));
    *out = new ncs_experiment{cfg, cfg.out.string()};
  });
}
ncs_status ncs_experiment_parse(const char* toml_text, const ncs_overrides* ov, ncs_experiment** out) {
  return guarded([&] {
    need(toml_text, "toml_text");
    need(out, "out");
    auto cfg = ncs::parse_config(toml_text, {}, overrides(ov));
    *out = new ncs_experiment{cfg, cfg.out.string()};
  });
}
const char* ncs_experiment_out_dir(const ncs_experiment* e) { return e ? e->out.c_str() : ""; }
uint64_t ncs_experiment_seed(const ncs_experiment* e) { return e ? e->cfg.seed : 0; }
void ncs_experiment_destroy(ncs_experiment* e) { delete e; }

ncs_status ncs_cmd_simulate(const ncs_experiment* e, size_t count, int with_masks) {
  return guarded([&] {
    need(e, "experiment");
    ncs::cmd_simulate(e->cfg, count, with_masks != 0);
  });
}
ncs_status ncs_cmd_train(const ncs_experiment* e, const char* resume) {
  return guarded([&] {
    need(e, "experiment");
    std::optional<std::filesystem::path> r;
    if (resume) r = resume;
    ncs::cmd_train(e->cfg, r);
  });
}
ncs_status ncs_cmd_sample(const ncs_experiment* e, const char* checkpoint, const char* observations,
                          const char* mask, size_t count) {
  return guarded([&] {
    need(e, "experiment");
    need(checkpoint, "checkpoint");
    need(observations, "observations");
    need(mask, "mask");
    ncs::cmd_sample(e->cfg, checkpoint, observations, mask, count);
  });
}
ncs_status ncs_cmd_validate(const ncs_experiment* e, const char* checkpoint, int oracle) {
  return guarded([&] {
    need(e, "experiment");
    std::optional<std::filesystem::path> c;
    if (checkpoint) c = checkpoint;
    ncs::cmd_validate(e->cfg, c, oracle != 0);
  });
}
ncs_status ncs_cmd_report(const ncs_experiment* e, const char* dataset_dir) {
  return guarded([&] {
    need(e, "experiment");
    need(dataset_dir, "dataset_dir");
    ncs::cmd_report(e->cfg, dataset_dir);
  });
}

}  // extern "C"
