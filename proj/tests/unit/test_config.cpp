#include <string>

#include "doctest.h"
#include "ncs/error.hpp"
#include "ncs/experiment.hpp"

using namespace ncs;

namespace {

ErrorCode code_of(const std::string& text, const Overrides& ov = {}) {
  try {
    parse_config(text, "/base", ov);
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected a config error");
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST_CASE("empty config gives the defaults") {
  const ExperimentConfig c = parse_config("", "/base");
  CHECK(c.side == 32);
  CHECK(c.lower == -10.0);
  CHECK(c.upper == 10.0);
  CHECK(c.process.kind == ProcessKind::Gaussian);
  CHECK(c.process.gp.length_scale == 3.0);
  CHECK(c.process.gp.variance == 1.5);
  CHECK(c.schedule.steps == 1000);
  CHECK(c.schedule.beta0 == 1e-4);
  CHECK(c.schedule.betaT == 0.02);
  CHECK(c.eval.m == 4000);
  CHECK(c.seed == 0);
  CHECK(c.threads == 1);
  CHECK(c.out == std::filesystem::path("/base/out"));
  CHECK(c.net.side == 32);
  CHECK(c.train.seed == 0);
}

TEST_CASE("config blocks are parsed") {
  const ExperimentConfig c = parse_config(R"(
[grid]
side = 8
[process]
kind = "brown_resnick"
range = 2.0
smoothness = 1.0
[stopping]
max_points = 5000
[mask]
law = "fixed_count"
k = 3
[io]
seed = 17
out = "runs/a"
threads = 2
)",
                                          "/base");
  CHECK(c.side == 8);
  CHECK(c.process.kind == ProcessKind::BrownResnick);
  CHECK(c.process.br.range == 2.0);
  CHECK(c.process.br.smoothness == 1.0);
  CHECK(c.process.field_scale() == Scale::Gumbel);
  CHECK(c.mask.kind == MaskLaw::Kind::FixedCount);
  CHECK(c.mask.k == 3);
  CHECK(c.seed == 17);
  CHECK(c.threads == 2);
  CHECK(c.out == std::filesystem::path("/base/runs/a"));
  CHECK(c.train.process.kind == ProcessKind::BrownResnick);
}

TEST_CASE("invalid configs are rejected") {
  CHECK(code_of("[grid]\nsidee = 8\n") == ErrorCode::Config);
  CHECK(code_of("[grids]\nside = 8\n") == ErrorCode::Config);
  CHECK(code_of("[mask]\nrho = 1.5\n") == ErrorCode::Config);
  CHECK(code_of("[mask]\nrho = -0.1\n") == ErrorCode::Config);
  CHECK(code_of("[grid]\nside = 0\n") == ErrorCode::Config);
  CHECK(code_of("[grid]\nside = \"eight\"\n") == ErrorCode::Config);
  CHECK(code_of("[schedule]\nbeta0 = 0.05\n") == ErrorCode::Config);
  CHECK(code_of("[process]\nkind = \"poisson\"\n") == ErrorCode::Config);
  CHECK(code_of("[eval]\nmetrics = [\"chi\", \"nope\"]\n") == ErrorCode::Config);
  CHECK(code_of("[io]\nthreads = 0\n") == ErrorCode::Config);
  CHECK(code_of("[grid\nside = 8\n") == ErrorCode::Config);

  try {
    parse_config("[mask]\nrho = 1.5\n");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("mask.rho") != std::string::npos);
  }
  try {
    parse_config("[net]\nwidth = 3\n");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("net.width") != std::string::npos);
  }
}

TEST_CASE("overrides take precedence over the file") {
  const std::string text = "[io]\nseed = 3\nthreads = 2\nout = \"o\"\n";
  Overrides ov;
  ov.seed = 99;
  ov.threads = 4;
  ov.out = "elsewhere";
  const ExperimentConfig c = parse_config(text, "/base", ov);
  CHECK(c.seed == 99);
  CHECK(c.train.seed == 99);
  CHECK(c.threads == 4);
  CHECK(c.out == std::filesystem::path("elsewhere"));

  Overrides bad;
  bad.threads = 0;
  CHECK(code_of(text, bad) == ErrorCode::Config);
}

TEST_CASE("manifest echo ignores threads and output location") {
  const ExperimentConfig a = parse_config("[io]\nthreads = 1\nout = \"a\"\n", "/base");
  const ExperimentConfig b = parse_config("[io]\nthreads = 3\nout = \"b\"\n", "/base");
  CHECK(a.to_json() == b.to_json());
  const ExperimentConfig c = parse_config("[io]\nseed = 5\n", "/base");
  CHECK(a.to_json() != c.to_json());
}
