#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "ncs/error.hpp"
#include "ncs/field_io.hpp"
#include "ncs/training.hpp"

using namespace ncs;
namespace fs = std::filesystem;

namespace {

NetConfig tiny_net(int side) {
  NetConfig c;
  c.side = side;
  c.base_width = 4;
  c.depth = 1;
  c.fourier_features = 8;
  c.embed_width = 8;
  c.micro_batch = 16;
  return c;
}

TrainSpec tiny_spec() {
  TrainSpec s;
  s.process.gp = GPParams{3.0, 1.5};
  s.train = DataCounts{4, 1, 4, 2};
  s.val = DataCounts{4, 1, 1, 1};
  s.draws = 2;
  s.epochs = 2;
  s.batch_size = 16;
  s.seed = 7;
  return s;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "ncs_unit_training";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("initialization is seeded and the head starts at zero") {
  const auto sched = Schedule::build(50, 1e-4, 0.02);
  const ScoreNet net(tiny_net(4), sched);
  RngStream a(1, 1), b(1, 1), c(2, 1);
  const ModelParams pa = net.init_params(a), pb = net.init_params(b), pc = net.init_params(c);
  CHECK(pa.values == pb.values);
  const auto& head = pa.layout.find("out.w");
  std::size_t nonzero = 0, differ = 0;
  for (std::size_t k = 0; k < pa.values.size(); ++k) {
    const bool in_head = k >= head.offset && k < head.offset + head.size();
    if (pa.values[k] != 0.0 && !in_head) {
      ++nonzero;
      differ += pa.values[k] != pc.values[k];
    }
  }
  REQUIRE(nonzero > 0);
  CHECK(differ > 0.99 * nonzero);
}

TEST_CASE("observed outputs are exactly zero") {
  const auto sched = Schedule::build(50, 1e-4, 0.02);
  const ScoreNet net(tiny_net(4), sched);
  RngStream rng(3, 1);
  ModelParams p = net.init_params(rng);
  for (auto& v : p.values) v += 0.1 * rng.normal();
  Eigen::MatrixXd x(16, 3), msk = Eigen::MatrixXd::Zero(16, 3);
  for (Eigen::Index k = 0; k < x.size(); ++k) x.data()[k] = rng.normal();
  msk(0, 0) = msk(5, 1) = msk(15, 2) = 1;
  const std::vector<double> th{3, 3, 3};
  const std::vector<int> steps{1, 25, 50};
  const ScoreQuery q{x, msk, th, steps};
  const Eigen::MatrixXd e = net.predict_noise(p, q);
  CHECK(e(0, 0) == 0.0);
  CHECK(e(5, 1) == 0.0);
  CHECK(e(15, 2) == 0.0);
  CHECK(e(1, 0) != 0.0);
  const Eigen::MatrixXd s = net.score(p, q);
  CHECK(s(5, 1) == 0.0);
  CHECK(s(3, 1) == doctest::Approx(-e(3, 1) / sched.sigma_bar(25)));
}

TEST_CASE("duplicating a batch leaves the loss and gradient unchanged") {
  const auto sched = Schedule::build(50, 1e-4, 0.02);
  const ScoreNet net(tiny_net(4), sched);
  RngStream rng(4, 1);
  ModelParams p = net.init_params(rng);
  for (auto& v : p.values) v += 0.05 * rng.normal();
  const TrainSpec spec = tiny_spec();
  const DiffusionBatch b =
      generate_training_batch(spec, spec.train, GridSpec::build(4, -10, 10), sched, RngStream(4, 2), false);
  DiffusionBatch twice = b;
  twice.append(b);
  std::vector<double> g1, g2;
  const double l1 = net.loss(p, b, &g1), l2 = net.loss(p, twice, &g2);
  CHECK(l2 == doctest::Approx(l1).epsilon(1e-12));
  REQUIRE(g1.size() == g2.size());
  double diff = 0, norm = 0;
  for (std::size_t k = 0; k < g1.size(); ++k) {
    diff = std::max(diff, std::abs(g1[k] - g2[k]));
    norm = std::max(norm, std::abs(g1[k]));
  }
  CHECK(diff <= 1e-10 * norm);
}

TEST_CASE("training is deterministic and checkpoints round-trip") {
  const auto g = GridSpec::build(4, -10, 10);
  const auto sched = Schedule::build(50, 1e-4, 0.02);
  const NetConfig cfg = tiny_net(4);
  const TrainSpec spec = tiny_spec();
  const Checkpoint a = train(spec, cfg, g, sched);
  const Checkpoint b = train(spec, cfg, g, sched);
  CHECK(serialize_checkpoint(a) == serialize_checkpoint(b));
  CHECK(a.draws_completed == 2);
  CHECK(a.curve.size() == 4);

  const auto p1 = scratch("a.ncsc"), p2 = scratch("b.ncsc");
  save_checkpoint(a, p1);
  const Checkpoint back = load_checkpoint(p1, 4);
  save_checkpoint(back, p2);
  CHECK(read_file(p1) == read_file(p2));
  CHECK(back.params.values == a.params.values);
  CHECK(back.net == a.net);
  CHECK(back.schedule_fingerprint == sched.fingerprint_hex());

  // Outputs of the reloaded model are bit-identical.
  const ScoreNet net(back.net, back.schedule());
  RngStream rng(5, 1);
  Eigen::MatrixXd x(16, 2);
  for (Eigen::Index k = 0; k < x.size(); ++k) x.data()[k] = rng.normal();
  const Eigen::MatrixXd msk = Eigen::MatrixXd::Zero(16, 2);
  const std::vector<double> th{3, 3};
  const std::vector<int> steps{10, 40};
  const ScoreQuery q{x, msk, th, steps};
  CHECK(net.score(back.params, q) == ScoreNet(cfg, sched).score(a.params, q));

  try {
    load_checkpoint(p1, 8);
    FAIL("expected a side mismatch");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("side") != std::string::npos);
  }

  // Resuming with no further draws is a no-op.
  TrainSpec more = spec;
  more.draws = 3;
  const Checkpoint resumed = train(more, cfg, g, sched, {}, &back);
  const Checkpoint straight = train(more, cfg, g, sched);
  CHECK(resumed.draws_completed == 3);
  CHECK(serialize_checkpoint(resumed) == serialize_checkpoint(straight));
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto p = scratch("bad.ncsc");
  {
    std::ofstream os(p, std::ios::binary);
    os << "NCSCKPT garbage";
  }
  try {
    load_checkpoint(p);
    FAIL("expected an I/O error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Io);
  }
}
