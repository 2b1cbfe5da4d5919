#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "ncs/diffusion.hpp"
#include "ncs/scorenet.hpp"

using namespace ncs;

namespace {

NetConfig tiny_config(ConditioningMode mode = ConditioningMode::MaskOnly) {
  NetConfig cfg;
  cfg.side = 4;
  cfg.base_width = 3;
  cfg.depth = 2;
  cfg.fourier_features = 8;
  cfg.fourier_scale = 2.0;
  cfg.embed_width = 5;
  cfg.mode = mode;
  cfg.micro_batch = 2;
  return cfg;
}

DiffusionBatch random_batch(std::size_t n, std::size_t count, const Schedule& sched, RngStream& rng) {
  DiffusionBatch b;
  const auto rows = static_cast<Eigen::Index>(n), cols = static_cast<Eigen::Index>(count);
  b.states.resize(rows, cols);
  b.masks.resize(rows, cols);
  b.noise.resize(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) {
      b.masks(i, j) = rng.uniform() < 0.3 ? 1.0 : 0.0;
      b.states(i, j) = rng.normal();
      b.noise(i, j) = b.masks(i, j) == 1.0 ? 0.0 : rng.normal();
    }
    b.thetas.push_back(rng.uniform(0.5, 5.5));
    b.steps.push_back(static_cast<int>(rng.integer(1, sched.steps())));
  }
  return b;
}

// perturb every parameter so the zero head does not hide upstream gradients
ModelParams perturbed(const ScoreNet& net, std::uint64_t seed) {
  RngStream rng(seed, 0);
  ModelParams p = net.init_params(rng);
  for (auto& v : p.values) v += 0.2 * rng.normal();
  return p;
}

}  // namespace

TEST_CASE("score network: zero head gives a zero initial output") {
  const auto sched = Schedule::build(50, 1e-4, 0.02);
  ScoreNet net(tiny_config(), sched);
  RngStream rng(3, 0);
  const auto p = net.init_params(rng);
  const auto b = random_batch(net.pixels(), 5, sched, rng);
  const Eigen::MatrixXd s = net.score(p, ScoreQuery{b.states, b.masks, b.thetas, b.steps});
  CHECK(s.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("score network: analytic gradient matches central differences") {
  const auto sched = Schedule::build(50, 1e-4, 0.02);
  for (auto mode : {ConditioningMode::MaskOnly, ConditioningMode::ThetaScaledMask}) {
    ScoreNet net(tiny_config(mode), sched);
    auto p = perturbed(net, 11);
    RngStream rng(12, 0);
    const auto batch = random_batch(net.pixels(), 5, sched, rng);
    std::vector<double> grad;
    net.loss(p, batch, &grad);
    double worst = 0.0;
    for (int k = 0; k < 50; ++k) {
      const auto idx = static_cast<std::size_t>(rng.index(p.values.size()));
      const double keep = p.values[idx];
      const double h = 1e-5;
      p.values[idx] = keep + h;
      const double up = net.loss(p, batch);
      p.values[idx] = keep - h;
      const double dn = net.loss(p, batch);
      p.values[idx] = keep;
      const double fd = (up - dn) / (2 * h);
      const double rel = std::abs(fd - grad[idx]) / std::max(1e-6, std::abs(fd) + std::abs(grad[idx]));
      worst = std::max(worst, rel);
    }
    CHECK(worst <= 1e-4);
  }
}
