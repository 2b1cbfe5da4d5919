#include <cmath>
#include <functional>

#include "doctest.h"
#include "ncs/diffusion.hpp"
#include "ncs/error.hpp"
#include "ncs/processes.hpp"

using namespace ncs;

namespace {

class FnScore final : public ScoreFunction {
 public:
  explicit FnScore(std::function<Eigen::MatrixXd(const ScoreQuery&)> f, bool theta = false)
      : f_(std::move(f)), theta_(theta) {}
  Eigen::MatrixXd evaluate(const ScoreQuery& q) const override { return f_(q); }
  bool requires_theta() const override { return theta_; }

 private:
  std::function<Eigen::MatrixXd(const ScoreQuery&)> f_;
  bool theta_;
};

// Batch whose states were diffused from x0 with the recorded noise.
DiffusionBatch make_batch(std::size_t n, std::size_t b, const Schedule& sched, RngStream& rng) {
  DiffusionBatch d;
  d.states.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(b));
  d.masks.resize(d.states.rows(), d.states.cols());
  d.noise.resize(d.states.rows(), d.states.cols());
  for (std::size_t c = 0; c < b; ++c) {
    const int t = static_cast<int>(rng.integer(1, sched.steps()));
    d.steps.push_back(t);
    d.thetas.push_back(3.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = static_cast<Eigen::Index>(i), k = static_cast<Eigen::Index>(c);
      const bool obs = rng.uniform() < 0.3;
      const double x0 = rng.normal(), e = obs ? 0.0 : rng.normal();
      d.masks(r, k) = obs;
      d.noise(r, k) = e;
      d.states(r, k) = obs ? x0 : std::sqrt(sched.alpha_bar(t)) * x0 + sched.sigma_bar(t) * e;
    }
  }
  return d;
}

Eigen::MatrixXd replicate(const Field& f, std::size_t m) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(f.size()), static_cast<Eigen::Index>(m));
  for (Eigen::Index j = 0; j < out.cols(); ++j)
    for (Eigen::Index i = 0; i < out.rows(); ++i) out(i, j) = f[static_cast<std::size_t>(i)];
  return out;
}

Eigen::MatrixXd replicate(const Mask& msk, std::size_t m) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(msk.size()), static_cast<Eigen::Index>(m));
  for (Eigen::Index j = 0; j < out.cols(); ++j)
    for (Eigen::Index i = 0; i < out.rows(); ++i) out(i, j) = msk.observed(static_cast<std::size_t>(i));
  return out;
}

std::vector<RngStream> streams(std::size_t m, std::uint64_t seed) {
  std::vector<RngStream> s;
  for (std::size_t i = 0; i < m; ++i) s.push_back(RngStream(seed, 1).substream(i));
  return s;
}

}  // namespace

TEST_CASE("fully observed field is returned unchanged") {
  const auto sched = Schedule::build(1000, 1e-4, 0.02);
  int calls = 0;
  FnScore s([&](const ScoreQuery& q) {
    ++calls;
    return Eigen::MatrixXd::Zero(q.states.rows(), q.states.cols()).eval();
  });
  const Field f({0.5, -1.0, 2.0, 3.0}, Scale::Raw);
  RngStream rng(1, 1);
  CHECK(reverse_conditional_sample(f, Mask::ones(4), std::nullopt, sched, s, rng) == f);
  CHECK(calls == 0);
}

TEST_CASE("observed entries stay frozen at every step") {
  const auto g = GridSpec::build(3, -10, 10);
  const auto sched = Schedule::build(200, 1e-4, 0.02);
  RngStream rng(2, 1);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> x(9);
    for (auto& v : x) v = rng.normal() * 3;
    const Field f(x, Scale::Raw);
    const Mask m = sample_bernoulli_mask(g, 0.4, rng);
    const auto cond = gp_exact_conditional(g, GPParams{3, 1.5}, f, m);
    GaussianConditionalScore exact(cond, sched);
    FnScore spy([&](const ScoreQuery& q) {
      for (Eigen::Index j = 0; j < q.states.cols(); ++j)
        for (std::size_t i = 0; i < 9; ++i)
          if (m.observed(i)) REQUIRE(q.states(static_cast<Eigen::Index>(i), j) == x[i]);
      return exact.evaluate(q);
    });
    const Field out = reverse_conditional_sample(f, m, std::nullopt, sched, spy, rng);
    for (std::size_t i = 0; i < 9; ++i)
      if (m.observed(i)) CHECK(out[i] == x[i]);
  }
}

TEST_CASE("sampler contract violations") {
  const auto sched = Schedule::build(50, 1e-4, 0.02);
  const Field f({1, 2, 3, 4}, Scale::Raw);
  const Mask m(std::vector<std::uint8_t>{1, 0, 0, 0});
  RngStream rng(3, 1);

  FnScore leaky([](const ScoreQuery& q) { return Eigen::MatrixXd::Ones(q.states.rows(), q.states.cols()).eval(); });
  try {
    reverse_conditional_sample(f, m, std::nullopt, sched, leaky, rng);
    FAIL("expected a contract error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Contract);
  }

  FnScore nan([](const ScoreQuery& q) {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(q.states.rows(), q.states.cols());
    if (q.steps[0] == 17) out(2, 0) = NAN;
    return out;
  });
  try {
    reverse_conditional_sample(f, m, std::nullopt, sched, nan, rng);
    FAIL("expected a numerical error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Numerical);
    CHECK(std::string(e.what()).find("step 17") != std::string::npos);
  }

  FnScore wants_theta([](const ScoreQuery& q) { return Eigen::MatrixXd::Zero(q.states.rows(), q.states.cols()).eval(); },
                      true);
  CHECK_THROWS_AS(reverse_conditional_sample(f, m, std::nullopt, sched, wants_theta, rng), Error);
  CHECK_NOTHROW(reverse_conditional_sample(f, m, 3.0, sched, wants_theta, rng));
}

TEST_CASE("batched sampling is independent of the thread count") {
  const auto g = GridSpec::build(4, -10, 10);
  const auto sched = Schedule::build(100, 1e-4, 0.02);
  RngStream rng(4, 1);
  std::vector<double> x(16);
  for (auto& v : x) v = rng.normal();
  const Field f(x, Scale::Raw);
  const Mask m = sample_bernoulli_mask(g, 0.2, rng);
  GaussianConditionalScore score(gp_exact_conditional(g, GPParams{3, 1.5}, f, m), sched);
  const std::size_t cols = 150;
  const std::vector<double> th(cols, 0.0);
  auto run = [&](int threads) {
    auto s = streams(cols, 5);
    SamplerOptions o;
    o.threads = threads;
    o.chunk = 32;
    return reverse_conditional_sample_batch(replicate(f, cols), replicate(m, cols), th, sched, score, s, o);
  };
  const Eigen::MatrixXd a = run(1), b = run(3);
  CHECK(a == b);
}

TEST_CASE("suppressing the final noise removes only the last step's noise") {
  const auto g = GridSpec::build(2, -10, 10);
  const auto sched = Schedule::build(1000, 1e-4, 0.02);
  const Field f({0.3, 0, 0, 0}, Scale::Raw);
  const Mask m(std::vector<std::uint8_t>{1, 0, 0, 0});
  GaussianConditionalScore score(gp_exact_conditional(g, GPParams{3, 1.5}, f, m), sched);
  const std::size_t cols = 2000;
  const std::vector<double> th(cols, 0.0);
  auto run = [&](bool suppress) {
    auto s = streams(cols, 6);
    SamplerOptions o;
    o.suppress_final_noise = suppress;
    return reverse_conditional_sample_batch(replicate(f, cols), replicate(m, cols), th, sched, score, s, o);
  };
  const Eigen::MatrixXd noisy = run(false), quiet = run(true);
  CHECK(noisy.row(0) == quiet.row(0));
  const double sd = std::sqrt(sched.beta(1));
  for (Eigen::Index i = 1; i < 4; ++i) {
    const Eigen::ArrayXd d = (noisy.row(i) - quiet.row(i)).transpose().array();
    const double mu = d.mean(), v = (d - mu).square().mean();
    CHECK(std::abs(mu) < 4 * sd / std::sqrt(double(cols)));
    CHECK(std::abs(std::sqrt(v) / sd - 1) < 0.1);
  }
}

TEST_CASE("empty mask reduces to unconditional diffusion") {
  const auto g = GridSpec::build(2, -10, 10);
  const auto sched = Schedule::build(1000, 1e-4, 0.02);
  const GPParams p{3, 1.5};
  const Field zero(std::vector<double>(4, 0.0), Scale::Raw);
  const Mask none = Mask::zeros(4);
  GaussianConditionalScore score(gp_exact_conditional(g, p, zero, none), sched);
  const std::size_t cols = 4000;
  const std::vector<double> th(cols, 0.0);
  auto s = streams(cols, 7);
  const Eigen::MatrixXd x = reverse_conditional_sample_batch(replicate(zero, cols), replicate(none, cols), th, sched,
                                                             score, s, SamplerOptions{});
  const Eigen::MatrixXd k = gp_covariance(g, p);
  const Eigen::VectorXd mean = x.rowwise().mean();
  const Eigen::MatrixXd centered = x.colwise() - mean;
  const Eigen::MatrixXd cov = centered * centered.transpose() / (cols - 1.0);
  for (Eigen::Index i = 0; i < 4; ++i) CHECK(std::abs(mean(i)) < 4 * std::sqrt(1.5 / cols));
  CHECK((cov - k).norm() / k.norm() < 0.15);
}

TEST_CASE("loss forms and identities") {
  const auto sched = Schedule::build(1000, 1e-4, 0.02);
  RngStream rng(8, 1);
  const DiffusionBatch b = make_batch(16, 64, sched, rng);

  FnScore target([&](const ScoreQuery& q) {
    Eigen::MatrixXd s(q.states.rows(), q.states.cols());
    for (Eigen::Index j = 0; j < s.cols(); ++j) s.col(j) = -b.noise.col(j) / sched.sigma_bar(q.steps[j]);
    return s;
  });
  CHECK(dsm_loss(b, target, sched) < 1e-20);

  FnScore zero([](const ScoreQuery& q) { return Eigen::MatrixXd::Zero(q.states.rows(), q.states.cols()).eval(); });
  const auto per = dsm_loss_per_example(b, zero, sched);
  for (std::size_t j = 0; j < per.size(); ++j)
    CHECK(per[j] == doctest::Approx(b.noise.col(static_cast<Eigen::Index>(j)).squaredNorm()).epsilon(1e-12));

  FnScore noisy([&](const ScoreQuery& q) {
    Eigen::MatrixXd s(q.states.rows(), q.states.cols());
    for (Eigen::Index j = 0; j < s.cols(); ++j)
      for (Eigen::Index i = 0; i < s.rows(); ++i) s(i, j) = q.masks(i, j) != 0.0 ? 0.0 : std::sin(3.0 * i + q.states(i, j)) * 40.0;
    return s;
  });
  const auto a1 = dsm_loss_per_example(b, noisy, sched);
  const auto a2 = dsm_loss_noise_form(b, noisy, sched);
  for (std::size_t j = 0; j < a1.size(); ++j) CHECK(std::abs(a1[j] - a2[j]) <= 1e-12 * std::abs(a2[j]));

  // Permutation invariance and batch duplication.
  std::vector<std::size_t> order(b.size());
  for (std::size_t j = 0; j < order.size(); ++j) order[j] = order.size() - 1 - j;
  CHECK(dsm_loss(b.select(order), noisy, sched) == doctest::Approx(dsm_loss(b, noisy, sched)).epsilon(1e-14));
  DiffusionBatch twice = b;
  twice.append(b);
  CHECK(dsm_loss(twice, noisy, sched) == doctest::Approx(dsm_loss(b, noisy, sched)).epsilon(1e-14));
}

TEST_CASE("zero-score loss has expectation equal to the unobserved count") {
  const auto sched = Schedule::build(1000, 1e-4, 0.02);
  RngStream rng(9, 1);
  const std::size_t n = 16, cols = 5000;
  DiffusionBatch b;
  b.states = Eigen::MatrixXd::Zero(n, cols);
  b.masks = Eigen::MatrixXd::Zero(n, cols);
  b.noise.resize(n, cols);
  for (Eigen::Index i = 0; i < b.noise.size(); ++i) b.noise.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < 4; ++i) {
    b.masks.row(i).setOnes();
    b.noise.row(i).setZero();
  }
  b.steps.assign(cols, 500);
  b.thetas.assign(cols, 0.0);
  FnScore zero([](const ScoreQuery& q) { return Eigen::MatrixXd::Zero(q.states.rows(), q.states.cols()).eval(); });
  const double l = dsm_loss(b, zero, sched);
  // Each term is chi-square with 12 degrees of freedom.
  CHECK(std::abs(l - 12.0) < 3 * std::sqrt(24.0 / cols));
}
