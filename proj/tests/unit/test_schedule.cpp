#include <cmath>

#include "doctest.h"
#include "ncs/diffusion.hpp"
#include "ncs/error.hpp"
#include "ncs/schedule.hpp"

using namespace ncs;

TEST_CASE("linear schedule with 1000 steps") {
  const auto s = Schedule::build(1000, 1e-4, 0.02);
  CHECK(s.steps() == 1000);
  CHECK(s.beta(0) == 1e-4);
  CHECK(s.beta(1000) == 0.02);
  CHECK(s.alpha_bar(0) == 1.0);
  CHECK(s.sigma_bar(0) == 0.0);

  // Independent product over s = 1..t with beta_s = beta0 + (betaT - beta0) s / T.
  long double prod = 1.0L, logsum = 0.0L;
  for (int t = 1; t <= 1000; ++t) {
    const long double b = 1e-4L + (0.02L - 1e-4L) * t / 1000.0L;
    CHECK(s.beta(t) == doctest::Approx(static_cast<double>(b)).epsilon(1e-14));
    prod *= 1.0L - b;
    logsum += b;
    CHECK(s.alpha_bar(t) == doctest::Approx(static_cast<double>(prod)).epsilon(1e-12));
  }
  CHECK(s.alpha_bar(1000) < 1e-4);
  CHECK(std::abs(std::log(s.alpha_bar(1000)) + static_cast<double>(logsum)) < 0.01 * static_cast<double>(logsum));

  for (int t = 1; t <= 1000; ++t) {
    CHECK(s.beta(t) >= s.beta(t - 1));
    CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    CHECK(s.sigma_bar(t) == doctest::Approx(std::sqrt(1 - s.alpha_bar(t))));
    CHECK(s.weight(t) == doctest::Approx(1 - s.alpha_bar(t)));
  }
}

TEST_CASE("schedule validation and fingerprint") {
  CHECK_THROWS_AS(Schedule::build(0, 1e-4, 0.02), Error);
  CHECK_THROWS_AS(Schedule::build(10, 0.0, 0.02), Error);
  CHECK_THROWS_AS(Schedule::build(10, 0.03, 0.02), Error);
  CHECK_THROWS_AS(Schedule::build(10, 1e-4, 1.0), Error);
  const auto a = Schedule::build(1000, 1e-4, 0.02), b = Schedule::build(1000, 1e-4, 0.02);
  CHECK(a.fingerprint() == b.fingerprint());
  CHECK(a.fingerprint_hex().size() == 16);
  CHECK(a.fingerprint() != Schedule::build(999, 1e-4, 0.02).fingerprint());
  CHECK(a.fingerprint() != Schedule::build(1000, 2e-4, 0.02).fingerprint());
}

TEST_CASE("forward kernel") {
  const auto s = Schedule::build(1000, 1e-4, 0.02);
  RngStream rng(9, 9);
  Eigen::VectorXd x0 = Eigen::VectorXd::LinSpaced(5, -1, 1);
  CHECK_THROWS_AS(forward_transition_sample(x0, 0, s, rng), Error);

  const int t = 100, n = 100000;
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(1);
  double direct_sum = 0, direct_sq = 0, step_sum = 0, step_sq = 0;
  Eigen::VectorXd start(1);
  start << 2.0;
  double d2 = 0, d2sq = 0;
  for (int i = 0; i < n; ++i) {
    const double v = forward_transition_sample(zero, t, s, rng)(0);
    direct_sum += v;
    direct_sq += v * v;
    const double w = forward_transition_sample(start, t, s, rng)(0);
    d2 += w;
    d2sq += w * w;
    Eigen::VectorXd x = start;
    for (int k = 1; k <= t; ++k) x = forward_step(x, k, s, rng);
    step_sum += x(0);
    step_sq += x(0) * x(0);
  }
  const double var = s.sigma_bar(t) * s.sigma_bar(t);
  const double m0 = direct_sum / n, v0 = direct_sq / n - m0 * m0;
  CHECK(std::abs(m0) < 4 * std::sqrt(var / n));
  CHECK(std::abs(v0 - var) < 4 * var * std::sqrt(2.0 / n));

  // Direct kernel and composed single steps agree in mean and variance.
  const double md = d2 / n, vd = d2sq / n - md * md;
  const double ms = step_sum / n, vs = step_sq / n - ms * ms;
  const double se_mean = std::sqrt(2 * var / n), se_var = var * std::sqrt(4.0 / n);
  CHECK(std::abs(md - ms) < 3 * se_mean);
  CHECK(std::abs(vd - vs) < 3 * se_var);
  CHECK(std::abs(md - 2 * std::sqrt(s.alpha_bar(t))) < 4 * std::sqrt(var / n));
  CHECK_THROWS_AS(forward_step(start, 0, s, rng), Error);
}
