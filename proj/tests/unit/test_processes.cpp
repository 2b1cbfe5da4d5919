#include <cmath>

#include "doctest.h"
#include "ncs/error.hpp"
#include "ncs/linalg.hpp"
#include "ncs/processes.hpp"
#include "ncs/schedule.hpp"

using namespace ncs;

namespace {

struct Dense {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Conditioning through an explicit inverse of K_oo.
Dense brute_condition(const Eigen::MatrixXd& k, const std::vector<double>& x, const Mask& m) {
  const auto o = m.observed_indices(), u = m.unobserved_indices();
  const auto no = static_cast<Eigen::Index>(o.size()), nu = static_cast<Eigen::Index>(u.size());
  Eigen::MatrixXd koo(no, no), kuo(nu, no), kuu(nu, nu);
  Eigen::VectorXd xo(no);
  for (Eigen::Index a = 0; a < no; ++a) {
    xo(a) = x[o[a]];
    for (Eigen::Index b = 0; b < no; ++b) koo(a, b) = k(o[a], o[b]);
  }
  for (Eigen::Index a = 0; a < nu; ++a) {
    for (Eigen::Index b = 0; b < no; ++b) kuo(a, b) = k(u[a], o[b]);
    for (Eigen::Index b = 0; b < nu; ++b) kuu(a, b) = k(u[a], u[b]);
  }
  if (no == 0) return {Eigen::VectorXd::Zero(nu), kuu};
  const Eigen::MatrixXd inv = koo.inverse();
  return {kuo * inv * xo, kuu - kuo * inv * kuo.transpose()};
}

double log_density(const Eigen::VectorXd& x, const Eigen::VectorXd& mu, const Eigen::MatrixXd& cov) {
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  const Eigen::VectorXd r = llt.matrixL().solve(x - mu);
  double logdet = 0;
  for (Eigen::Index i = 0; i < cov.rows(); ++i) logdet += 2 * std::log(llt.matrixL()(i, i));
  return -0.5 * r.squaredNorm() - 0.5 * logdet;
}

// Gauss-Hermite-free quadrature of E[max(1, exp(Z - v/2))], Z ~ N(0, v).
double bivariate_zeta_quadrature(double v) {
  const int n = 200000;
  const double lo = -12.0, hi = 12.0, dz = (hi - lo) / n;
  double acc = 0;
  for (int i = 0; i <= n; ++i) {
    const double z = lo + i * dz;
    const double w = (i == 0 || i == n) ? 0.5 : 1.0;
    const double phi = std::exp(-0.5 * z * z) / std::sqrt(2 * M_PI);
    acc += w * phi * std::max(1.0, std::exp(std::sqrt(v) * z - v / 2));
  }
  return acc * dz;
}

}  // namespace

TEST_CASE("exponential covariance") {
  const auto g = GridSpec::build(4, -10, 10);
  const GPParams p{3.0, 1.5};
  const auto k = gp_covariance(g, p);
  for (Eigen::Index i = 0; i < k.rows(); ++i) {
    CHECK(k(i, i) == 1.5);
    for (Eigen::Index j = 0; j < k.cols(); ++j) {
      CHECK(k(i, j) == k(j, i));
      CHECK(k(i, j) == doctest::Approx(1.5 * std::exp(-g.distance(i, j) / 3.0)).epsilon(1e-15));
    }
  }
  const auto g2 = GridSpec::build(2, 0, 3);
  CHECK(gp_covariance(g2, p)(0, 1) == doctest::Approx(0.551819).epsilon(1e-6));
  const auto flat = gp_covariance(g, GPParams{1e12, 1.5});
  CHECK(flat.minCoeff() == doctest::Approx(1.5).epsilon(1e-9));
  CHECK_THROWS_AS(gp_covariance(g, GPParams{0.0, 1.5}), Error);
  CHECK_THROWS_AS(gp_covariance(g, GPParams{3.0, -1.0}), Error);
}

TEST_CASE("covariance factorizes on the 32x32 grid") {
  const auto g = GridSpec::build(32, -10, 10);
  for (double l : {0.5, 3.0, 5.5}) {
    double jitter = -1;
    cholesky_with_jitter(gp_covariance(g, GPParams{l, 1.5}), "test", &jitter);
    CHECK(jitter <= 1e-8);
  }
}

TEST_CASE("gaussian simulator moments") {
  const auto g = GridSpec::build(4, -10, 10);
  const GPParams p{3.0, 1.5};
  GaussianSimulator sim(g, p);
  RngStream rng(11, 1);
  const int m = 10000;
  const Eigen::MatrixXd x = sim.sample_columns(m, rng);
  const double mean = x.row(5).mean();
  CHECK(std::abs(mean) < 4 * std::sqrt(1.5 / m));
  const double var = (x.row(5).array() - mean).square().sum() / (m - 1);
  CHECK(std::abs(var - 1.5) < 4 * 1.5 * std::sqrt(2.0 / m));
  const double c = ((x.row(5).array() - x.row(5).mean()) * (x.row(6).array() - x.row(6).mean())).sum() / (m - 1);
  const double k56 = gp_covariance(g, p)(5, 6);
  const double se = std::sqrt((1.5 * 1.5 + k56 * k56) / m);
  CHECK(std::abs(c - k56) < 4 * se);
}

TEST_CASE("exact conditioning matches brute force for every mask") {
  const GPParams p{3.0, 1.5};
  RngStream rng(12, 1);
  for (int side : {2, 3}) {
    const auto g = GridSpec::build(side, -10, 10);
    const auto k = gp_covariance(g, p);
    const std::size_t n = g.size();
    std::vector<double> x(n);
    for (auto& v : x) v = rng.normal();
    const Field f(x, Scale::Raw);
    for (std::size_t code = 0; code < (std::size_t{1} << n); ++code) {
      std::vector<std::uint8_t> bits(n);
      for (std::size_t i = 0; i < n; ++i) bits[i] = (code >> i) & 1;
      const Mask m(bits);
      const auto c = gp_exact_conditional(g, p, f, m);
      const auto b = brute_condition(k, x, m);
      REQUIRE(c.mean.size() == b.mean.size());
      CHECK(c.unobserved == m.unobserved_indices());
      if (b.mean.size() == 0) continue;
      CHECK((c.mean - b.mean).cwiseAbs().maxCoeff() < 1e-10);
      CHECK((c.covariance - b.cov).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("conditioning edge cases") {
  const auto g = GridSpec::build(3, -10, 10);
  const GPParams p{3.0, 1.5};
  const Field f(std::vector<double>(9, 0.7), Scale::Raw);
  const auto none = gp_exact_conditional(g, p, f, Mask::zeros(9));
  CHECK(none.mean.cwiseAbs().maxCoeff() == 0.0);
  CHECK((none.covariance - gp_covariance(g, p)).cwiseAbs().maxCoeff() < 1e-14);

  // A prediction location converging on an observed one loses its variance.
  std::vector<double> prev_var;
  for (double l : {1.0, 10.0, 100.0, 1e4}) {
    const auto c = gp_exact_conditional(g, GPParams{l, 1.5}, f, Mask(std::vector<std::uint8_t>{1, 0, 0, 0, 0, 0, 0, 0, 0}));
    prev_var.push_back(c.covariance(0, 0));
  }
  for (std::size_t i = 1; i < prev_var.size(); ++i) CHECK(prev_var[i] < prev_var[i - 1]);
  CHECK(prev_var.back() < 1e-2);
}

TEST_CASE("perturbed score matches finite differences of the log-density") {
  const auto g = GridSpec::build(3, -10, 10);
  const auto sched = Schedule::build(1000, 1e-4, 0.02);
  RngStream rng(13, 1);
  for (int trial = 0; trial < 6; ++trial) {
    std::vector<double> x(9);
    for (auto& v : x) v = rng.normal();
    std::vector<std::uint8_t> bits(9, 0);
    bits[rng.index(9)] = 1;
    const auto c = gp_exact_conditional(g, GPParams{rng.uniform(1, 5), 1.5}, Field(x, Scale::Raw), Mask(bits));
    REQUIRE(c.mean.size() == 8);
    const int t = static_cast<int>(rng.integer(1, 1000));
    const double ab = sched.alpha_bar(t);
    const Eigen::VectorXd mu = std::sqrt(ab) * c.mean;
    const Eigen::MatrixXd cov = ab * c.covariance + (1 - ab) * Eigen::MatrixXd::Identity(8, 8);
    Eigen::VectorXd xt(8);
    for (auto& v : xt) v = rng.normal();
    const Eigen::VectorXd s = gp_perturbed_score(xt, t, sched, c);
    const double h = 1e-5;
    for (Eigen::Index i = 0; i < 8; ++i) {
      Eigen::VectorXd a = xt, b = xt;
      a(i) += h;
      b(i) -= h;
      const double fd = (log_density(a, mu, cov) - log_density(b, mu, cov)) / (2 * h);
      CHECK(std::abs(fd - s(i)) <= 1e-6 * std::max(1.0, std::abs(s(i))));
    }
    CHECK(gp_perturbed_score(mu, t, sched, c).cwiseAbs().maxCoeff() < 1e-12);

    // The batched wrapper agrees with the direct formula.
    GaussianConditionalScore wrapped(c, sched);
    Eigen::MatrixXd states(9, 1), masks(9, 1);
    for (int i = 0; i < 9; ++i) {
      states(i, 0) = x[static_cast<std::size_t>(i)];
      masks(i, 0) = bits[static_cast<std::size_t>(i)];
    }
    for (std::size_t a = 0; a < 8; ++a) states(static_cast<Eigen::Index>(c.unobserved[a]), 0) = xt(static_cast<Eigen::Index>(a));
    const double th = 0;
    const int st = t;
    const Eigen::MatrixXd w = wrapped.evaluate({states, masks, {&th, 1}, {&st, 1}});
    for (std::size_t a = 0; a < 8; ++a)
      CHECK(w(static_cast<Eigen::Index>(c.unobserved[a]), 0) == doctest::Approx(s(static_cast<Eigen::Index>(a))).epsilon(1e-10));
    for (int i = 0; i < 9; ++i)
      if (bits[static_cast<std::size_t>(i)]) CHECK(w(i, 0) == 0.0);
  }
}

TEST_CASE("perturbed score near the reference distribution") {
  const auto g = GridSpec::build(2, -10, 10);
  const auto sched = Schedule::build(1000, 1e-4, 0.02);
  const auto c = gp_exact_conditional(g, GPParams{3, 1.5}, Field({1, 2, 3, 4}, Scale::Raw),
                                      Mask(std::vector<std::uint8_t>{1, 0, 0, 0}));
  const Eigen::VectorXd x = Eigen::Vector3d(0.3, -1.2, 2.0);
  const Eigen::VectorXd s = gp_perturbed_score(x, 1000, sched, c);
  CHECK((s + x).cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("brown-resnick closed form agrees with direct bivariate integration") {
  const BRParams p{3.0, 1.5};
  for (double h : {0.5, 1.0, 3.0, 6.0, 12.0}) {
    // With one site at the anchor, W there is 1 and the other site is
    // lognormal with log-variance equal to the variogram 2 gamma(h).
    const double v = 2 * br_semivariogram(h, p);
    CHECK(br_extremal_coefficient(h, p) == doctest::Approx(bivariate_zeta_quadrature(v)).epsilon(1e-6));
  }
  CHECK(br_extremal_coefficient(0.0, p) == 1.0);
  CHECK(br_semivariogram(3.0, p) == doctest::Approx(1.0));
}

TEST_CASE("brown-resnick closed form away from the anchor") {
  // Monte Carlo of E max(W(s1), W(s2)) for two sites off the anchor.
  const BRParams p{3.0, 1.5};
  const double s1 = 1.0, s2 = 3.0;
  const double g1 = br_semivariogram(s1, p), g2 = br_semivariogram(s2, p), g12 = br_semivariogram(s2 - s1, p);
  Eigen::Matrix2d c;
  c << 2 * g1, g1 + g2 - g12, g1 + g2 - g12, 2 * g2;
  const Eigen::Matrix2d l = c.llt().matrixL();
  RngStream rng(14, 1);
  const int m = 400000;
  double acc = 0, acc2 = 0;
  for (int i = 0; i < m; ++i) {
    const Eigen::Vector2d e = l * Eigen::Vector2d(rng.normal(), rng.normal());
    const double v = std::max(std::exp(e(0) - g1), std::exp(e(1) - g2));
    acc += v;
    acc2 += v * v;
  }
  const double mean = acc / m, se = std::sqrt((acc2 / m - mean * mean) / m);
  CHECK(std::abs(mean - br_extremal_coefficient(s2 - s1, p)) < 4 * se);
}

TEST_CASE("brown-resnick simulator") {
  const auto g = GridSpec::build(4, -10, 10);
  const BRParams p{3.0, 1.5};
  BrownResnickSimulator sim(g, p);
  RngStream rng(15, 1);
  const int m = 4000;
  std::size_t below = 0, total = 0;
  for (int i = 0; i < m; ++i) {
    const auto s = sim.sample(rng);
    CHECK_FALSE(s.truncated);
    CHECK(s.field.scale() == Scale::Frechet);
    for (std::size_t k = 0; k < s.field.size(); k += 5) {
      below += s.field[k] <= 1.0;
      ++total;
    }
  }
  CHECK(std::abs(below / double(total) - std::exp(-1.0)) < 0.015);

  RngStream a(16, 2), b(16, 2);
  CHECK(sim.sample(a).field == sim.sample(b).field);
}

TEST_CASE("more spectral points never lower the field") {
  const auto g = GridSpec::build(4, -10, 10);
  BrownResnickSimulator sim(g, BRParams{3.0, 1.5});
  for (int seed = 0; seed < 20; ++seed) {
    Field prev;
    for (std::size_t points : {1, 4, 16, 64, 256, 5'000'000}) {
      RngStream rng(17, static_cast<std::uint64_t>(seed));
      const auto s = sim.sample(rng, StoppingConfig{0.0, points});
      if (prev.size())
        for (std::size_t i = 0; i < prev.size(); ++i) CHECK(s.field[i] >= prev[i]);
      prev = s.field;
    }
  }
}

TEST_CASE("frechet and gumbel scales") {
  const Field f({1.0, std::exp(1.0), 2.5}, Scale::Frechet);
  const Field gmb = frechet_to_gumbel(f);
  CHECK(gmb.scale() == Scale::Gumbel);
  CHECK(gmb[0] == 0.0);
  CHECK(gmb[1] == doctest::Approx(1.0));
  CHECK(gumbel_to_frechet(gmb)[2] == doctest::Approx(2.5).epsilon(1e-15));

  RngStream rng(18, 1);
  std::vector<double> v(20001);
  for (auto& x : v) x = 1.0 / rng.exponential();
  const Field g2 = frechet_to_gumbel(Field(v, Scale::Frechet));
  std::vector<double> w = g2.values();
  std::nth_element(w.begin(), w.begin() + 10000, w.end());
  CHECK(std::abs(w[10000] + std::log(std::log(2.0))) < 0.03);
}
