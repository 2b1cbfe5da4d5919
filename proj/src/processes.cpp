#include "ncs/processes.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <string>

#include "ncs/error.hpp"
#include "ncs/linalg.hpp"

namespace ncs {

// ---------------------------------------------------------------------------
// Gaussian process

void GPParams::validate() const {
  if (!(length_scale > 0.0) || !std::isfinite(length_scale))
    throw invalid_argument("GP length scale must be positive");
  if (!(variance > 0.0) || !std::isfinite(variance)) throw invalid_argument("GP variance must be positive");
}

Eigen::MatrixXd gp_covariance(const GridSpec& g, const GPParams& p) {
  p.validate();
  const auto n = static_cast<Eigen::Index>(g.size());
  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    k(i, i) = p.variance;
    for (Eigen::Index j = 0; j < i; ++j) {
      const double v = p.variance * std::exp(-g.distance(i, j) / p.length_scale);
      k(i, j) = v;
      k(j, i) = v;
    }
  }
  return k;
}

GaussianSimulator::GaussianSimulator(const GridSpec& g, const GPParams& p)
    : chol_(cholesky_with_jitter(gp_covariance(g, p), "GP covariance")) {}

Eigen::MatrixXd GaussianSimulator::sample_columns(std::size_t count, RngStream& rng) const {
  Eigen::MatrixXd z(chol_.rows(), static_cast<Eigen::Index>(count));
  for (Eigen::Index c = 0; c < z.cols(); ++c)
    for (Eigen::Index r = 0; r < z.rows(); ++r) z(r, c) = rng.normal();
  return chol_.triangularView<Eigen::Lower>() * z;
}

Field GaussianSimulator::sample(RngStream& rng) const {
  Eigen::VectorXd x = sample_columns(1, rng).col(0);
  return Field(std::vector<double>(x.data(), x.data() + x.size()), Scale::Raw);
}

Field gp_unconditional(const GridSpec& g, const GPParams& p, RngStream& rng) {
  return GaussianSimulator(g, p).sample(rng);
}

ExactConditional gp_exact_conditional(const Eigen::MatrixXd& k, const Field& obs, const Mask& mask) {
  if (obs.size() != mask.size() || static_cast<Eigen::Index>(mask.size()) != k.rows())
    throw invalid_argument("exact conditional: field, mask and covariance sizes differ");
  const auto o = mask.observed_indices();
  const auto u = mask.unobserved_indices();
  const auto no = static_cast<Eigen::Index>(o.size());
  const auto nu = static_cast<Eigen::Index>(u.size());

  ExactConditional c;
  c.mask = mask;
  c.unobserved = u;
  Eigen::MatrixXd kuu(nu, nu);
  for (Eigen::Index a = 0; a < nu; ++a)
    for (Eigen::Index b = 0; b < nu; ++b) kuu(a, b) = k(u[a], u[b]);
  if (no == 0) {
    c.mean = Eigen::VectorXd::Zero(nu);
    c.covariance = kuu;
    return c;
  }

  Eigen::MatrixXd koo(no, no);
  Eigen::MatrixXd kuo(nu, no);
  Eigen::VectorXd xo(no);
  for (Eigen::Index a = 0; a < no; ++a) {
    xo(a) = obs[o[a]];
    for (Eigen::Index b = 0; b < no; ++b) koo(a, b) = k(o[a], o[b]);
  }
  for (Eigen::Index a = 0; a < nu; ++a)
    for (Eigen::Index b = 0; b < no; ++b) kuo(a, b) = k(u[a], o[b]);

  double jitter = 0.0;
  const Eigen::MatrixXd l = cholesky_with_jitter(koo, "observed covariance block", &jitter);
  // A = L^{-1} K_ou, so K_uo K_oo^{-1} K_ou = A^T A.
  const Eigen::MatrixXd a = l.triangularView<Eigen::Lower>().solve(kuo.transpose());
  const Eigen::VectorXd w = l.triangularView<Eigen::Lower>().solve(xo);
  c.mean = a.transpose() * w;
  c.covariance = kuu - a.transpose() * a;
  c.covariance = 0.5 * (c.covariance + c.covariance.transpose()).eval();
  return c;
}

ExactConditional gp_exact_conditional(const GridSpec& g, const GPParams& p, const Field& obs,
                                      const Mask& mask) {
  return gp_exact_conditional(gp_covariance(g, p), obs, mask);
}

ConditionalNormalSampler::ConditionalNormalSampler(const ExactConditional& c) : cond_(c) {
  const auto eig = symmetric_eigen(c.covariance);
  root_ = eig.vectors * eig.values.cwiseSqrt().asDiagonal();
}

Eigen::VectorXd ConditionalNormalSampler::sample(RngStream& rng) const {
  Eigen::VectorXd z(root_.cols());
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = rng.normal();
  return cond_.mean + root_ * z;
}

namespace {

void check_step(int t, const Schedule& sched) {
  if (t < 1 || t > sched.steps())
    throw invalid_argument("diffusion step " + std::to_string(t) + " outside [1, T]");
}

}  // namespace

Eigen::VectorXd gp_perturbed_score(const Eigen::VectorXd& x, int t, const Schedule& sched,
                                   const ExactConditional& cond) {
  check_step(t, sched);
  if (x.size() != cond.mean.size()) throw invalid_argument("perturbed score: dimension mismatch");
  const double ab = sched.alpha_bar(t);
  Eigen::MatrixXd a = ab * cond.covariance;
  a.diagonal().array() += 1.0 - ab;
  Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() != Eigen::Success) throw numerical_error("perturbed covariance is not positive definite");
  return -llt.solve(x - std::sqrt(ab) * cond.mean);
}

GaussianConditionalScore::GaussianConditionalScore(ExactConditional cond, const Schedule& sched)
    : cond_(std::move(cond)) {
  const auto eig = symmetric_eigen(cond_.covariance);
  vectors_ = eig.vectors;
  values_ = eig.values;
  alpha_bar_.resize(sched.steps() + 1);
  for (int t = 0; t <= sched.steps(); ++t) alpha_bar_[t] = sched.alpha_bar(t);
}

Eigen::MatrixXd GaussianConditionalScore::evaluate(const ScoreQuery& q) const {
  const auto n = static_cast<Eigen::Index>(cond_.mask.size());
  const auto batch = q.states.cols();
  if (q.states.rows() != n || q.masks.rows() != n || q.masks.cols() != batch ||
      static_cast<Eigen::Index>(q.steps.size()) != batch)
    throw invalid_argument("Gaussian score: query shape mismatch");
  for (Eigen::Index b = 0; b < batch; ++b)
    for (Eigen::Index i = 0; i < n; ++i)
      if ((q.masks(i, b) != 0.0) != cond_.mask.observed(i))
        throw invalid_argument("Gaussian score: query mask differs from the conditioning mask");

  const auto d = static_cast<Eigen::Index>(cond_.unobserved.size());
  Eigen::MatrixXd r(d, batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const int t = q.steps[b];
    if (t < 1 || t >= static_cast<int>(alpha_bar_.size()))
      throw invalid_argument("Gaussian score: step outside [1, T]");
    const double root_ab = std::sqrt(alpha_bar_[t]);
    for (Eigen::Index a = 0; a < d; ++a) r(a, b) = q.states(cond_.unobserved[a], b) - root_ab * cond_.mean(a);
  }
  Eigen::MatrixXd p = vectors_.transpose() * r;
  for (Eigen::Index b = 0; b < batch; ++b) {
    const double ab = alpha_bar_[q.steps[b]];
    for (Eigen::Index k = 0; k < d; ++k) p(k, b) /= ab * values_(k) + (1.0 - ab);
  }
  const Eigen::MatrixXd s = -(vectors_ * p);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, batch);
  for (Eigen::Index b = 0; b < batch; ++b)
    for (Eigen::Index a = 0; a < d; ++a) out(cond_.unobserved[a], b) = s(a, b);
  return out;
}

// ---------------------------------------------------------------------------
// Brown-Resnick

void BRParams::validate() const {
  if (!(range > 0.0) || !std::isfinite(range)) throw invalid_argument("Brown-Resnick range must be positive");
  if (!(smoothness > 0.0 && smoothness <= 2.0))
    throw invalid_argument("Brown-Resnick smoothness must lie in (0, 2]");
}

double br_semivariogram(double h, const BRParams& p) { return std::pow(std::abs(h) / p.range, p.smoothness); }

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double br_extremal_coefficient(double h, const BRParams& p) {
  return 2.0 * normal_cdf(std::sqrt(2.0 * br_semivariogram(h, p)) / 2.0);
}

BrownResnickSimulator::BrownResnickSimulator(const GridSpec& g, const BRParams& p) : n_(g.size()) {
  p.validate();
  const auto n = static_cast<Eigen::Index>(n_);
  gamma_.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) gamma_(i, j) = br_semivariogram(g.distance(i, j), p);
  if (n > 1) {
    // Field anchored at index 0 (the lower corner): Cov = g(s) + g(s') - g(s - s').
    Eigen::MatrixXd c(n - 1, n - 1);
    for (Eigen::Index i = 1; i < n; ++i)
      for (Eigen::Index j = 1; j < n; ++j) c(i - 1, j - 1) = gamma_(i, 0) + gamma_(j, 0) - gamma_(i, j);
    chol_ = cholesky_with_jitter(c, "Brown-Resnick increment covariance");
  }
}

// Fills `log_w` (n x count) with log normalized spectral functions
//   log W(s) = Y(s) - log(mean_j exp Y(s_j)),  Y(s) = e(s) - e(s_T) - gamma(s - s_T),
// where T is a uniform grid index. Each W satisfies max_s W(s) <= n.
void BrownResnickSimulator::spectral_block(RngStream& rng, std::size_t count, Eigen::MatrixXd& log_w) const {
  const auto n = static_cast<Eigen::Index>(n_);
  const auto cnt = static_cast<Eigen::Index>(count);
  std::vector<Eigen::Index> anchor(count);
  for (auto& a : anchor) a = static_cast<Eigen::Index>(rng.index(n_));
  Eigen::MatrixXd eps = Eigen::MatrixXd::Zero(n, cnt);
  if (n > 1) {
    Eigen::MatrixXd z(n - 1, cnt);
    for (Eigen::Index c = 0; c < cnt; ++c)
      for (Eigen::Index r = 0; r < n - 1; ++r) z(r, c) = rng.normal();
    eps.bottomRows(n - 1).noalias() = chol_.triangularView<Eigen::Lower>() * z;
  }
  log_w.resize(n, cnt);
  for (Eigen::Index c = 0; c < cnt; ++c) {
    const Eigen::Index t = anchor[c];
    double top = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      const double y = eps(j, c) - eps(t, c) - gamma_(j, t);
      log_w(j, c) = y;
      top = std::max(top, y);
    }
    double sum = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) sum += std::exp(log_w(j, c) - top);
    const double shift = top + std::log(sum / static_cast<double>(n));
    log_w.col(c).array() -= shift;
  }
}

BRSample BrownResnickSimulator::sample(RngStream& rng, const StoppingConfig& stop) const {
  constexpr std::size_t kBlock = 16;
  const auto n = static_cast<Eigen::Index>(n_);
  const double bound = stop.bound > 0.0 ? stop.bound : static_cast<double>(n_);
  Eigen::VectorXd z = Eigen::VectorXd::Zero(n);
  double arrival = 0.0;
  BRSample out;
  Eigen::MatrixXd log_w;
  std::array<double, kBlock> gaps{};
  bool done = false;
  while (!done) {
    for (auto& e : gaps) e = rng.exponential();
    spectral_block(rng, kBlock, log_w);
    for (std::size_t k = 0; k < kBlock; ++k) {
      arrival += gaps[k];
      const double eta = 1.0 / arrival;
      if (eta * bound < z.minCoeff()) {
        done = true;
        break;
      }
      if (out.points == stop.max_points) {
        out.truncated = true;
        done = true;
        break;
      }
      const double log_eta = std::log(eta);
      for (Eigen::Index j = 0; j < n; ++j) {
        const double v = std::exp(log_eta + log_w(j, static_cast<Eigen::Index>(k)));
        if (v > z(j)) z(j) = v;
      }
      ++out.points;
    }
  }
  if (!(z.minCoeff() > 0.0)) throw numerical_error("Brown-Resnick simulation produced a nonpositive value");
  out.field = Field(std::vector<double>(z.data(), z.data() + n), Scale::Frechet);
  return out;
}

double BrownResnickSimulator::calibrate_bound(RngStream& rng, std::size_t draws, double quantile,
                                              double safety) const {
  if (draws == 0 || !(quantile > 0.0 && quantile < 1.0)) throw invalid_argument("invalid calibration settings");
  std::vector<double> maxima;
  maxima.reserve(draws);
  Eigen::MatrixXd log_w;
  while (maxima.size() < draws) {
    const std::size_t cnt = std::min<std::size_t>(64, draws - maxima.size());
    spectral_block(rng, cnt, log_w);
    for (Eigen::Index c = 0; c < log_w.cols(); ++c) maxima.push_back(std::exp(log_w.col(c).maxCoeff()));
  }
  const auto pos = static_cast<std::size_t>(std::floor(quantile * static_cast<double>(draws - 1)));
  std::nth_element(maxima.begin(), maxima.begin() + static_cast<std::ptrdiff_t>(pos), maxima.end());
  return std::min(maxima[pos] * safety, static_cast<double>(n_));
}

BRSample br_unconditional(const GridSpec& g, const BRParams& p, RngStream& rng, const StoppingConfig& stop) {
  return BrownResnickSimulator(g, p).sample(rng, stop);
}

Field frechet_to_gumbel(const Field& f) {
  if (f.scale() == Scale::Gumbel) throw invalid_argument("field is already on the Gumbel scale");
  std::vector<double> v(f.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!(f[i] > 0.0)) throw invalid_argument("Frechet-to-Gumbel transform needs positive values");
    v[i] = std::log(f[i]);
  }
  return Field(std::move(v), Scale::Gumbel);
}

Field gumbel_to_frechet(const Field& f) {
  std::vector<double> v(f.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(f[i]);
  return Field(std::move(v), Scale::Frechet);
}

}  // namespace ncs
