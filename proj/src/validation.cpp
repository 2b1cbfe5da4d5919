#include "ncs/validation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "ncs/error.hpp"
#include "ncs/linalg.hpp"
#include "ncs/parallel.hpp"

namespace ncs {

namespace {

using Index = Eigen::Index;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

bool same_mask(const Eigen::MatrixXd& masks, Index a, Index b) { return (masks.col(a).array() == masks.col(b).array()).all(); }

double sample_sd(std::span<const double> v) {
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / (n - 1.0));
}

}  // namespace

const char* to_string(SampleSource s) { return s == SampleSource::NCS ? "ncs" : "exact_gaussian"; }

ExactGaussianSampler::ExactGaussianSampler(const GridSpec& g, const GPParams& p) : grid_(g), cov_(gp_covariance(g, p)) {}

Eigen::MatrixXd ExactGaussianSampler::complete(const Eigen::MatrixXd& observations, const Eigen::MatrixXd& masks,
                                               std::span<const double>, const RngStream& rng, std::uint64_t first,
                                               int threads) const {
  const Index n = cov_.rows();
  if (observations.rows() != n || masks.rows() != n || masks.cols() != observations.cols())
    throw invalid_argument("exact sampler: shape mismatch");
  const Eigen::MatrixXd chol = cholesky_with_jitter(cov_, "grid covariance");
  Eigen::MatrixXd out = observations;
  const Index total = observations.cols();
  Index start = 0;
  while (start < total) {
    Index end = start + 1;
    while (end < total && same_mask(masks, start, end)) ++end;
    std::vector<Index> obs, free;
    for (Index i = 0; i < n; ++i) (masks(i, start) == 1.0 ? obs : free).push_back(i);
    // Matheron update: x_u = z_u + K_uo K_oo^{-1} (x_o - z_o) with z ~ N(0, K)
    Eigen::MatrixXd w(static_cast<Index>(free.size()), static_cast<Index>(obs.size()));
    if (!obs.empty() && !free.empty()) {
      Eigen::MatrixXd koo(obs.size(), obs.size()), kuo(free.size(), obs.size());
      for (std::size_t a = 0; a < obs.size(); ++a) {
        for (std::size_t b = 0; b < obs.size(); ++b) koo(a, b) = cov_(obs[a], obs[b]);
        for (std::size_t u = 0; u < free.size(); ++u) kuo(u, a) = cov_(free[u], obs[a]);
      }
      const Eigen::MatrixXd l = cholesky_with_jitter(koo, "observed covariance block");
      const Eigen::MatrixXd tmp = l.triangularView<Eigen::Lower>().solve(kuo.transpose());
      w = l.transpose().triangularView<Eigen::Upper>().solve(tmp).transpose();
    }
    if (!free.empty())
      parallel_for(static_cast<std::size_t>(end - start), threads, [&](std::size_t k) {
        const Index c = start + static_cast<Index>(k);
        RngStream r = rng.substream(first + static_cast<std::uint64_t>(c));
        Eigen::VectorXd e(n);
        for (Index i = 0; i < n; ++i) e[i] = r.normal();
        const Eigen::VectorXd z = chol.triangularView<Eigen::Lower>() * e;
        Eigen::VectorXd resid(static_cast<Index>(obs.size()));
        for (std::size_t a = 0; a < obs.size(); ++a) resid[a] = observations(obs[a], c) - z[obs[a]];
        const Eigen::VectorXd adj = obs.empty() ? Eigen::VectorXd::Zero(free.size()) : Eigen::VectorXd(w * resid);
        for (std::size_t u = 0; u < free.size(); ++u) out(free[u], c) = z[free[u]] + adj[u];
      });
    start = end;
  }
  return out;
}

Eigen::MatrixXd DiffusionSampler::complete(const Eigen::MatrixXd& observations, const Eigen::MatrixXd& masks,
                                           std::span<const double> thetas, const RngStream& rng, std::uint64_t first,
                                           int threads) const {
  std::vector<RngStream> streams;
  streams.reserve(static_cast<std::size_t>(observations.cols()));
  for (Index c = 0; c < observations.cols(); ++c) streams.push_back(rng.substream(first + static_cast<std::uint64_t>(c)));
  SamplerOptions opts = opts_;
  opts.threads = threads;
  return reverse_conditional_sample_batch(observations, masks, thetas, sched_, score_, streams, opts);
}

Mask MaskLaw::sample(const GridSpec& g, RngStream& rng) const {
  return kind == Kind::Bernoulli ? sample_bernoulli_mask(g, rho, rng) : sample_fixed_count_mask(g, k, rng);
}

std::string MaskLaw::describe() const {
  if (kind == Kind::FixedCount) return "k=" + std::to_string(k);
  char buf[64];
  std::snprintf(buf, sizeof buf, "rho=%g", rho);
  return buf;
}

CondEvalSet build_cond_eval(const ConditionalSampler& sampler, const Field& reference, const Mask& mask, double theta,
                            std::size_t m, const RngStream& rng, int threads) {
  if (m == 0) throw invalid_argument("conditional evaluation set needs m >= 1");
  if (reference.size() != mask.size()) throw invalid_argument("reference and mask sizes differ");
  const auto n = static_cast<Index>(reference.size());
  Eigen::VectorXd obs(n), mcol(n);
  for (Index i = 0; i < n; ++i) {
    const bool o = mask.observed(static_cast<std::size_t>(i));
    obs[i] = o ? reference[static_cast<std::size_t>(i)] : 0.0;
    mcol[i] = o ? 1.0 : 0.0;
  }
  const auto cols = static_cast<Index>(m);
  const Eigen::MatrixXd observations = obs.replicate(1, cols);
  const Eigen::MatrixXd masks = mcol.replicate(1, cols);
  const std::vector<double> thetas(m, theta);
  Eigen::MatrixXd full;
  try {
    full = sampler.complete(observations, masks, thetas, rng.substream(1), 0, threads);
  } catch (const Error& e) {
    throw Error(e.code(), std::string("conditional evaluation sampling failed: ") + e.what());
  }
  CondEvalSet out;
  out.reference = reference;
  out.mask = mask;
  out.theta = theta;
  out.source = sampler.source();
  const auto free = mask.unobserved_indices();
  out.completions.resize(static_cast<Index>(free.size()), cols);
  for (std::size_t r = 0; r < free.size(); ++r) out.completions.row(static_cast<Index>(r)) = full.row(static_cast<Index>(free[r]));
  return out;
}

CondEvalSet build_cond_eval(const ConditionalSampler& sampler, const ProcessSimulator& sim, const MaskLaw& law,
                            std::size_t m, const RngStream& rng, int threads) {
  RngStream ref = rng.substream(0);
  const Field reference = sim.sample(ref);
  const Mask mask = law.sample(sim.grid(), ref);
  return build_cond_eval(sampler, reference, mask, sim.spec().theta1(), m, rng, threads);
}

UncondEvalSet build_uncond_eval(const ConditionalSampler& sampler, const ProcessSimulator& sim, const MaskLaw& law,
                                std::size_t m, const RngStream& rng, int threads) {
  if (m == 0) throw invalid_argument("unconditional evaluation set needs m >= 1");
  const auto n = static_cast<Index>(sim.grid().size());
  const auto cols = static_cast<Index>(m);
  UncondEvalSet out;
  out.theta = sim.spec().theta1();
  out.law = law;
  out.source = sampler.source();
  Eigen::MatrixXd obs(n, cols);
  out.masks.resize(n, cols);
  const RngStream fields = rng.substream(1);
  parallel_for(m, threads, [&](std::size_t i) {
    RngStream r = fields.substream(i);
    const Field x0 = sim.sample(r);
    const Mask mask = law.sample(sim.grid(), r);
    const auto c = static_cast<Index>(i);
    for (Index k = 0; k < n; ++k) {
      const bool o = mask.observed(static_cast<std::size_t>(k));
      obs(k, c) = o ? x0[static_cast<std::size_t>(k)] : 0.0;
      out.masks(k, c) = o ? 1.0 : 0.0;
    }
  });
  const std::vector<double> thetas(m, out.theta);
  try {
    out.merged = sampler.complete(obs, out.masks, thetas, rng.substream(2), 0, threads);
  } catch (const Error& e) {
    throw Error(e.code(), std::string("unconditional evaluation sampling failed: ") + e.what());
  }
  out.truth = sim.sample_columns(m, rng.substream(3), 0, threads);
  return out;
}

double DistanceBins::resolved_max(const GridSpec& g) const {
  if (max_distance > 0.0) return max_distance;
  return 0.5 * std::sqrt(2.0) * (g.upper() - g.lower());
}

namespace {

struct BinIndex {
  std::vector<int> bin_of_pair;  // -1 when outside the binned range
  double width = 0.0;
};

template <class F>
void for_each_pair(std::size_t n, F&& f) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) f(i, j);
}

int bin_of(double d, double width, int count) {
  if (d <= 0.0) return -1;
  int b = static_cast<int>(std::floor(d / width));
  if (b == count && d <= width * count * (1.0 + 1e-12)) b = count - 1;
  return b < count ? b : -1;
}

ChiTable finish_table(const GridSpec& g, const DistanceBins& bins, const std::vector<double>& nu_sum,
                      const std::vector<double>& h_sum, const std::vector<std::size_t>& pairs) {
  const double width = bins.resolved_max(g) / bins.count;
  ChiTable t;
  t.rows.push_back({0.0, 0.0, 0.0, g.size(), 1.0, 1.0});
  for (int b = 0; b < bins.count; ++b) {
    if (pairs[b] == 0) {
      t.warnings.push_back("distance bin [" + std::to_string(b * width) + ", " + std::to_string((b + 1) * width) +
                           ") has no pixel pairs; row omitted");
      continue;
    }
    const double nu = nu_sum[b] / static_cast<double>(pairs[b]);
    const double zeta = (1.0 + 2.0 * nu) / (1.0 - 2.0 * nu);
    const double chi = std::clamp(2.0 - zeta, 0.0, 1.0);
    t.rows.push_back({b * width, (b + 1) * width, h_sum[b] / static_cast<double>(pairs[b]), pairs[b], zeta, chi});
  }
  return t;
}

void check_bins(const DistanceBins& bins) {
  if (bins.count < 1) throw invalid_argument("distance bins: count must be positive");
  if (!(bins.max_distance >= 0.0)) throw invalid_argument("distance bins: max_distance must be >= 0");
}

}  // namespace

ChiTable extremal_correlation(const Eigen::MatrixXd& fields, const GridSpec& g, const DistanceBins& bins) {
  check_bins(bins);
  const auto n = static_cast<std::size_t>(fields.rows());
  const auto m = static_cast<std::size_t>(fields.cols());
  if (n != g.size()) throw invalid_argument("extremal correlation: fields do not match the grid");
  if (m < 2) throw invalid_argument("extremal correlation needs at least 2 fields");
  for (Index k = 0; k < fields.size(); ++k)
    if (!std::isfinite(fields.data()[k])) throw invalid_argument("extremal correlation: non-finite field value");

  using RMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RMat f(static_cast<Index>(n), static_cast<Index>(m));
  std::vector<std::size_t> order(m);
  for (std::size_t i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto row = fields.row(static_cast<Index>(i));
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] < row[b]; });
    // average ranks over ties
    for (std::size_t k = 0; k < m;) {
      std::size_t e = k + 1;
      while (e < m && row[order[e]] == row[order[k]]) ++e;
      const double r = 0.5 * static_cast<double>(k + e + 1);
      for (std::size_t q = k; q < e; ++q) f(static_cast<Index>(i), static_cast<Index>(order[q])) = r / (m + 1.0);
      k = e;
    }
  }

  const double width = bins.resolved_max(g) / bins.count;
  std::vector<double> nu_sum(bins.count, 0.0), h_sum(bins.count, 0.0);
  std::vector<std::size_t> pairs(bins.count, 0);
  for_each_pair(n, [&](std::size_t i, std::size_t j) {
    const double d = g.distance(i, j);
    const int b = bin_of(d, width, bins.count);
    if (b < 0) return;
    const double* a = f.row(static_cast<Index>(i)).data();
    const double* c = f.row(static_cast<Index>(j)).data();
    double s = 0.0;
    for (std::size_t k = 0; k < m; ++k) s += std::abs(a[k] - c[k]);
    nu_sum[b] += s / (2.0 * static_cast<double>(m));
    h_sum[b] += d;
    ++pairs[b];
  });
  return finish_table(g, bins, nu_sum, h_sum, pairs);
}

ChiTable theoretical_extremal_correlation(const GridSpec& g, const BRParams& p, const DistanceBins& bins) {
  check_bins(bins);
  p.validate();
  const double width = bins.resolved_max(g) / bins.count;
  std::vector<double> nu_sum(bins.count, 0.0), h_sum(bins.count, 0.0);
  std::vector<std::size_t> pairs(bins.count, 0);
  for_each_pair(g.size(), [&](std::size_t i, std::size_t j) {
    const double d = g.distance(i, j);
    const int b = bin_of(d, width, bins.count);
    if (b < 0) return;
    const double zeta = br_extremal_coefficient(d, p);
    nu_sum[b] += 0.5 * (zeta - 1.0) / (zeta + 1.0);
    h_sum[b] += d;
    ++pairs[b];
  });
  return finish_table(g, bins, nu_sum, h_sum, pairs);
}

SummaryValues summary_distributions(const Eigen::MatrixXd& fields) {
  if (fields.cols() < 2) throw invalid_argument("summary distributions need at least 2 fields");
  SummaryValues s;
  for (Index c = 0; c < fields.cols(); ++c) {
    s.min.push_back(fields.col(c).minCoeff());
    s.max.push_back(fields.col(c).maxCoeff());
    s.abs_sum.push_back(fields.col(c).cwiseAbs().sum());
  }
  return s;
}

double scott_factor(std::size_t m, int d) { return std::pow(static_cast<double>(m), -1.0 / (d + 4)); }

std::vector<double> kde1d(std::span<const double> samples, std::span<const double> points) {
  if (samples.size() < 2) throw invalid_argument("kde needs at least 2 samples");
  const double sd = sample_sd(samples);
  if (!(sd > 0.0)) throw invalid_argument("kde: samples have zero variance");
  const double h = sd * scott_factor(samples.size(), 1);
  const double norm = 1.0 / (static_cast<double>(samples.size()) * h * std::sqrt(2.0 * std::numbers::pi));
  std::vector<double> out(points.size());
  for (std::size_t k = 0; k < points.size(); ++k) {
    double acc = 0.0;
    for (double x : samples) {
      const double z = (points[k] - x) / h;
      acc += std::exp(-0.5 * z * z);
    }
    out[k] = acc * norm;
  }
  return out;
}

std::vector<double> kde2d(std::span<const double> x, std::span<const double> y, std::span<const double> xs,
                          std::span<const double> ys) {
  if (x.size() != y.size()) throw invalid_argument("kde2d: coordinate lengths differ");
  if (x.size() < 2) throw invalid_argument("kde needs at least 2 samples");
  const double sx = sample_sd(x), sy = sample_sd(y);
  if (!(sx > 0.0) || !(sy > 0.0)) throw invalid_argument("kde: samples have zero variance");
  const double f = scott_factor(x.size(), 2);
  const double hx = sx * f, hy = sy * f;
  const double norm = 1.0 / (static_cast<double>(x.size()) * 2.0 * std::numbers::pi * hx * hy);
  Eigen::MatrixXd kx(static_cast<Index>(x.size()), static_cast<Index>(xs.size()));
  Eigen::MatrixXd ky(static_cast<Index>(y.size()), static_cast<Index>(ys.size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t a = 0; a < xs.size(); ++a) {
      const double z = (xs[a] - x[i]) / hx;
      kx(static_cast<Index>(i), static_cast<Index>(a)) = std::exp(-0.5 * z * z);
    }
    for (std::size_t b = 0; b < ys.size(); ++b) {
      const double z = (ys[b] - y[i]) / hy;
      ky(static_cast<Index>(i), static_cast<Index>(b)) = std::exp(-0.5 * z * z);
    }
  }
  const Eigen::MatrixXd d = ky.transpose() * kx;  // ys x xs
  std::vector<double> out(xs.size() * ys.size());
  for (std::size_t b = 0; b < ys.size(); ++b)
    for (std::size_t a = 0; a < xs.size(); ++a) out[b * xs.size() + a] = d(static_cast<Index>(b), static_cast<Index>(a)) * norm;
  return out;
}

double empirical_quantile(std::vector<double> v, double q) {
  if (v.empty()) throw invalid_argument("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::vector<double> quantile_grid(std::span<const double> samples, double q_lo, double q_hi, std::size_t count) {
  if (count < 2) throw invalid_argument("quantile grid needs at least 2 points");
  const std::vector<double> v(samples.begin(), samples.end());
  const double lo = empirical_quantile(v, q_lo), hi = empirical_quantile(v, q_hi);
  std::vector<double> out(count);
  for (std::size_t k = 0; k < count; ++k) out[k] = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(count - 1);
  return out;
}

std::vector<double> conditional_mean_field(const CondEvalSet& c) {
  if (c.m() < 1) throw invalid_argument("conditional mean needs m >= 1");
  std::vector<double> out(c.mask.size(), kNaN);
  const auto free = c.mask.unobserved_indices();
  for (std::size_t r = 0; r < free.size(); ++r) out[free[r]] = c.completions.row(static_cast<Index>(r)).mean();
  return out;
}

std::vector<double> pcc_heatmap(const CondEvalSet& c, std::size_t anchor) {
  if (c.m() < 3) throw invalid_argument("correlation heatmap needs m >= 3");
  if (anchor >= c.mask.size() || c.mask.observed(anchor))
    throw invalid_argument("correlation anchor must be an unobserved index");
  const auto free = c.mask.unobserved_indices();
  const auto ar = static_cast<Index>(std::lower_bound(free.begin(), free.end(), anchor) - free.begin());
  const Eigen::MatrixXd centered = c.completions.colwise() - c.completions.rowwise().mean();
  const Eigen::VectorXd a = centered.row(ar).transpose();
  const double va = a.squaredNorm();
  if (!(va > 0.0)) throw invalid_argument("correlation anchor has zero variance");
  std::vector<double> out(c.mask.size(), kNaN);
  for (std::size_t r = 0; r < free.size(); ++r) {
    const auto row = centered.row(static_cast<Index>(r));
    const double vb = row.squaredNorm();
    out[free[r]] = static_cast<Index>(r) == ar ? 1.0 : (vb > 0.0 ? row.dot(a) / std::sqrt(va * vb) : kNaN);
  }
  return out;
}

double ks_two_sample(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw invalid_argument("KS statistic needs nonempty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return d;
}

double ks_normal(std::vector<double> a, double mean, double sd) {
  if (a.empty()) throw invalid_argument("KS statistic needs a nonempty sample");
  if (!(sd > 0.0)) throw invalid_argument("KS reference standard deviation must be positive");
  std::sort(a.begin(), a.end());
  const double n = static_cast<double>(a.size());
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double f = normal_cdf((a[i] - mean) / sd);
    d = std::max({d, (static_cast<double>(i) + 1.0) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

std::vector<double> per_pixel_ks(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows()) throw invalid_argument("per-pixel KS: sets have different grids");
  std::vector<double> out(static_cast<std::size_t>(a.rows()));
  for (Index i = 0; i < a.rows(); ++i) {
    std::vector<double> x(a.cols()), y(b.cols());
    for (Index k = 0; k < a.cols(); ++k) x[k] = a(i, k);
    for (Index k = 0; k < b.cols(); ++k) y[k] = b(i, k);
    out[static_cast<std::size_t>(i)] = ks_two_sample(std::move(x), std::move(y));
  }
  return out;
}

namespace {

Eigen::MatrixXd pooled_distances(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd all(a.rows(), a.cols() + b.cols());
  all << a, b;
  const Eigen::VectorXd sq = all.colwise().squaredNorm().transpose();
  Eigen::MatrixXd d = -2.0 * (all.transpose() * all);
  d.colwise() += sq;
  d.rowwise() += sq.transpose();
  d = d.cwiseMax(0.0).cwiseSqrt();
  d.diagonal().setZero();
  return d;
}

double energy_from_labels(const Eigen::MatrixXd& d, const std::vector<std::uint8_t>& in_a, double na, double nb) {
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  const Index n = d.rows();
  for (Index j = 0; j < n; ++j) {
    const double* col = d.col(j).data();
    double ca = 0.0, cb = 0.0;
    for (Index i = 0; i < n; ++i) (in_a[i] ? ca : cb) += col[i];
    if (in_a[j]) {
      saa += ca;
      sab += cb;
    } else {
      sbb += cb;
    }
  }
  return 2.0 * sab / (na * nb) - saa / (na * na) - sbb / (nb * nb);
}

}  // namespace

double energy_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() == 0 || b.cols() == 0) throw invalid_argument("energy distance needs nonempty sets");
  if (a.rows() != b.rows()) throw invalid_argument("energy distance: sets have different grids");
  const Eigen::MatrixXd d = pooled_distances(a, b);
  std::vector<std::uint8_t> in_a(static_cast<std::size_t>(a.cols() + b.cols()), 0);
  std::fill(in_a.begin(), in_a.begin() + a.cols(), 1);
  return energy_from_labels(d, in_a, static_cast<double>(a.cols()), static_cast<double>(b.cols()));
}

double energy_permutation_threshold(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, std::size_t permutations,
                                    double level, RngStream& rng) {
  if (permutations == 0) throw invalid_argument("permutation band needs at least one permutation");
  if (a.cols() == 0 || b.cols() == 0) throw invalid_argument("energy distance needs nonempty sets");
  const Eigen::MatrixXd d = pooled_distances(a, b);
  const std::size_t n = static_cast<std::size_t>(a.cols() + b.cols());
  std::vector<std::uint8_t> in_a(n, 0);
  std::fill(in_a.begin(), in_a.begin() + a.cols(), 1);
  std::vector<double> null;
  null.reserve(permutations);
  for (std::size_t p = 0; p < permutations; ++p) {
    for (std::size_t i = n; i > 1; --i) std::swap(in_a[i - 1], in_a[rng.index(i)]);
    null.push_back(energy_from_labels(d, in_a, static_cast<double>(a.cols()), static_cast<double>(b.cols())));
  }
  return empirical_quantile(std::move(null), level);
}

}  // namespace ncs
