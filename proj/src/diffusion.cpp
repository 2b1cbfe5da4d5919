#include "ncs/diffusion.hpp"

#include <cmath>
#include <string>

#include "ncs/error.hpp"
#include "ncs/parallel.hpp"

namespace ncs {

namespace {

void check_step(int t, const Schedule& sched, const char* what) {
  if (t < 1 || t > sched.steps())
    throw invalid_argument(std::string(what) + ": step " + std::to_string(t) + " outside [1, " +
                           std::to_string(sched.steps()) + "]");
}

}  // namespace

void DiffusionBatch::validate(const Schedule& sched) const {
  const auto b = static_cast<Eigen::Index>(steps.size());
  if (states.cols() != b || masks.cols() != b || noise.cols() != b || thetas.size() != steps.size())
    throw invalid_argument("batch: column counts disagree");
  if (masks.rows() != states.rows() || noise.rows() != states.rows())
    throw invalid_argument("batch: row counts disagree");
  for (auto t : steps) check_step(t, sched, "batch");
}

DiffusionBatch DiffusionBatch::select(std::span<const std::size_t> columns) const {
  DiffusionBatch out;
  const auto n = states.rows();
  const auto b = static_cast<Eigen::Index>(columns.size());
  out.states.resize(n, b);
  out.masks.resize(n, b);
  out.noise.resize(n, b);
  out.thetas.reserve(columns.size());
  out.steps.reserve(columns.size());
  for (Eigen::Index k = 0; k < b; ++k) {
    const auto c = static_cast<Eigen::Index>(columns[k]);
    out.states.col(k) = states.col(c);
    out.masks.col(k) = masks.col(c);
    out.noise.col(k) = noise.col(c);
    out.thetas.push_back(thetas[c]);
    out.steps.push_back(steps[c]);
  }
  return out;
}

void DiffusionBatch::append(const DiffusionBatch& other) {
  if (other.size() == 0) return;
  if (size() == 0) {
    *this = other;
    return;
  }
  if (other.states.rows() != states.rows()) throw invalid_argument("batch append: row counts disagree");
  auto grow = [](Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    Eigen::MatrixXd c(a.rows(), a.cols() + b.cols());
    c << a, b;
    a.swap(c);
  };
  grow(states, other.states);
  grow(masks, other.masks);
  grow(noise, other.noise);
  thetas.insert(thetas.end(), other.thetas.begin(), other.thetas.end());
  steps.insert(steps.end(), other.steps.begin(), other.steps.end());
}

Eigen::VectorXd forward_transition_sample(const Eigen::VectorXd& x0, int t, const Schedule& sched, RngStream& rng) {
  check_step(t, sched, "forward_transition_sample");
  const double a = std::sqrt(sched.alpha_bar(t));
  const double s = sched.sigma_bar(t);
  Eigen::VectorXd out(x0.size());
  for (Eigen::Index i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + s * rng.normal();
  return out;
}

Eigen::VectorXd forward_step(const Eigen::VectorXd& x_prev, int t, const Schedule& sched, RngStream& rng) {
  check_step(t, sched, "forward_step");
  const double a = std::sqrt(1.0 - sched.beta(t));
  const double s = std::sqrt(sched.beta(t));
  Eigen::VectorXd out(x_prev.size());
  for (Eigen::Index i = 0; i < x_prev.size(); ++i) out[i] = a * x_prev[i] + s * rng.normal();
  return out;
}

Eigen::VectorXd mask_column(const Mask& m) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(m.size()));
  for (std::size_t i = 0; i < m.size(); ++i) v[static_cast<Eigen::Index>(i)] = m.observed(i) ? 1.0 : 0.0;
  return v;
}

Eigen::MatrixXd reverse_conditional_sample_batch(const Eigen::MatrixXd& observations, const Eigen::MatrixXd& masks,
                                                 std::span<const double> thetas, const Schedule& sched,
                                                 const ScoreFunction& score, std::span<RngStream> streams,
                                                 const SamplerOptions& opts) {
  const auto n = observations.rows();
  const auto total = observations.cols();
  if (masks.rows() != n || masks.cols() != total)
    throw invalid_argument("reverse sampler: mask shape differs from observations");
  if (static_cast<Eigen::Index>(thetas.size()) != total || static_cast<Eigen::Index>(streams.size()) != total)
    throw invalid_argument("reverse sampler: need one theta and one stream per column");
  if (opts.chunk == 0) throw invalid_argument("reverse sampler: chunk must be positive");
  for (Eigen::Index c = 0; c < total; ++c)
    for (Eigen::Index i = 0; i < n; ++i) {
      const double m = masks(i, c);
      if (m != 0.0 && m != 1.0) throw invalid_argument("reverse sampler: mask entries must be 0 or 1");
      if (m == 1.0 && !std::isfinite(observations(i, c)))
        throw invalid_argument("reverse sampler: non-finite observation");
    }

  Eigen::MatrixXd out = observations;
  const std::size_t chunks = (static_cast<std::size_t>(total) + opts.chunk - 1) / opts.chunk;
  const int T = sched.steps();

  parallel_for(chunks, opts.threads, [&](std::size_t ci) {
    const auto c0 = static_cast<Eigen::Index>(ci * opts.chunk);
    const auto b = std::min<Eigen::Index>(static_cast<Eigen::Index>(opts.chunk), total - c0);

    std::vector<std::vector<Eigen::Index>> free(static_cast<std::size_t>(b));
    bool any = false;
    for (Eigen::Index k = 0; k < b; ++k)
      for (Eigen::Index i = 0; i < n; ++i)
        if (masks(i, c0 + k) == 0.0) {
          free[k].push_back(i);
          any = true;
        }
    if (!any) return;

    Eigen::MatrixXd x = observations.middleCols(c0, b);
    const Eigen::MatrixXd m = masks.middleCols(c0, b);
    for (Eigen::Index k = 0; k < b; ++k) {
      auto& rng = streams[static_cast<std::size_t>(c0 + k)];
      for (auto i : free[k]) x(i, k) = rng.normal();
    }
    const std::span<const double> th = thetas.subspan(static_cast<std::size_t>(c0), static_cast<std::size_t>(b));
    std::vector<int> steps(static_cast<std::size_t>(b));

    for (int t = T; t >= 1; --t) {
      std::fill(steps.begin(), steps.end(), t);
      const Eigen::MatrixXd s = score.evaluate(ScoreQuery{x, m, th, steps});
      if (s.rows() != n || s.cols() != b) throw contract_error("score function returned the wrong shape");
      const double beta = sched.beta(t);
      const double inv = 1.0 / std::sqrt(1.0 - beta);
      const double sd = std::sqrt(beta);
      const bool noisy = t > 1 || !opts.suppress_final_noise;
      for (Eigen::Index k = 0; k < b; ++k) {
        for (Eigen::Index i = 0; i < n; ++i)
          if (m(i, k) == 1.0 && s(i, k) != 0.0)
            throw contract_error("score is nonzero at observed index " + std::to_string(i) + " (step " +
                                 std::to_string(t) + ")");
        auto& rng = streams[static_cast<std::size_t>(c0 + k)];
        for (auto i : free[k]) {
          const double eps = rng.normal();
          double v = inv * (x(i, k) + beta * s(i, k));
          if (noisy) v += sd * eps;
          if (!std::isfinite(v))
            throw numerical_error("reverse sampler diverged at step " + std::to_string(t) + " (column " +
                                  std::to_string(c0 + k) + ", index " + std::to_string(i) + ")");
          x(i, k) = v;
        }
      }
    }
    out.middleCols(c0, b) = x;
  });
  return out;
}

Field reverse_conditional_sample(const Field& obs, const Mask& mask, std::optional<double> theta,
                                 const Schedule& sched, const ScoreFunction& score, RngStream& rng,
                                 const SamplerOptions& opts) {
  if (obs.size() != mask.size()) throw invalid_argument("reverse sampler: field and mask sizes differ");
  if (score.requires_theta() && !theta) throw invalid_argument("reverse sampler: score function needs theta_1");
  Eigen::MatrixXd x(static_cast<Eigen::Index>(obs.size()), 1);
  for (std::size_t i = 0; i < obs.size(); ++i) x(static_cast<Eigen::Index>(i), 0) = mask.observed(i) ? obs[i] : 0.0;
  const Eigen::MatrixXd m = mask_column(mask);
  const double th = theta.value_or(0.0);
  RngStream streams[1] = {rng};
  const Eigen::MatrixXd r =
      reverse_conditional_sample_batch(x, m, std::span<const double>(&th, 1), sched, score, streams, opts);
  rng = streams[0];
  std::vector<double> values(r.data(), r.data() + r.size());
  for (std::size_t i = 0; i < obs.size(); ++i)
    if (mask.observed(i)) values[i] = obs[i];
  return Field(std::move(values), obs.scale());
}

namespace {

Eigen::MatrixXd evaluate_batch(const DiffusionBatch& batch, const ScoreFunction& score, const Schedule& sched) {
  batch.validate(sched);
  const Eigen::MatrixXd s = score.evaluate(ScoreQuery{batch.states, batch.masks, batch.thetas, batch.steps});
  if (s.rows() != batch.states.rows() || s.cols() != batch.states.cols())
    throw contract_error("score function returned the wrong shape");
  return s;
}

}  // namespace

std::vector<double> dsm_loss_per_example(const DiffusionBatch& batch, const ScoreFunction& score,
                                         const Schedule& sched) {
  const Eigen::MatrixXd s = evaluate_batch(batch, score, sched);
  std::vector<double> out(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto c = static_cast<Eigen::Index>(b);
    const int t = batch.steps[b];
    const double sig = sched.sigma_bar(t);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      if (batch.masks(i, c) != 0.0) continue;
      const double r = s(i, c) + batch.noise(i, c) / sig;
      acc += r * r;
    }
    out[b] = sched.weight(t) * acc;
    if (!std::isfinite(out[b])) throw numerical_error("non-finite loss at batch element " + std::to_string(b));
  }
  return out;
}

double dsm_loss(const DiffusionBatch& batch, const ScoreFunction& score, const Schedule& sched) {
  if (batch.size() == 0) throw invalid_argument("dsm_loss: empty batch");
  const auto per = dsm_loss_per_example(batch, score, sched);
  double acc = 0.0;
  for (double v : per) acc += v;
  return acc / static_cast<double>(per.size());
}

std::vector<double> dsm_loss_noise_form(const DiffusionBatch& batch, const ScoreFunction& score,
                                        const Schedule& sched) {
  const Eigen::MatrixXd s = evaluate_batch(batch, score, sched);
  std::vector<double> out(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto c = static_cast<Eigen::Index>(b);
    const double sig = sched.sigma_bar(batch.steps[b]);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      if (batch.masks(i, c) != 0.0) continue;
      const double r = sig * s(i, c) + batch.noise(i, c);
      acc += r * r;
    }
    out[b] = acc;
  }
  return out;
}

}  // namespace ncs
