#include "ncs/simulator.hpp"

#include <atomic>

#include "ncs/error.hpp"
#include "ncs/parallel.hpp"

namespace ncs {

const char* to_string(ProcessKind k) { return k == ProcessKind::Gaussian ? "gaussian" : "brown_resnick"; }

ProcessKind process_from_string(const std::string& s) {
  if (s == "gaussian") return ProcessKind::Gaussian;
  if (s == "brown_resnick") return ProcessKind::BrownResnick;
  throw config_error("unknown process kind '" + s + "' (expected gaussian or brown_resnick)");
}

void ProcessSpec::validate() const {
  if (kind == ProcessKind::Gaussian)
    gp.validate();
  else
    br.validate();
  if (stopping.max_points == 0) throw config_error("stopping: max_points must be positive");
  if (!(stopping.bound >= 0.0)) throw config_error("stopping: bound must be >= 0 (0 selects the exact bound)");
}

double ProcessSpec::theta1() const { return kind == ProcessKind::Gaussian ? gp.length_scale : br.range; }

ProcessSpec ProcessSpec::with_theta1(double theta) const {
  ProcessSpec out = *this;
  if (kind == ProcessKind::Gaussian)
    out.gp.length_scale = theta;
  else
    out.br.range = theta;
  out.validate();
  return out;
}

ProcessSimulator::ProcessSimulator(const GridSpec& g, const ProcessSpec& spec)
    : grid_(g), spec_(spec), truncated_(std::make_shared<std::size_t>(0)) {
  spec_.validate();
  if (spec_.kind == ProcessKind::Gaussian)
    gauss_ = std::make_unique<GaussianSimulator>(g, spec_.gp);
  else
    br_ = std::make_unique<BrownResnickSimulator>(g, spec_.br);
}

std::size_t ProcessSimulator::truncated_draws() const noexcept {
  return std::atomic_ref<std::size_t>(*truncated_).load();
}

Field ProcessSimulator::sample(RngStream& rng) const {
  if (gauss_) return gauss_->sample(rng);
  BRSample s = br_->sample(rng, spec_.stopping);
  if (s.truncated) std::atomic_ref<std::size_t>(*truncated_).fetch_add(1);
  return frechet_to_gumbel(s.field);
}

Eigen::MatrixXd ProcessSimulator::sample_columns(std::size_t count, const RngStream& rng, std::uint64_t first,
                                                 int threads) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(grid_.size()), static_cast<Eigen::Index>(count));
  parallel_for(count, threads, [&](std::size_t j) {
    RngStream r = rng.substream(first + j);
    const Field f = sample(r);
    out.col(static_cast<Eigen::Index>(j)) = Eigen::Map<const Eigen::VectorXd>(f.values().data(), static_cast<Eigen::Index>(f.size()));
  });
  return out;
}

}  // namespace ncs
