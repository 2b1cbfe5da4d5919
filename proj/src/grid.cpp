#include "ncs/grid.hpp"

#include <cmath>
#include <numeric>

#include "ncs/error.hpp"

namespace ncs {

GridSpec GridSpec::build(int side, double lower, double upper) {
  if (side < 1) throw invalid_argument("grid side must be >= 1");
  if (!(lower < upper)) throw invalid_argument("grid bounds require lower < upper");
  return GridSpec(side, lower, upper);
}

GridSpec::GridSpec(int side, double lower, double upper)
    : side_(side),
      lower_(lower),
      upper_(upper),
      spacing_(side > 1 ? (upper - lower) / (side - 1) : 0.0) {}

Location GridSpec::location(std::size_t i) const {
  if (i >= size()) throw invalid_argument("grid index out of range");
  return {lower_ + col(i) * spacing_, lower_ + row(i) * spacing_};
}

double GridSpec::distance(std::size_t i, std::size_t j) const {
  if (i >= size() || j >= size()) throw invalid_argument("grid index out of range");
  if (i == j) return 0.0;
  const double dx = (col(i) - col(j)) * spacing_;
  const double dy = (row(i) - row(j)) * spacing_;
  return std::hypot(dx, dy);
}

Mask::Mask(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
  for (auto b : bits_) {
    if (b > 1) throw invalid_argument("mask bits must be 0 or 1");
    observed_ += b;
  }
}

Mask Mask::zeros(std::size_t n) { return Mask(std::vector<std::uint8_t>(n, 0)); }
Mask Mask::ones(std::size_t n) { return Mask(std::vector<std::uint8_t>(n, 1)); }

Mask Mask::complement() const {
  std::vector<std::uint8_t> c(bits_.size());
  for (std::size_t i = 0; i < bits_.size(); ++i) c[i] = bits_[i] ? 0 : 1;
  return Mask(std::move(c));
}

std::vector<std::size_t> Mask::observed_indices() const {
  std::vector<std::size_t> out;
  out.reserve(observed_);
  for (std::size_t i = 0; i < bits_.size(); ++i)
    if (bits_[i]) out.push_back(i);
  return out;
}

std::vector<std::size_t> Mask::unobserved_indices() const {
  std::vector<std::size_t> out;
  out.reserve(bits_.size() - observed_);
  for (std::size_t i = 0; i < bits_.size(); ++i)
    if (!bits_[i]) out.push_back(i);
  return out;
}

const char* to_string(Scale s) {
  switch (s) {
    case Scale::Raw: return "raw";
    case Scale::Frechet: return "frechet";
    case Scale::Gumbel: return "gumbel";
  }
  return "unknown";
}

Scale scale_from_string(const std::string& s) {
  if (s == "raw") return Scale::Raw;
  if (s == "frechet") return Scale::Frechet;
  if (s == "gumbel") return Scale::Gumbel;
  throw invalid_argument("unknown scale '" + s + "'");
}

Field::Field(std::vector<double> values, Scale scale) : values_(std::move(values)), scale_(scale) {
  for (double v : values_) {
    if (!std::isfinite(v)) throw invalid_argument("field values must be finite");
    if (scale_ == Scale::Frechet && !(v > 0.0))
      throw invalid_argument("Frechet-scale field values must be positive");
  }
}

Mask sample_bernoulli_mask(const GridSpec& g, double rho, RngStream& rng) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw invalid_argument("mask probability must lie in [0,1]");
  std::vector<std::uint8_t> bits(g.size());
  for (auto& b : bits) b = rng.uniform() < rho ? 1 : 0;
  return Mask(std::move(bits));
}

Mask sample_fixed_count_mask(const GridSpec& g, std::size_t k, RngStream& rng) {
  const std::size_t n = g.size();
  if (k > n) throw invalid_argument("fixed-count mask: k exceeds grid size");
  // Partial Fisher-Yates: the first k slots form a uniform k-subset.
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.index(n - i));
    std::swap(idx[i], idx[j]);
  }
  std::vector<std::uint8_t> bits(n, 0);
  for (std::size_t i = 0; i < k; ++i) bits[idx[i]] = 1;
  return Mask(std::move(bits));
}

SplitField split(const Field& f, const Mask& m) {
  if (f.size() != m.size()) throw invalid_argument("split: field and mask sizes differ");
  SplitField out;
  out.observed.reserve(m.observed_count());
  out.unobserved.reserve(m.unobserved_count());
  for (std::size_t i = 0; i < f.size(); ++i)
    (m.observed(i) ? out.observed : out.unobserved).push_back(f[i]);
  return out;
}

Field merge(const Mask& m, std::span<const double> observed, std::span<const double> completion,
            Scale scale) {
  if (observed.size() != m.observed_count() || completion.size() != m.unobserved_count())
    throw invalid_argument("merge: part sizes do not match the mask");
  std::vector<double> v(m.size());
  std::size_t a = 0, b = 0;
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = m.observed(i) ? observed[a++] : completion[b++];
  return Field(std::move(v), scale);
}

Field merge(const Field& obs, const Mask& m, std::span<const double> completion) {
  if (obs.size() != m.size()) throw invalid_argument("merge: field and mask sizes differ");
  if (completion.size() != m.unobserved_count())
    throw invalid_argument("merge: completion size does not match the unobserved count");
  std::vector<double> v(m.size());
  std::size_t b = 0;
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = m.observed(i) ? obs[i] : completion[b++];
  return Field(std::move(v), obs.scale());
}

}  // namespace ncs
