#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ncs/rng.hpp"

namespace ncs {

struct Location {
  double x;
  double y;
};

/// Regular G x G grid on [lower, upper]^2 with both endpoints included.
/// Index i is row-major: row = i / G, col = i % G; x follows the column and
/// y follows the row.
class GridSpec {
 public:
  static GridSpec build(int side, double lower, double upper);

  int side() const noexcept { return side_; }
  std::size_t size() const noexcept { return static_cast<std::size_t>(side_) * side_; }
  double lower() const noexcept { return lower_; }
  double upper() const noexcept { return upper_; }
  /// Zero for the degenerate single-location grid.
  double spacing() const noexcept { return spacing_; }

  Location location(std::size_t i) const;
  double distance(std::size_t i, std::size_t j) const;
  int row(std::size_t i) const noexcept { return static_cast<int>(i / side_); }
  int col(std::size_t i) const noexcept { return static_cast<int>(i % side_); }

  bool operator==(const GridSpec&) const = default;

 private:
  GridSpec(int side, double lower, double upper);

  int side_;
  double lower_;
  double upper_;
  double spacing_;
};

/// Dense observed-location indicator; 1 = observed.
class Mask {
 public:
  Mask() = default;
  explicit Mask(std::vector<std::uint8_t> bits);
  static Mask zeros(std::size_t n);
  static Mask ones(std::size_t n);

  std::size_t size() const noexcept { return bits_.size(); }
  std::size_t observed_count() const noexcept { return observed_; }
  std::size_t unobserved_count() const noexcept { return bits_.size() - observed_; }
  bool observed(std::size_t i) const { return bits_[i] != 0; }
  const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

  Mask complement() const;
  std::vector<std::size_t> observed_indices() const;
  std::vector<std::size_t> unobserved_indices() const;

  bool operator==(const Mask& o) const { return bits_ == o.bits_; }

 private:
  std::vector<std::uint8_t> bits_;
  std::size_t observed_ = 0;
};

enum class Scale : std::uint32_t { Raw = 0, Frechet = 1, Gumbel = 2 };

const char* to_string(Scale s);
Scale scale_from_string(const std::string& s);

/// Row-major field values with a marginal-scale tag. Construction validates
/// finiteness (and positivity on the Frechet scale).
class Field {
 public:
  Field() = default;
  Field(std::vector<double> values, Scale scale);

  std::size_t size() const noexcept { return values_.size(); }
  Scale scale() const noexcept { return scale_; }
  const std::vector<double>& values() const noexcept { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }

  bool operator==(const Field&) const = default;

 private:
  std::vector<double> values_;
  Scale scale_ = Scale::Raw;
};

struct SplitField {
  std::vector<double> observed;    // values on observed indices, ascending index order
  std::vector<double> unobserved;  // values on unobserved indices, ascending index order
};

Mask sample_bernoulli_mask(const GridSpec& g, double rho, RngStream& rng);
Mask sample_fixed_count_mask(const GridSpec& g, std::size_t k, RngStream& rng);

SplitField split(const Field& f, const Mask& m);
/// Inverse of split: observed values at mask==1 positions, completion elsewhere.
Field merge(const Mask& m, std::span<const double> observed, std::span<const double> completion,
            Scale scale);
/// Takes the observed entries from a full-length field.
Field merge(const Field& obs, const Mask& m, std::span<const double> completion);

}  // namespace ncs
