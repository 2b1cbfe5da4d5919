#pragma once

#include <cstdint>
#include <random>

namespace ncs {

/// Seedable random stream. Identical (seed, stream) pairs reproduce identical
/// draw sequences; different stream ids are decorrelated through a seed_seq.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

  /// Child stream keyed by `id`; deterministic in (seed, stream, id).
  RngStream substream(std::uint64_t id) const;

  double uniform();  // [0, 1)
  double uniform(double lo, double hi);
  double normal();
  double exponential();
  /// Uniform integer in [0, n).
  std::uint64_t index(std::uint64_t n);
  /// Uniform integer in [lo, hi].
  std::int64_t integer(std::int64_t lo, std::int64_t hi);

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// SplitMix64 finalizer; used to derive stream ids.
std::uint64_t mix64(std::uint64_t x) noexcept;

}  // namespace ncs
