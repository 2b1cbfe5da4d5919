#include "ncs/schedule.hpp"

#include <bit>
#include <cmath>
#include <cstdio>

#include "ncs/error.hpp"

namespace ncs {

Schedule Schedule::build(int steps, double beta0, double betaT) {
  if (steps < 1) throw invalid_argument("schedule: T must be >= 1");
  if (!(beta0 > 0.0 && beta0 <= betaT && betaT < 1.0))
    throw invalid_argument("schedule: require 0 < beta0 <= betaT < 1");
  Schedule s;
  s.steps_ = steps;
  s.beta_.resize(steps + 1);
  s.alpha_bar_.resize(steps + 1);
  s.sigma_bar_.resize(steps + 1);
  for (int t = 0; t <= steps; ++t) s.beta_[t] = beta0 + (betaT - beta0) * t / steps;
  s.beta_[0] = beta0;
  s.beta_[steps] = betaT;
  s.alpha_bar_[0] = 1.0;
  for (int t = 1; t <= steps; ++t) s.alpha_bar_[t] = s.alpha_bar_[t - 1] * (1.0 - s.beta_[t]);
  for (int t = 0; t <= steps; ++t) s.sigma_bar_[t] = std::sqrt(1.0 - s.alpha_bar_[t]);
  return s;
}

std::uint64_t Schedule::fingerprint() const noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  feed(static_cast<std::uint64_t>(steps_));
  feed(std::bit_cast<std::uint64_t>(beta0()));
  feed(std::bit_cast<std::uint64_t>(betaT()));
  return h;
}

std::string Schedule::fingerprint_hex() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fingerprint()));
  return buf;
}

}  // namespace ncs
