#pragma once

#include <cstdint>
#include <span>

namespace stagechain::eval {

struct BootstrapCI {
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  std::size_t n_resamples = 0;
  double level = 0.95;
  std::uint64_t seed = 0;
};

double mean(std::span<const double> values);  // throws on empty

// Percentile bootstrap of the mean. Interval ends are type-7 quantiles of the
// resampled means, widened if needed so the interval contains the point.
BootstrapCI bootstrap_ci(std::span<const double> values, std::size_t n_resamples = 10000,
                         double level = 0.95, std::uint64_t seed = 0);

// Non-overlapping intervals are read as a significant difference.
bool significant(double lo_a, double hi_a, double lo_b, double hi_b);
inline bool significant(const BootstrapCI& a, const BootstrapCI& b) {
  return significant(a.lo, a.hi, b.lo, b.hi);
}

// (before - after) / before.
double relative_reduction(double before, double after);

}  // namespace stagechain::eval
