#include "stagechain/eval/stats.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "stagechain/ad/rng.hpp"
#include "stagechain/errors.hpp"

namespace stagechain::eval {

namespace {

double quantile7(const std::vector<double>& sorted, double p) {
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

double mean(std::span<const double> values) {
  if (values.empty()) throw DataError("mean of an empty sample");
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

BootstrapCI bootstrap_ci(std::span<const double> values, std::size_t n_resamples, double level,
                         std::uint64_t seed) {
  if (values.empty()) throw DataError("bootstrap of an empty sample");
  if (n_resamples == 0) throw UsageError("bootstrap needs at least one resample");
  if (!(level > 0.0 && level < 1.0)) throw UsageError("bootstrap level must lie in (0,1)");
  BootstrapCI ci;
  ci.point = mean(values);
  ci.n_resamples = n_resamples;
  ci.level = level;
  ci.seed = seed;

  ad::Rng rng(seed);
  const std::size_t n = values.size();
  std::vector<double> means(n_resamples);
  for (double& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += values[rng.below(n)];
    m = s / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  const double alpha = (1.0 - level) / 2.0;
  ci.lo = std::min(quantile7(means, alpha), ci.point);
  ci.hi = std::max(quantile7(means, 1.0 - alpha), ci.point);
  return ci;
}

bool significant(double lo_a, double hi_a, double lo_b, double hi_b) {
  return hi_a < lo_b || hi_b < lo_a;
}

double relative_reduction(double before, double after) {
  if (before == 0.0) throw DataError("relative reduction from a zero baseline");
  return (before - after) / before;
}

}  // namespace stagechain::eval
