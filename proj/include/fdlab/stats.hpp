#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include <boost/math/distributions/beta.hpp>

#include "fdlab/error.hpp"

namespace fdlab {

struct BinomialSummary {
  std::size_t successes = 0;
  std::size_t trials = 0;
  double estimate = 0.0;
  double lower = 0.0;
  double upper = 1.0;
  double level = 0.95;
};

/// Clopper-Pearson interval from beta quantiles. At the boundaries the closed forms
/// ((1-level)/2)^(1/n) and 1 - that value fall out of the same quantiles.
inline BinomialSummary exact_binomial_ci(std::size_t successes, std::size_t trials, double level = 0.95) {
  require(trials >= 1, ErrorKind::range, "binomial interval needs at least one trial");
  require(successes <= trials, ErrorKind::range, "successes exceed trials");
  require(level > 0.0 && level < 1.0, ErrorKind::range, "confidence level must lie in (0,1)");
  const double tail = (1.0 - level) / 2.0;
  const double k = double(successes), n = double(trials);
  BinomialSummary s{successes, trials, k / n, 0.0, 1.0, level};
  if (successes > 0) s.lower = boost::math::quantile(boost::math::beta_distribution<double>(k, n - k + 1.0), tail);
  if (successes < trials)
    s.upper = boost::math::quantile(boost::math::beta_distribution<double>(k + 1.0, n - k), 1.0 - tail);
  return s;
}

struct Interval {
  double lower;
  double upper;
};

using Statistic = std::function<double(std::span<const double>)>;

inline double mean_of(std::span<const double> xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / double(xs.size());
}

/// Percentile bootstrap. Quantiles use the nearest-rank rule on the sorted replicates.
inline Interval bootstrap_ci(std::span<const double> outcomes, const Statistic& statistic, std::size_t resamples,
                             std::uint64_t seed, double level = 0.95) {
  require(!outcomes.empty(), ErrorKind::range, "bootstrap over an empty outcome vector");
  require(resamples >= 100, ErrorKind::range, "bootstrap needs at least 100 resamples");
  require(level > 0.0 && level < 1.0, ErrorKind::range, "confidence level must lie in (0,1)");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, outcomes.size() - 1);
  std::vector<double> sample(outcomes.size()), reps(resamples);
  for (std::size_t r = 0; r < resamples; ++r) {
    for (double& x : sample) x = outcomes[pick(rng)];
    reps[r] = statistic(sample);
  }
  std::sort(reps.begin(), reps.end());
  const double tail = (1.0 - level) / 2.0;
  auto rank = [&](double q) {
    const auto i = std::size_t(std::ceil(q * double(resamples)));
    return reps[std::clamp<std::size_t>(i == 0 ? 0 : i - 1, 0, resamples - 1)];
  };
  return {rank(tail), rank(1.0 - tail)};
}

}  // namespace fdlab
