#pragma once

// The nonparametric tests used by the validation battery: exact/approximate
// Wilcoxon signed-rank, one-sided Fisher exact on 2x2 tables, and empirical z.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "gem/error.hpp"

namespace gem::stats {

inline constexpr std::size_t kWilcoxonExactMaxN = 25;

struct WilcoxonResult {
  double w = 0.0;  // sum of ranks of positive values
  double p = 1.0;
  std::size_t n_used = 0;
  bool exact = true;
};

/// Mid-ranks (1-based) of `values`, ties share the average rank.
inline std::vector<double> midranks(const std::vector<double>& values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// P(W+ >= w) under the null of symmetric signs, given fixed (possibly tied) ranks.
/// Ranks are doubled so mid-ranks become integers; the distribution is built by
/// convolving one rank at a time.
inline double wilcoxon_exact_upper(const std::vector<double>& ranks, double w) {
  std::vector<std::int64_t> twice(ranks.size());
  std::int64_t total = 0;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    twice[i] = static_cast<std::int64_t>(std::llround(ranks[i] * 2.0));
    total += twice[i];
  }
  std::vector<double> dist(static_cast<std::size_t>(total) + 1, 0.0);
  dist[0] = 1.0;
  std::int64_t reach = 0;
  for (std::int64_t r : twice) {
    for (std::int64_t s = reach; s >= 0; --s)
      if (dist[static_cast<std::size_t>(s)] != 0.0) dist[static_cast<std::size_t>(s + r)] += dist[static_cast<std::size_t>(s)];
    reach += r;
  }
  const double denom = std::ldexp(1.0, static_cast<int>(ranks.size()));
  const std::int64_t threshold = static_cast<std::int64_t>(std::llround(w * 2.0));
  double tail = 0.0;
  for (std::int64_t s = std::max<std::int64_t>(threshold, 0); s <= total; ++s) tail += dist[static_cast<std::size_t>(s)];
  return tail / denom;
}

/// Exact upper tail for untied ranks 1..n.
inline double wilcoxon_exact_upper(std::size_t n, double w) {
  std::vector<double> ranks(n);
  std::iota(ranks.begin(), ranks.end(), 1.0);
  return wilcoxon_exact_upper(ranks, w);
}

inline double normal_upper(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

/// Signed-rank test. Exact zeros are dropped; one-sided alternative is a positive shift.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& values, bool one_sided) {
  std::vector<double> nz;
  for (double v : values)
    if (v != 0.0) nz.push_back(v);
  if (nz.empty()) throw Error(ErrorKind::AllZero, "every value is zero");

  std::vector<double> mags(nz.size());
  for (std::size_t i = 0; i < nz.size(); ++i) mags[i] = std::abs(nz[i]);
  const std::vector<double> ranks = midranks(mags);

  WilcoxonResult res;
  res.n_used = nz.size();
  for (std::size_t i = 0; i < nz.size(); ++i)
    if (nz[i] > 0.0) res.w += ranks[i];

  const double n = static_cast<double>(res.n_used);
  const double total = n * (n + 1.0) / 2.0;
  if (res.n_used <= kWilcoxonExactMaxN) {
    res.exact = true;
    const double upper = wilcoxon_exact_upper(ranks, res.w);
    if (one_sided) {
      res.p = upper;
    } else {
      // lower tail P(W <= w) = P(W >= total - w) by sign symmetry
      const double lower = wilcoxon_exact_upper(ranks, total - res.w);
      res.p = std::min(1.0, 2.0 * std::min(upper, lower));
    }
  } else {
    res.exact = false;
    const double mean = total / 2.0;
    double tie_term = 0.0;
    std::vector<double> sorted = mags;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size();) {
      std::size_t j = i;
      while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
      const double t = static_cast<double>(j - i);
      tie_term += t * t * t - t;
      i = j;
    }
    const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    const double sd = std::sqrt(var);
    if (one_sided) {
      res.p = normal_upper((res.w - mean - 0.5) / sd);
    } else {
      const double z = (std::abs(res.w - mean) - 0.5) / sd;
      res.p = std::min(1.0, 2.0 * normal_upper(z));
    }
  }
  return res;
}

inline double log_choose(std::uint64_t n, std::uint64_t k) {
  return std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(k) + 1.0) -
         std::lgamma(static_cast<double>(n - k) + 1.0);
}

/// One-sided Fisher exact test on [[a, b], [c, d]]: P(X >= a) with all margins fixed.
inline double fisher_exact_one_sided(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
  const std::uint64_t row1 = a + b;
  const std::uint64_t col1 = a + c;
  const std::uint64_t total = a + b + c + d;
  if (total == 0) return 1.0;
  const std::uint64_t hi = std::min(row1, col1);
  const double log_denom = log_choose(total, row1);
  double p = 0.0;
  for (std::uint64_t x = a; x <= hi; ++x) {
    p += std::exp(log_choose(col1, x) + log_choose(total - col1, row1 - x) - log_denom);
  }
  return std::min(1.0, p);
}

/// (value - mean) / sd with a Bessel-corrected sd.
inline double empirical_z(double concept_value, const std::vector<double>& sample) {
  if (sample.size() < 2) throw Error(ErrorKind::ZeroVariance, "need at least two samples");
  const double n = static_cast<double>(sample.size());
  double mean = 0.0;
  for (double v : sample) mean += v;
  mean /= n;
  double ss = 0.0;
  for (double v : sample) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  if (!(sd > 0.0)) throw Error(ErrorKind::ZeroVariance, "sample has zero spread");
  return (concept_value - mean) / sd;
}

/// Expected per-pair gain: improvement x rate - degradation x non-improvement rate.
inline double net_expected_improvement(double improvement_pp, double improvement_rate, double degradation_pp,
                                       double non_improvement_rate) {
  return improvement_pp * improvement_rate - degradation_pp * non_improvement_rate;
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Bessel-corrected standard error of the mean; 0 for fewer than two values.
inline double sem(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
}

}  // namespace gem::stats
