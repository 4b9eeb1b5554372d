#pragma once

// Wilcoxon signed-rank test, medians, means with +inf handling, bootstrap CIs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "subgd/error.hpp"
#include "subgd/rng.hpp"

namespace subgd {

struct WilcoxonResult {
    std::size_t n = 0;      // non-zero differences
    double w_plus = 0.0;    // rank sum of positive differences (a > b)
    double w_minus = 0.0;
    double p_value = 1.0;   // two-sided
    bool exact = false;
};

inline constexpr std::size_t kWilcoxonExactMax = 20;
inline constexpr std::size_t kWilcoxonMinPairs = 5;

namespace detail {

struct SignedRanks {
    std::vector<double> ranks; // average ranks of |d|, one per non-zero difference
    std::vector<bool> positive;
    double tie_term = 0.0;     // sum over tie groups of t^3 - t
};

inline SignedRanks signed_ranks(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("wilcoxon: sample lengths differ");
    std::vector<std::pair<double, bool>> d; // (|d|, d > 0)
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i] - b[i];
        if (std::isnan(x) && a[i] == b[i]) continue; // inf == inf
        if (std::isnan(x)) throw ValidationError("wilcoxon: NaN in sample");
        if (x == 0.0) continue;
        d.emplace_back(std::abs(x), x > 0.0);
    }
    std::sort(d.begin(), d.end(), [](const auto& l, const auto& r) { return l.first < r.first; });
    SignedRanks out;
    out.ranks.resize(d.size());
    out.positive.resize(d.size());
    for (std::size_t i = 0; i < d.size();) {
        std::size_t j = i;
        while (j < d.size() && d[j].first == d[i].first) ++j;
        const double avg = 0.5 * static_cast<double>(i + 1 + j); // mean of ranks i+1 .. j
        const double t = static_cast<double>(j - i);
        out.tie_term += t * t * t - t;
        for (std::size_t k = i; k < j; ++k) {
            out.ranks[k] = avg;
            out.positive[k] = d[k].second;
        }
        i = j;
    }
    return out;
}

/// Counts of sign assignments per doubled rank sum; index s = 2 * W+.
inline std::vector<double> signed_rank_distribution(std::span<const double> ranks) {
    std::size_t total = 0;
    std::vector<std::size_t> doubled;
    for (double r : ranks) {
        doubled.push_back(static_cast<std::size_t>(std::llround(2.0 * r)));
        total += doubled.back();
    }
    std::vector<double> counts(total + 1, 0.0);
    counts[0] = 1.0;
    std::size_t reach = 0;
    for (std::size_t r : doubled) {
        for (std::size_t s = reach + 1; s-- > 0;)
            if (counts[s] != 0.0) counts[s + r] += counts[s];
        reach += r;
    }
    return counts;
}

} // namespace detail

/// Exact two-sided p-value: 2 * min(P(W+ <= w), P(W+ >= w)), capped at 1,
/// under the null that every sign assignment is equally likely.
inline double wilcoxon_exact_p(std::span<const double> ranks, double w_plus) {
    const auto counts = detail::signed_rank_distribution(ranks);
    const auto w2 = static_cast<std::size_t>(std::llround(2.0 * w_plus));
    double lower = 0.0, upper = 0.0, total = 0.0;
    for (std::size_t s = 0; s < counts.size(); ++s) {
        total += counts[s];
        if (s <= w2) lower += counts[s];
        if (s >= w2) upper += counts[s];
    }
    return std::min(1.0, 2.0 * std::min(lower, upper) / total);
}

/// Two-sided Wilcoxon signed-rank test on paired samples, differences a - b.
/// Zero differences are dropped; tied |d| receive average ranks. Exact for
/// n <= 20, otherwise a normal approximation with tie and continuity correction.
inline WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
    const auto sr = detail::signed_ranks(a, b);
    WilcoxonResult res;
    res.n = sr.ranks.size();
    if (res.n < kWilcoxonMinPairs)
        throw ValidationError("wilcoxon: need at least 5 non-zero differences, got " + std::to_string(res.n));
    for (std::size_t i = 0; i < res.n; ++i) (sr.positive[i] ? res.w_plus : res.w_minus) += sr.ranks[i];
    if (res.n <= kWilcoxonExactMax) {
        res.exact = true;
        res.p_value = wilcoxon_exact_p(sr.ranks, res.w_plus);
        return res;
    }
    const double n = static_cast<double>(res.n);
    const double mu = n * (n + 1.0) / 4.0;
    const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - sr.tie_term / 48.0;
    if (var <= 0.0) {
        res.p_value = 1.0;
        return res;
    }
    const double z = std::max(0.0, std::abs(res.w_plus - mu) - 0.5) / std::sqrt(var);
    res.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
    return res;
}

// ---------------------------------------------------------------------------

/// Median including +inf entries; NaN for an empty sample.
inline double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size();
    if (m % 2) return v[m / 2];
    const double lo = v[m / 2 - 1], hi = v[m / 2];
    return std::isinf(hi) ? hi : 0.5 * (lo + hi);
}

struct FiniteMean {
    double mean = std::numeric_limits<double>::quiet_NaN();
    std::size_t excluded = 0; // non-finite entries left out
};

inline FiniteMean finite_mean(std::span<const double> v) {
    FiniteMean out;
    double sum = 0.0;
    std::size_t n = 0;
    for (double x : v) {
        if (std::isfinite(x)) {
            sum += x;
            ++n;
        } else {
            ++out.excluded;
        }
    }
    if (n > 0) out.mean = sum / static_cast<double>(n);
    return out;
}

inline double quantile_sorted(std::span<const double> sorted, double q) {
    if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    if (frac == 0.0 || sorted[lo] == sorted[hi]) return sorted[lo];
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

struct Interval {
    double lower = 0.0;
    double upper = 0.0;
};

inline constexpr std::size_t kBootstrapResamples = 10000;

/// Percentile bootstrap interval of `statistic` over resamples of `values`.
inline Interval bootstrap_ci(std::span<const double> values, const std::function<double(std::vector<double>&)>& statistic,
                             std::uint64_t seed, std::size_t resamples = kBootstrapResamples, double level = 0.95) {
    if (values.empty()) throw ValidationError("bootstrap_ci: empty sample");
    if (resamples == 0 || !(level > 0.0 && level < 1.0)) throw ValidationError("bootstrap_ci: bad settings");
    Rng stream(seed);
    std::vector<double> stats;
    stats.reserve(resamples);
    std::vector<double> draw(values.size());
    for (std::size_t b = 0; b < resamples; ++b) {
        for (auto& x : draw) x = values[static_cast<std::size_t>(stream.below(values.size()))];
        stats.push_back(statistic(draw));
    }
    std::sort(stats.begin(), stats.end(), [](double l, double r) {
        if (std::isnan(l)) return false;
        if (std::isnan(r)) return true;
        return l < r;
    });
    const double alpha = 0.5 * (1.0 - level);
    return {quantile_sorted(stats, alpha), quantile_sorted(stats, 1.0 - alpha)};
}

} // namespace subgd
