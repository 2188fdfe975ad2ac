#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "spdelab/error.hpp"

namespace spdelab {

struct SampleSummary {
    std::size_t n = 0;
    double mean = 0.0;
    double variance = 0.0; ///< unbiased, 0 when n < 2
    double std_error = 0.0;
    double skewness = 0.0;
};

/// Two-pass moments in input order (bit-reproducible for a fixed order).
inline SampleSummary summarize(std::span<const double> xs) {
    SampleSummary s;
    s.n = xs.size();
    if (s.n == 0) return s;
    double sum = 0.0;
    for (double x : xs) sum += x;
    s.mean = sum / static_cast<double>(s.n);
    double m2 = 0.0, m3 = 0.0;
    for (double x : xs) {
        const double d = x - s.mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    if (s.n >= 2) {
        s.variance = m2 / static_cast<double>(s.n - 1);
        s.std_error = std::sqrt(s.variance / static_cast<double>(s.n));
    }
    const double pop_var = m2 / static_cast<double>(s.n);
    if (pop_var > 0.0) s.skewness = (m3 / static_cast<double>(s.n)) / std::pow(pop_var, 1.5);
    return s;
}

struct RateFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
    std::vector<double> residuals;
};

/// Ordinary least squares of log(y) against log(x).
inline RateFit fit_loglog(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw InsufficientDataError("fit: x and y differ in length");
    std::vector<double> lx, ly;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] > 0.0 && y[i] > 0.0 && std::isfinite(y[i])) {
            lx.push_back(std::log(x[i]));
            ly.push_back(std::log(y[i]));
        }
    }
    if (lx.size() < 3) throw InsufficientDataError("fit: need at least 3 usable points, have " + std::to_string(lx.size()));
    const double n = static_cast<double>(lx.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        mx += lx[i];
        my += ly[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0, sxy = 0, syy = 0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        sxx += (lx[i] - mx) * (lx[i] - mx);
        sxy += (lx[i] - mx) * (ly[i] - my);
        syy += (ly[i] - my) * (ly[i] - my);
    }
    if (!(sxx > 0.0)) throw InsufficientDataError("fit: x values are all equal");
    RateFit fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    double ss_res = 0.0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        const double r = ly[i] - (fit.intercept + fit.slope * lx[i]);
        fit.residuals.push_back(r);
        ss_res += r * r;
    }
    // A constant series is fitted exactly by slope 0.
    fit.r_squared = syy > 0.0 ? std::max(0.0, 1.0 - ss_res / syy) : 1.0;
    return fit;
}

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
    bool contains(double x) const { return lo <= x && x <= hi; }
    bool overlaps(const Interval& o) const { return lo <= o.hi && o.lo <= hi; }
};

/// Two-sided standard normal quantile for confidence `level`.
inline double normal_quantile(double level) {
    if (!(level > 0.0 && level < 1.0)) throw InsufficientDataError("confidence level must lie in (0,1)");
    return boost::math::quantile(boost::math::normal_distribution<double>(), 0.5 + 0.5 * level);
}

/// mean +- z stderr.
inline Interval normal_interval(const SampleSummary& s, double level) {
    if (s.n < 2) throw InsufficientDataError("confidence interval: variance undefined with fewer than 2 samples");
    const double z = normal_quantile(level);
    return {s.mean - z * s.std_error, s.mean + z * s.std_error};
}

/// Wilson score interval for a binomial proportion.
inline Interval wilson_interval(std::size_t successes, std::size_t n, double level) {
    if (n == 0) throw InsufficientDataError("Wilson interval: no trials");
    const double z = normal_quantile(level);
    const double nn = static_cast<double>(n);
    const double p = static_cast<double>(successes) / nn;
    const double z2 = z * z;
    const double centre = (p + z2 / (2.0 * nn)) / (1.0 + z2 / nn);
    const double half = z / (1.0 + z2 / nn) * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn));
    return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

} // namespace spdelab
