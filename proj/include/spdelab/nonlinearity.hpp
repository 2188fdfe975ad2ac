#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "spdelab/error.hpp"

namespace spdelab {

/// Cubic reaction term f(u) = -a u^3 + b u^2 + c with certified constants.
///
/// The dissipativity, growth and one-sided derivative bounds are certified
/// separately: a single leading constant cannot serve both f(u)u <= -a1 u^4
/// + b1 (needs a1 < a once b != 0) and |f(u)| <= a1 |u|^3 + b1 (needs
/// a1 > a). `a1` is the dissipation constant, `growth_a` the growth
/// constant, and `b1` the common additive constant valid for all three.
struct Nonlinearity {
    double a = 1.0;
    double b = 0.0;
    double c = 0.0;
    bool zero = false; ///< f == 0, for linear/deterministic test modes

    double a1 = 0.0;
    double growth_a = 0.0;
    double dissipation_b1 = 0.0; ///< max of f(u)u + a1 u^4
    double growth_b1 = 0.0;      ///< max of |f(u)| - growth_a |u|^3
    double derivative_b1 = 0.0;  ///< max of f'(u) + a1 u^2
    double b1 = 0.0;
    double b_tilde = 0.0; ///< bound on F(u) and f'(u)

    double value(double u) const { return zero ? 0.0 : ((-a * u + b) * u) * u + c; }
    double derivative(double u) const { return zero ? 0.0 : (-3.0 * a * u + 2.0 * b) * u; }
    double primitive(double u) const {
        return zero ? 0.0 : -a * u * u * u * u / 4.0 + b * u * u * u / 3.0 + c * u;
    }
};

namespace detail {

/// Max of `g` over a uniform grid on [-range, range], refined by golden
/// section around the best grid point.
template <class G>
double grid_max(G&& g, double range = 100.0, int points = 200001) {
    const double step = 2.0 * range / static_cast<double>(points - 1);
    double best = -INFINITY, arg = 0.0;
    for (int i = 0; i < points; ++i) {
        const double u = -range + step * static_cast<double>(i);
        const double v = g(u);
        if (v > best) {
            best = v;
            arg = u;
        }
    }
    double lo = std::max(-range, arg - step), hi = std::min(range, arg + step);
    const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
    for (int it = 0; it < 80; ++it) {
        const double m1 = hi - phi * (hi - lo), m2 = lo + phi * (hi - lo);
        if (g(m1) < g(m2))
            lo = m1;
        else
            hi = m2;
    }
    return std::max(best, g(0.5 * (lo + hi)));
}

} // namespace detail

/// Builds f(u) = -a u^3 + b u^2 + c and certifies its structural bounds by
/// grid maximization over [-100, 100]. Each defect polynomial has a negative
/// leading coefficient, so its maximum is attained inside the grid.
inline Nonlinearity make_nonlinearity(double a, double b, double c) {
    if (!(a > 0.0) || !std::isfinite(a))
        throw ConfigError("nonlinearity: a must be positive, otherwise f(u)u <= -a1 u^4 + b1 fails");
    if (!std::isfinite(b) || !std::isfinite(c)) throw ConfigError("nonlinearity: b and c must be finite");

    Nonlinearity f;
    f.a = a;
    f.b = b;
    f.c = c;
    const bool pure_cubic = b == 0.0 && c == 0.0;
    f.a1 = pure_cubic ? a : 0.5 * a;
    f.growth_a = b == 0.0 ? a : 2.0 * a;

    if (pure_cubic) {
        f.dissipation_b1 = 0.0;
        f.growth_b1 = 0.0;
        f.derivative_b1 = 0.0;
    } else {
        f.dissipation_b1 = detail::grid_max([&](double u) { return f.value(u) * u + f.a1 * u * u * u * u; });
        f.growth_b1 = detail::grid_max([&](double u) {
            return std::abs(f.value(u)) - f.growth_a * std::abs(u) * u * u;
        });
        f.derivative_b1 = detail::grid_max([&](double u) { return f.derivative(u) + f.a1 * u * u; });
    }
    f.b1 = std::max({f.dissipation_b1, f.growth_b1, f.derivative_b1, 0.0});

    // f' is a downward parabola with max b^2/(3a); F is a downward quartic.
    const double max_derivative = b * b / (3.0 * a);
    const double max_primitive = detail::grid_max([&](double u) { return f.primitive(u); });
    f.b_tilde = std::max({max_derivative, max_primitive, 0.0});
    return f;
}

/// f == 0; used for linear and deterministic reference runs.
inline Nonlinearity make_zero_nonlinearity() {
    Nonlinearity f;
    f.zero = true;
    f.a = 0.0;
    return f;
}

} // namespace spdelab
