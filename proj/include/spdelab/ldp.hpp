#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "spdelab/montecarlo.hpp"
#include "spdelab/statistics.hpp"

namespace spdelab {

/// One row of the tail-scaling table for P(||v^kappa_eps|| >= delta).
struct TailRow {
    double eps = 0.0;
    std::size_t n_success = 0;
    std::size_t exceedances = 0;
    double p_hat = 0.0;
    Interval p_ci;
    double scaled = 0.0; ///< -eps^(1-2 kappa) log p_hat
    Interval scaled_ci;
    bool usable = false;     ///< at least one exceedance
    bool sufficient = false; ///< at least 10 exceedances
};

/// Tail table from an ensemble that evaluated Quantity::kappa_deviation.
inline std::vector<TailRow> tail_table(const EnsembleStats& stats, double kappa, double delta, double level = 0.95) {
    if (!(kappa > 0.0 && kappa < 0.5)) throw ConfigError("ldp: kappa must lie in (0, 1/2)");
    if (!(delta >= 0.0)) throw ConfigError("ldp: delta must be non-negative");
    const auto qi = stats.quantity_index(Quantity::kappa_deviation);
    std::vector<TailRow> rows;
    for (std::size_t e = 0; e < stats.eps_grid.size(); ++e) {
        TailRow row;
        row.eps = stats.eps_grid[e];
        for (const auto& r : stats.raw[e]) {
            if (!r.ok) continue;
            ++row.n_success;
            if (r.values[qi] >= delta) ++row.exceedances;
        }
        row.usable = row.exceedances > 0;
        row.sufficient = row.exceedances >= 10;
        const double speed = std::pow(row.eps, 1.0 - 2.0 * kappa);
        auto scale = [&](double p) {
            if (p <= 0.0) return std::numeric_limits<double>::infinity();
            return p >= 1.0 ? 0.0 : -speed * std::log(p);
        };
        if (row.n_success > 0) {
            row.p_hat = static_cast<double>(row.exceedances) / static_cast<double>(row.n_success);
            row.p_ci = wilson_interval(row.exceedances, row.n_success, level);
            row.scaled_ci = {scale(row.p_ci.hi), scale(row.p_ci.lo)};
        }
        row.scaled = row.usable ? scale(row.p_hat) : std::numeric_limits<double>::quiet_NaN();
        rows.push_back(row);
    }
    return rows;
}

/// Monte Carlo estimate of the scaled log tail probability at each eps.
/// `cfg` must request Quantity::kappa_deviation; its kappa is used.
inline std::vector<TailRow> ldp_tail_scaling(EnsembleConfig cfg, double delta, double level = 0.95) {
    if (!(cfg.kappa > 0.0 && cfg.kappa < 0.5)) throw ConfigError("ldp: kappa must lie in (0, 1/2)");
    if (!(delta >= 0.0)) throw ConfigError("ldp: delta must be non-negative");
    cfg.quantities = {Quantity::kappa_deviation};
    const auto stats = run_ensemble(cfg);
    return tail_table(stats, cfg.kappa, delta, level);
}

/// delta such that a fraction `target_p` of the pilot paths exceed it at
/// the first eps of `pilot` (empirical upper quantile).
inline double calibrate_delta(EnsembleConfig pilot, double target_p) {
    if (!(target_p > 0.0 && target_p < 1.0)) throw ConfigError("ldp: calibration probability must lie in (0,1)");
    pilot.quantities = {Quantity::kappa_deviation};
    pilot.eps_grid.resize(1);
    const auto stats = run_ensemble(pilot);
    std::vector<double> xs;
    for (const auto& r : stats.raw[0])
        if (r.ok) xs.push_back(r.values[0]);
    if (xs.empty()) throw InsufficientDataError("ldp: calibration pilot produced no successful paths");
    std::sort(xs.begin(), xs.end());
    const auto idx = static_cast<std::size_t>(std::floor((1.0 - target_p) * static_cast<double>(xs.size())));
    return xs[std::min(idx, xs.size() - 1)];
}

} // namespace spdelab
