#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "spdelab/deviations.hpp"
#include "spdelab/dynamics.hpp"
#include "spdelab/error.hpp"
#include "spdelab/noise.hpp"
#include "spdelab/statistics.hpp"

namespace spdelab {

/// Per-path functionals an ensemble can evaluate.
enum class Quantity {
    error_l2l2_sq,   ///< ||u_eps - u||^2_{L2(0,T;L2)}
    sup_energy,      ///< sup_t |z_eps|^2_{X0}
    h1_integral,     ///< int u_eps' K u_eps dt
    deviation_gap,   ///< ||eps^-1/2 (u_eps - u) - v||
    limit_norm,      ///< ||v||
    kappa_deviation, ///< ||eps^-kappa (u_eps - u)||
};

inline const std::vector<std::pair<Quantity, std::string>>& quantity_names() {
    static const std::vector<std::pair<Quantity, std::string>> names{
        {Quantity::error_l2l2_sq, "error_l2l2_sq"}, {Quantity::sup_energy, "sup_energy"},
        {Quantity::h1_integral, "h1_integral"},     {Quantity::deviation_gap, "deviation_gap"},
        {Quantity::limit_norm, "limit_norm"},       {Quantity::kappa_deviation, "kappa_deviation"},
    };
    return names;
}

inline std::string to_string(Quantity q) {
    for (const auto& [k, v] : quantity_names())
        if (k == q) return v;
    return "?";
}

inline Quantity parse_quantity(const std::string& s) {
    for (const auto& [k, v] : quantity_names())
        if (v == s) return k;
    throw ConfigError("unknown quantity '" + s + "'");
}

struct EnsembleConfig {
    SystemConfig base;
    std::shared_ptr<const DiscreteOperator> op;
    std::vector<double> eps_grid; ///< strictly decreasing, in (0,1]
    std::size_t n_paths = 1;
    std::uint64_t master_seed = 0;
    std::vector<Quantity> quantities{Quantity::error_l2l2_sq};
    double kappa = 0.25; ///< used by Quantity::kappa_deviation
    std::size_t workers = 1;

    void validate() const {
        if (!op) throw ConfigError("ensemble: operators not set");
        if (eps_grid.empty()) throw ConfigError("ensemble: eps_grid is empty");
        for (std::size_t i = 0; i < eps_grid.size(); ++i) {
            if (!(eps_grid[i] > 0.0 && eps_grid[i] <= 1.0)) throw ConfigError("ensemble: epsilon out of (0,1]");
            if (i > 0 && !(eps_grid[i] < eps_grid[i - 1])) throw ConfigError("ensemble: eps_grid must be strictly decreasing");
        }
        if (n_paths < 1) throw ConfigError("ensemble: n_paths must be >= 1");
        if (quantities.empty()) throw ConfigError("ensemble: no quantities requested");
        if (!(kappa > 0.0 && kappa <= 0.5)) throw ConfigError("ensemble: kappa must lie in (0, 1/2]");
    }
};

/// Raw result of one (eps, path) task.
struct PathResult {
    bool ok = false;
    std::optional<std::size_t> failure_step;
    std::vector<double> values; ///< one per requested quantity
    std::string noise_hash;
};

struct QuantityStats {
    SampleSummary summary;
    std::size_t n_failed = 0;
};

struct EnsembleStats {
    std::vector<double> eps_grid;
    std::vector<Quantity> quantities;
    std::size_t n_paths = 0;
    /// raw[e][p]
    std::vector<std::vector<PathResult>> raw;
    /// stats[e][q]
    std::vector<std::vector<QuantityStats>> stats;
    bool degraded = false;

    std::size_t quantity_index(Quantity q) const {
        for (std::size_t i = 0; i < quantities.size(); ++i)
            if (quantities[i] == q) return i;
        throw ConfigError("quantity '" + to_string(q) + "' was not evaluated by this ensemble");
    }

    std::size_t failures(std::size_t e) const {
        return static_cast<std::size_t>(std::count_if(raw[e].begin(), raw[e].end(), [](const auto& r) { return !r.ok; }));
    }
};

namespace detail {

inline bool needs_limit(const std::vector<Quantity>& qs) {
    return std::find(qs.begin(), qs.end(), Quantity::deviation_gap) != qs.end() ||
           std::find(qs.begin(), qs.end(), Quantity::limit_norm) != qs.end();
}

inline PathResult evaluate_path(const Dynamics& dyn, const Sampler& sampler, const EnsembleConfig& cfg, std::size_t path) {
    const auto stream = coupled_streams(cfg.master_seed, path);
    const bool limit = needs_limit(cfg.quantities);
    auto paths = simulate_coupled(dyn, stream_source(sampler, dyn.config().dt, stream), {true, true, limit});
    PathResult res;
    res.noise_hash = paths.full.noise_hash;
    if (paths.full.failed || paths.effective.failed || (limit && paths.limit.failed)) {
        res.ok = false;
        for (const auto* p : {&paths.full, &paths.effective, &paths.limit})
            if (p->failed) res.failure_step = res.failure_step ? std::min(*res.failure_step, *p->failure_step) : *p->failure_step;
        return res;
    }
    const auto& op = dyn.op();
    const double eps = dyn.epsilon();
    for (auto q : cfg.quantities) {
        double v = 0.0;
        switch (q) {
        case Quantity::error_l2l2_sq: {
            const double d = deviation_path(paths.full, paths.effective, eps, 0.0, op).norm_L2L2;
            v = d * d;
            break;
        }
        case Quantity::sup_energy:
            for (const auto& e : paths.full.energy_log) v = std::max(v, e.x0_norm_sq);
            break;
        case Quantity::h1_integral:
            for (std::size_t k = 0; k + 1 < paths.full.size(); ++k)
                v += 0.5 * (paths.full.times[k + 1] - paths.full.times[k]) *
                     (paths.full.energy_log[k].h1_seminorm_sq + paths.full.energy_log[k + 1].h1_seminorm_sq);
            break;
        case Quantity::deviation_gap:
            v = normal_deviation_gap(paths.full, paths.effective, paths.limit, eps, op);
            break;
        case Quantity::limit_norm:
            v = l2l2_norm(op, paths.limit);
            break;
        case Quantity::kappa_deviation:
            v = deviation_path(paths.full, paths.effective, eps, cfg.kappa, op).norm_L2L2;
            break;
        }
        res.values.push_back(v);
    }
    res.ok = true;
    return res;
}

} // namespace detail

/// Runs every (eps, path) task on a bounded worker pool and aggregates in
/// path order, so the result does not depend on the worker count. Degraded
/// ensembles (more than half the paths failed at some eps) are flagged, not
/// thrown; see run_ensemble for the checked variant.
inline EnsembleStats run_ensemble_unchecked(const EnsembleConfig& cfg) {
    cfg.validate();
    const Sampler sampler(cfg.base.noise, cfg.op->mesh);
    std::vector<std::unique_ptr<Dynamics>> dyn;
    for (double eps : cfg.eps_grid) {
        SystemConfig sc = cfg.base;
        sc.epsilon = eps;
        dyn.push_back(std::make_unique<Dynamics>(cfg.op, sc));
    }

    EnsembleStats out;
    out.eps_grid = cfg.eps_grid;
    out.quantities = cfg.quantities;
    out.n_paths = cfg.n_paths;
    out.raw.assign(cfg.eps_grid.size(), std::vector<PathResult>(cfg.n_paths));

    const std::size_t n_tasks = cfg.eps_grid.size() * cfg.n_paths;
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&] {
        for (;;) {
            const std::size_t t = next.fetch_add(1);
            if (t >= n_tasks) return;
            const std::size_t e = t / cfg.n_paths, p = t % cfg.n_paths;
            try {
                out.raw[e][p] = detail::evaluate_path(*dyn[e], sampler, cfg, p);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
                next.store(n_tasks);
            }
        }
    };
    const std::size_t n_workers = std::max<std::size_t>(1, std::min(cfg.workers, n_tasks));
    {
        std::vector<std::jthread> pool;
        for (std::size_t i = 0; i < n_workers; ++i) pool.emplace_back(worker);
    }
    if (error) std::rethrow_exception(error);

    out.stats.resize(cfg.eps_grid.size());
    for (std::size_t e = 0; e < cfg.eps_grid.size(); ++e) {
        const std::size_t failed = out.failures(e);
        if (2 * failed > cfg.n_paths) out.degraded = true;
        for (std::size_t q = 0; q < cfg.quantities.size(); ++q) {
            std::vector<double> xs;
            for (const auto& r : out.raw[e])
                if (r.ok) xs.push_back(r.values[q]);
            out.stats[e].push_back({summarize(xs), failed});
        }
    }
    return out;
}

inline EnsembleStats run_ensemble(const EnsembleConfig& cfg) {
    auto stats = run_ensemble_unchecked(cfg);
    if (stats.degraded) throw DegradedEnsembleError("ensemble degraded: more than 50% of paths failed at some epsilon");
    return stats;
}

/// Log-log regression of the per-eps mean of `q` against eps.
inline RateFit fit_rate(const EnsembleStats& stats, Quantity q) {
    const auto qi = stats.quantity_index(q);
    std::vector<double> x, y;
    for (std::size_t e = 0; e < stats.eps_grid.size(); ++e) {
        const auto& s = stats.stats[e][qi].summary;
        if (s.n == 0) continue;
        x.push_back(stats.eps_grid[e]);
        y.push_back(s.mean);
    }
    return fit_loglog(x, y);
}

/// Normal-approximation interval of the mean of `q`, one per eps.
inline std::vector<Interval> confidence_interval(const EnsembleStats& stats, Quantity q, double level) {
    const auto qi = stats.quantity_index(q);
    std::vector<Interval> out;
    for (std::size_t e = 0; e < stats.eps_grid.size(); ++e) out.push_back(normal_interval(stats.stats[e][qi].summary, level));
    return out;
}

} // namespace spdelab
