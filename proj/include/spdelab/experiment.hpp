#pragma once

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <algorithm>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "spdelab/config.hpp"
#include "spdelab/deviations.hpp"
#include "spdelab/dynamics.hpp"
#include "spdelab/io.hpp"
#include "spdelab/ldp.hpp"
#include "spdelab/mesh.hpp"
#include "spdelab/montecarlo.hpp"
#include "spdelab/noise.hpp"
#include "spdelab/nonlinearity.hpp"
#include "spdelab/operators.hpp"

namespace spdelab {

inline constexpr const char* kToolVersion = "0.1.0";

struct RunOptions {
    std::optional<std::size_t> workers;
    std::optional<std::string> output_dir;
    bool dump_operators = false;
};

struct Check {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct RunOutcome {
    int exit_code = 0;
    bool degraded = false;
    std::filesystem::path output_dir;
    std::vector<Check> checks;
    std::vector<std::pair<std::string, std::string>> files; ///< relative name, FNV-1a hash
    nlohmann::json manifest;
};

// ---- building blocks from a spec ------------------------------------------

inline SpatialMesh build_mesh(const ExperimentSpec& s) {
    if (s.mesh.dimension == 2) return build_rectangle_mesh(s.mesh.nx, s.mesh.ny, s.mesh.lx, s.mesh.ly);
    return build_interval_mesh(s.mesh.nodes, s.mesh.length);
}

inline std::shared_ptr<const DiscreteOperator> build_operators(const ExperimentSpec& s) {
    return std::make_shared<const DiscreteOperator>(assemble_operators(build_mesh(s), s.mesh.lumped_mass));
}

inline CovarianceSpec build_covariance(const ExperimentSpec& s) {
    CovarianceSpec c;
    c.interior_eigenvalues = power_law_spectrum(s.noise.q1_scale, s.noise.q1_exponent, s.noise.modes);
    c.boundary_eigenvalues = s.mesh.dimension == 2 ? power_law_spectrum(s.noise.q2, s.noise.q2_exponent, s.noise.boundary_modes)
                                                   : std::vector<double>{s.noise.q2};
    c.sigma1 = s.noise.sigma1;
    c.sigma2 = s.noise.sigma2;
    c.tail_tol = s.noise.tail_tol;
    return c;
}

inline SystemConfig build_system(const ExperimentSpec& s, const DiscreteOperator& op) {
    SystemConfig c;
    c.epsilon = s.system.epsilon;
    c.T = s.system.T;
    c.dt = s.system.dt;
    c.f = s.system.zero_forcing ? make_zero_nonlinearity() : make_nonlinearity(s.system.f_a, s.system.f_b, s.system.f_c);
    c.noise = build_covariance(s);
    c.initial = s.system.initial == "zero" ? Vector::Zero(static_cast<Eigen::Index>(op.mesh.node_count()))
                                           : default_initial_state(op.mesh);
    c.blowup_threshold = s.system.blowup_threshold;
    return c;
}

inline EnsembleConfig build_ensemble(const ExperimentSpec& s, std::shared_ptr<const DiscreteOperator> op, std::size_t workers) {
    EnsembleConfig e;
    e.base = build_system(s, *op);
    e.op = std::move(op);
    e.eps_grid = s.ensemble.eps_grid;
    e.n_paths = s.ensemble.n_paths;
    e.master_seed = s.seed;
    e.quantities.clear();
    for (const auto& q : s.ensemble.quantities) e.quantities.push_back(parse_quantity(q));
    e.kappa = s.ldp.kappa;
    e.workers = workers;
    return e;
}

/// Seed of the calibration pilot, independent of the main ensemble's streams.
inline std::uint64_t pilot_seed(std::uint64_t seed) { return detail::mix64(seed ^ 0x5bd1e9955bd1e995ULL); }

// ---- CSV renderers ---------------------------------------------------------

inline std::string raw_csv(const EnsembleStats& st) {
    std::vector<std::string> header{"eps", "path_index", "status", "failure_step"};
    for (auto q : st.quantities) header.push_back(to_string(q));
    CsvWriter csv(header);
    for (std::size_t e = 0; e < st.eps_grid.size(); ++e) {
        for (std::size_t p = 0; p < st.n_paths; ++p) {
            const auto& r = st.raw[e][p];
            std::vector<std::string> row{format_double(st.eps_grid[e]), std::to_string(p), r.ok ? "ok" : "failed",
                                         r.failure_step ? std::to_string(*r.failure_step) : ""};
            for (std::size_t q = 0; q < st.quantities.size(); ++q) row.push_back(r.ok ? format_double(r.values[q]) : "nan");
            csv.row(row);
        }
    }
    return csv.str();
}

inline std::string aggregate_csv(const EnsembleStats& st) {
    CsvWriter csv{"quantity", "eps", "mean", "variance", "stderr", "skewness", "n_success", "n_failed"};
    for (std::size_t q = 0; q < st.quantities.size(); ++q) {
        for (std::size_t e = 0; e < st.eps_grid.size(); ++e) {
            const auto& s = st.stats[e][q];
            csv.row({to_string(st.quantities[q]), format_double(st.eps_grid[e]), format_double(s.summary.mean),
                     format_double(s.summary.variance), format_double(s.summary.std_error), format_double(s.summary.skewness),
                     std::to_string(s.summary.n), std::to_string(s.n_failed)});
        }
    }
    return csv.str();
}

inline std::string tail_csv(const std::vector<TailRow>& rows, double kappa, double delta) {
    CsvWriter csv{"eps", "kappa", "delta", "n_success", "exceedances", "p_hat", "p_lo", "p_hi",
                  "scaled", "scaled_lo", "scaled_hi", "usable", "sufficient"};
    for (const auto& r : rows)
        csv.row({format_double(r.eps), format_double(kappa), format_double(delta), std::to_string(r.n_success),
                 std::to_string(r.exceedances), format_double(r.p_hat), format_double(r.p_ci.lo), format_double(r.p_ci.hi),
                 format_double(r.scaled), format_double(r.scaled_ci.lo), format_double(r.scaled_ci.hi),
                 r.usable ? "1" : "0", r.sufficient ? "1" : "0"});
    return csv.str();
}

/// time, thinned nodal values, Gamma1 trace, |z|^2_{X0}, u'Ku.
inline std::string path_csv(const PathRecord& path, const DiscreteOperator& op, std::size_t stride) {
    std::vector<std::size_t> nodes;
    const std::size_t n = op.mesh.node_count();
    for (std::size_t i = 0; i < n; i += stride) nodes.push_back(i);
    if (nodes.back() != n - 1) nodes.push_back(n - 1);
    std::vector<std::string> header{"time"};
    for (auto i : nodes) header.push_back("u_" + std::to_string(i));
    header.insert(header.end(), {"trace", "x0_norm_sq", "h1_seminorm_sq"});
    CsvWriter csv(header);
    for (std::size_t k = 0; k < path.size(); ++k) {
        std::vector<std::string> row{format_double(path.times[k])};
        for (auto i : nodes) row.push_back(format_double(path.states[k][static_cast<Eigen::Index>(i)]));
        row.push_back(format_double(path.traces[k]));
        row.push_back(format_double(path.energy_log[k].x0_norm_sq));
        row.push_back(format_double(path.energy_log[k].h1_seminorm_sq));
        csv.row(row);
    }
    return csv.str();
}

// ---- recipe runner ---------------------------------------------------------

namespace detail {

class Run {
public:
    Run(const ExperimentSpec& spec, const RunOptions& opts) : spec_(spec) {
        out_.output_dir = opts.output_dir ? std::filesystem::path(*opts.output_dir) : std::filesystem::path(spec.output_dir);
        workers_ = opts.workers ? *opts.workers : spec.ensemble.workers;
        if (workers_ < 1) throw ConfigError("--workers must be >= 1");
        dump_ = opts.dump_operators;
    }

    RunOutcome execute() {
        const auto start = std::chrono::steady_clock::now();
        std::filesystem::create_directories(out_.output_dir);
        op_ = build_operators(spec_);
        if (dump_) dump_operators(*op_, out_.output_dir / "operators");

        switch (spec_.recipe) {
        case Recipe::reduction:
        case Recipe::normal_deviation: ensemble_recipe(); break;
        case Recipe::ldp_tail: ldp_recipe(); break;
        case Recipe::rate_function: rate_recipe(); break;
        case Recipe::diagnostics: diagnostics_recipe(); break;
        }

        bool ok = !out_.degraded;
        for (const auto& c : out_.checks) ok = ok && c.passed;
        out_.exit_code = ok ? 0 : 1;
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        write_manifest(wall);
        return out_;
    }

private:
    void file(const std::string& name, const std::string& content) {
        out_.files.emplace_back(name, write_text_file(out_.output_dir / name, content));
    }

    void check(std::string name, bool passed, std::string detail) {
        out_.checks.push_back({std::move(name), passed, std::move(detail)});
    }

    void record_noise_hashes(const EnsembleStats& st) {
        bool coupled = true;
        for (std::size_t p = 0; p < st.n_paths; ++p) {
            noise_hashes_.push_back(st.raw[0][p].noise_hash);
            for (std::size_t e = 1; e < st.eps_grid.size(); ++e) {
                const auto& h = st.raw[e][p].noise_hash;
                if (st.raw[e][p].ok && st.raw[0][p].ok && h != st.raw[0][p].noise_hash) coupled = false;
            }
        }
        check("noise_coupling", coupled, "all epsilon values consume identical increments per path");
    }

    void save_paths(const EnsembleConfig& cfg) {
        const std::size_t count = std::min(spec_.ensemble.save_paths, cfg.n_paths);
        if (count == 0) return;
        const Sampler sampler(cfg.base.noise, op_->mesh);
        for (std::size_t e = 0; e < cfg.eps_grid.size(); ++e) {
            SystemConfig sc = cfg.base;
            sc.epsilon = cfg.eps_grid[e];
            const Dynamics dyn(op_, sc);
            for (std::size_t p = 0; p < count; ++p) {
                const auto paths = simulate_coupled(dyn, stream_source(sampler, sc.dt, coupled_streams(cfg.master_seed, p)),
                                                    {true, e == 0, false});
                const std::string tag = "eps" + std::to_string(e) + "_path" + std::to_string(p);
                file("paths/full_" + tag + ".csv", path_csv(paths.full, *op_, spec_.ensemble.path_stride));
                if (e == 0)
                    file("paths/effective_path" + std::to_string(p) + ".csv",
                         path_csv(paths.effective, *op_, spec_.ensemble.path_stride));
            }
        }
    }

    void ensemble_recipe() {
        const auto cfg = build_ensemble(spec_, op_, workers_);
        const auto st = run_ensemble_unchecked(cfg);
        out_.degraded = st.degraded;
        record_noise_hashes(st);
        file("raw.csv", raw_csv(st));
        file("aggregate.csv", aggregate_csv(st));

        CsvWriter fit{"quantity", "slope", "intercept", "r_squared", "n_points"};
        for (auto q : st.quantities) {
            try {
                const auto f = fit_rate(st, q);
                fit.row({to_string(q), format_double(f.slope), format_double(f.intercept), format_double(f.r_squared),
                         std::to_string(f.residuals.size())});
                fits_[to_string(q)] = {{"slope", f.slope}, {"intercept", f.intercept}, {"r_squared", f.r_squared}};
            } catch (const InsufficientDataError& e) {
                fits_[to_string(q)] = {{"error", e.what()}};
            }
        }
        file("fit.csv", fit.str());
        save_paths(cfg);

        if (spec_.recipe == Recipe::normal_deviation) {
            const auto it = std::find(cfg.quantities.begin(), cfg.quantities.end(), Quantity::deviation_gap);
            if (it != cfg.quantities.end()) {
                const auto qi = st.quantity_index(Quantity::deviation_gap);
                bool monotone = true;
                for (std::size_t e = 1; e < st.eps_grid.size(); ++e)
                    monotone = monotone && st.stats[e][qi].summary.mean < st.stats[e - 1][qi].summary.mean;
                check("deviation_gap_decreasing", monotone, "mean deviation gap decreases as epsilon decreases");
            }
        }
        for (auto q : st.quantities) {
            bool finite = true;
            for (std::size_t e = 0; e < st.eps_grid.size(); ++e)
                finite = finite && std::isfinite(st.stats[e][st.quantity_index(q)].summary.mean);
            check("finite_" + to_string(q), finite, "aggregate means are finite");
        }
    }

    void ldp_recipe() {
        auto cfg = build_ensemble(spec_, op_, workers_);
        cfg.quantities = {Quantity::kappa_deviation};
        double delta = 0.0;
        if (spec_.ldp.delta) {
            delta = *spec_.ldp.delta;
        } else {
            auto pilot = cfg;
            pilot.master_seed = pilot_seed(spec_.seed);
            pilot.n_paths = spec_.ldp.calibration_paths;
            delta = calibrate_delta(pilot, spec_.ldp.calibration_probability);
            summary_["delta_calibrated"] = true;
            summary_["pilot_seed"] = pilot.master_seed;
        }
        summary_["delta"] = delta;
        const auto st = run_ensemble_unchecked(cfg);
        out_.degraded = st.degraded;
        record_noise_hashes(st);
        file("raw.csv", raw_csv(st));
        file("aggregate.csv", aggregate_csv(st));
        const auto rows = tail_table(st, spec_.ldp.kappa, delta, spec_.ldp.level);
        file("tail.csv", tail_csv(rows, spec_.ldp.kappa, delta));

        bool sufficient = true;
        for (const auto& r : rows) sufficient = sufficient && r.sufficient;
        check("tail_exceedances", sufficient, "at least 10 exceedances at every epsilon");
        bool overlap = sufficient;
        for (std::size_t i = 1; overlap && i < rows.size(); ++i) overlap = rows[i].scaled_ci.overlaps(rows[i - 1].scaled_ci);
        check("tail_scaling_overlap", overlap, "scaled log-probability intervals overlap across epsilon");
    }

    void rate_recipe() {
        SystemConfig sc = build_system(spec_, *op_);
        const Dynamics dyn(op_, sc);
        const Sampler sampler(sc.noise, op_->mesh);
        const auto u = simulate_path(dyn, sampler, coupled_streams(spec_.seed, 0), SystemKind::effective);
        if (u.failed) throw PathFailure(*u.failure_step, "effective path failed; rate function undefined");
        const ControlMap map(dyn, u);

        Eigen::MatrixXd w_bar(static_cast<Eigen::Index>(map.control_rows()), static_cast<Eigen::Index>(map.steps()));
        for (std::size_t k = 0; k < map.steps(); ++k) {
            const double t = static_cast<double>(k + 1) * sc.dt;
            const double v = spec_.rate.target_control == "constant" ? 1.0 : std::sin(std::numbers::pi * t / sc.T);
            w_bar.col(static_cast<Eigen::Index>(k)).setConstant(spec_.rate.target_amplitude * v);
        }
        const RateGeometry geo(map, spec_.noise.q2);
        const Eigen::MatrixXd y = map.apply(w_bar);

        RateProblem prob;
        prob.target = y;
        prob.q2 = spec_.noise.q2;
        prob.tolerance = spec_.rate.tolerance;
        prob.M_bound = spec_.rate.M_bound;
        const auto res = rate_function(map, prob);
        prob.target = 2.0 * y;
        prob.tolerance = 2.0 * spec_.rate.tolerance;
        const auto res2 = rate_function(map, prob);
        const double mismatch = transpose_mismatch(map, spec_.seed);

        CsvWriter rate{"target_scale", "value", "residual", "iterations", "reference_cost", "within_ball"};
        rate.row({"1", format_double(res.value), format_double(res.residual), std::to_string(res.iterations),
                  format_double(geo.cost(w_bar)), res.within_ball ? "1" : "0"});
        rate.row({"2", format_double(res2.value), format_double(res2.residual), std::to_string(res2.iterations),
                  format_double(geo.cost(2.0 * w_bar)), res2.within_ball ? "1" : "0"});
        file("rate.csv", rate.str());

        std::vector<std::string> header{"time"};
        for (auto b : op_->boundary_nodes) header.push_back("w_" + std::to_string(b));
        CsvWriter control(header);
        for (std::size_t k = 0; k < map.steps(); ++k) {
            std::vector<std::string> row{format_double(static_cast<double>(k + 1) * sc.dt)};
            for (Eigen::Index b = 0; b < res.w_star.rows(); ++b) row.push_back(format_double(res.w_star(b, static_cast<Eigen::Index>(k))));
            control.row(row);
        }
        file("control.csv", control.str());

        summary_["rate_value"] = res.value;
        summary_["transpose_mismatch"] = mismatch;
        check("transpose_test", mismatch < 1e-8, "relative dot-product mismatch " + format_double(mismatch));
        check("rate_feasible", res.residual <= spec_.rate.tolerance, "residual " + format_double(res.residual));
        check("rate_minimal", res.value <= geo.cost(w_bar) * (1.0 + 1e-6),
              "I(y) does not exceed the cost of the generating control");
        const double ratio = res.value > 0.0 ? res2.value / res.value : 0.0;
        check("rate_quadratic", std::abs(ratio - 4.0) <= 1e-4, "I(2y)/I(y) = " + format_double(ratio));
    }

    void diagnostics_recipe() {
        CsvWriter csv{"name", "value"};
        auto put = [&](const std::string& n, double v) {
            csv.row({n, format_double(v)});
            summary_[n] = v;
        };
        const auto co = coercivity_diagnostics(*op_);
        put("coercivity_alpha", co.alpha);
        put("coercivity_beta", co.beta);
        put("boundedness_constant", boundedness_constant(*op_));
        const auto ev = robin_eigenvalues(*op_);
        put("robin_lambda_min", ev.minCoeff());
        check("coercive", co.alpha > 0.0, "alpha = " + format_double(co.alpha));

        SystemConfig sc = build_system(spec_, *op_);
        const Sampler sampler(sc.noise, op_->mesh);
        const auto& tr = sampler.trace_check();
        put("trace_q1_partial", tr.trace_partial);
        put("trace_q1_exponent", tr.trace_exponent);
        put("trace_q1_tail", tr.trace_tail);
        put("trace_sqrt_a_q1_partial", tr.sqrt_a_partial);
        put("trace_sqrt_a_q1_exponent", tr.sqrt_a_exponent);
        put("trace_sqrt_a_q1_tail", tr.sqrt_a_tail);
        put("trace_q2", tr.boundary_trace);

        const auto& f = sc.f;
        put("f_a1", f.a1);
        put("f_b1", f.b1);
        put("f_b_tilde", f.b_tilde);

        // Neumann map: linearity in g and positivity of the solve.
        Vector g1 = Vector::Ones(static_cast<Eigen::Index>(op_->boundary_count()));
        Vector g2 = Vector::LinSpaced(static_cast<Eigen::Index>(op_->boundary_count()), 0.5, 1.5);
        const double r = 1.0;
        const Vector y1 = neumann_map(*op_, r, g1), y2 = neumann_map(*op_, r, g2), y12 = neumann_map(*op_, r, 2.0 * g1 - 3.0 * g2);
        const double lin = (y12 - (2.0 * y1 - 3.0 * y2)).norm() / std::max(y12.norm(), 1e-300);
        put("neumann_linearity_error", lin);
        check("neumann_linear", lin < 1e-10, "relative linearity error " + format_double(lin));

        const Dynamics dyn(op_, sc);
        const auto u = simulate_path(dyn, sampler, coupled_streams(spec_.seed, 0), SystemKind::effective);
        if (!u.failed) {
            const ControlMap map(dyn, u);
            const double mismatch = transpose_mismatch(map, spec_.seed);
            put("transpose_mismatch", mismatch);
            check("transpose_test", mismatch < 1e-8, "relative dot-product mismatch " + format_double(mismatch));
        } else {
            check("transpose_test", false, "effective path failed");
        }
        file("diagnostics.csv", csv.str());
    }

    void write_manifest(double wall) {
        using nlohmann::json;
        const std::string cfg_text = serialize_config(spec_);
        json m;
        m["tool"] = "spdelab";
        m["version"] = kToolVersion;
        m["recipe"] = to_string(spec_.recipe);
        m["seed"] = spec_.seed;
        m["config_hash"] = fnv1a_hex(cfg_text);
        m["config"] = cfg_text;
        m["applied_defaults"] = spec_.applied_defaults;
        m["workers"] = workers_;
        m["wall_clock_seconds"] = wall;
        const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        char stamp[32];
        std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
        m["finished_utc"] = stamp;
        json files = json::array();
        for (const auto& [name, hash] : out_.files) files.push_back({{"name", name}, {"fnv1a", hash}});
        m["files"] = files;
        m["noise_hashes"] = noise_hashes_;
        json checks = json::array();
        for (const auto& c : out_.checks) checks.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
        m["checks"] = checks;
        m["degraded"] = out_.degraded;
        if (!fits_.empty()) m["fits"] = fits_;
        if (!summary_.empty()) m["summary"] = summary_;
        if (dump_) m["operators_dir"] = "operators";
        m["exit_code"] = out_.exit_code;
        out_.manifest = m;
        write_text_file(out_.output_dir / "manifest.json", m.dump(2) + "\n");
    }

    const ExperimentSpec& spec_;
    RunOutcome out_;
    std::size_t workers_ = 1;
    bool dump_ = false;
    std::shared_ptr<const DiscreteOperator> op_;
    std::vector<std::string> noise_hashes_;
    nlohmann::json fits_ = nlohmann::json::object();
    nlohmann::json summary_ = nlohmann::json::object();
};

} // namespace detail

/// Runs one recipe, writes its CSVs and manifest.json into the output
/// directory. exit_code is 0 iff no ensemble degraded and every check passed.
inline RunOutcome run_experiment(const ExperimentSpec& spec, const RunOptions& opts = {}) {
    return detail::Run(spec, opts).execute();
}

} // namespace spdelab
