#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Sparse>

#include "spdelab/error.hpp"
#include "spdelab/noise.hpp"
#include "spdelab/nonlinearity.hpp"
#include "spdelab/operators.hpp"

namespace spdelab {

/// Nodal field at a given time. Dirichlet nodes are always 0.
struct FieldState {
    Vector values;
    double time = 0.0;
};

struct SystemConfig {
    double epsilon = 0.1;
    double T = 1.0;
    double dt = 1e-3;
    Nonlinearity f = make_nonlinearity(1.0, 0.0, 0.0);
    CovarianceSpec noise = default_covariance();
    /// Nodal initial condition; empty selects sin(pi x / 2L) (times sin(pi y / Ly) in 2D).
    Vector initial;
    double blowup_threshold = 1e6;

    std::size_t step_count() const { return static_cast<std::size_t>(std::llround(T / dt)); }

    void validate() const {
        if (!(epsilon > 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon out of (0,1]: require 0 < epsilon <= 1");
        if (!(T > 0.0)) throw ConfigError("T must be positive");
        if (!(dt > 0.0 && dt < T)) throw ConfigError("dt must satisfy 0 < dt < T");
        if (std::abs(static_cast<double>(step_count()) * dt - T) > 1e-9 * T)
            throw ConfigError("T must be an integer multiple of dt");
        if (!(blowup_threshold > 0.0)) throw ConfigError("blowup_threshold must be positive");
    }
};

/// Default initial condition, vanishing on Gamma2.
inline Vector default_initial_state(const SpatialMesh& mesh) {
    Vector u(static_cast<Eigen::Index>(mesh.node_count()));
    for (std::size_t i = 0; i < mesh.node_count(); ++i) {
        const auto& p = mesh.nodes[i];
        double v = std::sin(std::numbers::pi * p[0] / (2.0 * mesh.extent[0]));
        if (mesh.dimension == 2) v *= std::sin(std::numbers::pi * p[1] / mesh.extent[1]);
        u[static_cast<Eigen::Index>(i)] = mesh.boundary_tags[i] == BoundaryTag::Gamma2 ? 0.0 : v;
    }
    return u;
}

/// Per-step energy diagnostics.
struct EnergyEntry {
    double x0_norm_sq = 0.0;    ///< u'Mu + eps u'Bu
    double h1_seminorm_sq = 0.0; ///< u'Ku
};

enum class SystemKind { full, effective, deviation_limit };

inline const char* to_string(SystemKind k) {
    switch (k) {
    case SystemKind::full: return "full";
    case SystemKind::effective: return "effective";
    case SystemKind::deviation_limit: return "deviation_limit";
    }
    return "?";
}

struct PathRecord {
    SystemKind kind = SystemKind::full;
    double epsilon = 0.0; ///< 0 for the effective and limit systems
    std::vector<double> times;
    std::vector<Vector> states; ///< nodal values
    std::vector<double> traces;
    std::vector<EnergyEntry> energy_log;
    std::vector<NoiseIncrement> increments; ///< filled when logging is requested
    bool failed = false;
    std::optional<std::size_t> failure_step;
    std::string noise_hash;

    std::size_t size() const { return times.size(); }
};

using IncrementSource = std::function<NoiseIncrement(std::size_t step)>;

/// Semi-implicit Euler-Maruyama steppers for the full, effective,
/// normal-deviation-limit and controlled systems on one set of operators.
///
/// Implicit in the stiff linear part, explicit in f and the noise. The
/// implicit matrices are factorized once; the object is immutable and may be
/// shared across threads.
class Dynamics {
public:
    Dynamics(std::shared_ptr<const DiscreteOperator> op, SystemConfig cfg) : op_(std::move(op)), cfg_(std::move(cfg)) {
        cfg_.validate();
        if (cfg_.initial.size() == 0) cfg_.initial = default_initial_state(op_->mesh);
        if (static_cast<std::size_t>(cfg_.initial.size()) != op_->mesh.node_count())
            throw ConfigError("initial state size does not match the mesh");
        for (auto d : op_->dirichlet_dofs) cfg_.initial[static_cast<Eigen::Index>(d)] = 0.0;

        const SparseMatrix stiff = op_->K_free + op_->R_free;
        full_mass_ = op_->M_free + cfg_.epsilon * op_->B_free;
        factorize(full_solver_, full_mass_ + cfg_.dt * stiff, "full");
        factorize(effective_solver_, SparseMatrix(op_->M_free + cfg_.dt * stiff), "effective");
    }

    const DiscreteOperator& op() const { return *op_; }
    std::shared_ptr<const DiscreteOperator> op_ptr() const { return op_; }
    const SystemConfig& config() const { return cfg_; }
    double epsilon() const { return cfg_.epsilon; }

    FieldState initial_state() const { return {cfg_.initial, 0.0}; }
    FieldState zero_state() const { return {Vector::Zero(cfg_.initial.size()), 0.0}; }

    /// (M + eps B + dt(K+R)) u+ = (M + eps B) u + dt M f(u) + s1 M dW1 + sqrt(eps) s2 B dW2.
    FieldState step_full(const FieldState& state, const NoiseIncrement& inc) const {
        check_increment(inc);
        const Vector u = op_->restrict_to_free(state.values);
        Vector rhs = deterministic_full_rhs(u);
        add_interior_noise(rhs, inc);
        rhs.noalias() += (std::sqrt(cfg_.epsilon) * cfg_.noise.sigma2) * (op_->B_coupling * inc.dW2);
        return finish(full_solver_, rhs, state);
    }

    /// step_full with the noise terms omitted.
    FieldState step_full_deterministic(const FieldState& state) const {
        const Vector u = op_->restrict_to_free(state.values);
        return finish(full_solver_, deterministic_full_rhs(u), state);
    }

    /// (M + dt(K+R)) u+ = M u + dt M f(u) + s1 M dW1; dW2 is ignored.
    FieldState step_effective(const FieldState& state, const NoiseIncrement& inc) const {
        check_increment(inc);
        const Vector u = op_->restrict_to_free(state.values);
        Vector rhs = op_->M_free * (u + cfg_.dt * apply_f(u));
        add_interior_noise(rhs, inc);
        return finish(effective_solver_, rhs, state);
    }

    /// (M + dt(K+R)) v+ = M v + dt M_{f'(u_now)} v + s2 B dW2.
    FieldState step_deviation_limit(const FieldState& v_state, const FieldState& u_now, const NoiseIncrement& inc) const {
        check_increment(inc);
        Vector rhs = linearized_rhs(v_state, u_now);
        rhs.noalias() += cfg_.noise.sigma2 * (op_->B_coupling * inc.dW2);
        return finish(effective_solver_, rhs, v_state);
    }

    /// Deterministic counterpart of step_deviation_limit driven by the
    /// boundary control w_now (values on the boundary nodes).
    FieldState step_controlled(const FieldState& rho, const FieldState& u_now, const Vector& w_now) const {
        if (static_cast<std::size_t>(w_now.size()) != op_->boundary_count())
            throw ConfigError("control size does not match boundary nodes");
        Vector rhs = linearized_rhs(rho, u_now);
        rhs.noalias() += (cfg_.dt * cfg_.noise.sigma2) * (op_->B_coupling * w_now);
        return finish(effective_solver_, rhs, rho);
    }

    /// Free-dof solve with the factorized (M + dt(K+R)).
    Vector solve_effective(const Vector& rhs) const { return effective_solver_.solve(rhs); }

    /// out = (M + dt M_{f'(u)}) x on free dofs.
    void apply_linearized_mass(const Vector& u_free, const Vector& x, Vector& out) const {
        Vector coeff(u_free.size());
        for (Eigen::Index i = 0; i < u_free.size(); ++i) coeff[i] = cfg_.f.derivative(u_free[i]);
        op_->apply_weighted_mass(coeff, x, out);
        out *= cfg_.dt;
        out.noalias() += op_->M_free * x;
    }

    EnergyEntry energy(const Vector& nodal, double eps) const {
        const Vector u = op_->restrict_to_free(nodal);
        EnergyEntry e;
        e.x0_norm_sq = u.dot(op_->M_free * u) + eps * u.dot(op_->B_free * u);
        e.h1_seminorm_sq = u.dot(op_->K_free * u);
        return e;
    }

    Vector apply_f(const Vector& u) const {
        Vector out(u.size());
        for (Eigen::Index i = 0; i < u.size(); ++i) out[i] = cfg_.f.value(u[i]);
        return out;
    }

private:
    static void factorize(Eigen::SimplicialLDLT<SparseMatrix>& solver, const SparseMatrix& a, const char* name) {
        solver.compute(a);
        if (solver.info() != Eigen::Success || (solver.vectorD().array() <= 0.0).any())
            throw SingularSystemError(std::string("implicit ") + name + " matrix is not positive definite");
    }

    void check_increment(const NoiseIncrement& inc) const {
        if (std::abs(inc.dt - cfg_.dt) > 1e-12 * cfg_.dt) throw ConfigError("increment dt does not match the config dt");
    }

    Vector deterministic_full_rhs(const Vector& u) const {
        Vector rhs = full_mass_ * u;
        rhs.noalias() += cfg_.dt * (op_->M_free * apply_f(u));
        return rhs;
    }

    void add_interior_noise(Vector& rhs, const NoiseIncrement& inc) const {
        rhs.noalias() += cfg_.noise.sigma1 * (op_->M_free * op_->restrict_to_free(inc.dW1));
    }

    Vector linearized_rhs(const FieldState& v_state, const FieldState& u_now) const {
        Vector out;
        apply_linearized_mass(op_->restrict_to_free(u_now.values), op_->restrict_to_free(v_state.values), out);
        return out;
    }

    FieldState finish(const Eigen::SimplicialLDLT<SparseMatrix>& solver, const Vector& rhs, const FieldState& prev) const {
        const Vector next = solver.solve(rhs);
        const double t = prev.time + cfg_.dt;
        const double sup = next.size() ? next.cwiseAbs().maxCoeff() : 0.0;
        if (!std::isfinite(sup) || sup > cfg_.blowup_threshold) {
            const auto step = static_cast<std::size_t>(std::llround(t / cfg_.dt));
            throw PathFailure(step, "nodal sup-norm " + std::to_string(sup) + " exceeds blow-up threshold");
        }
        return {op_->prolong(next), t};
    }

    std::shared_ptr<const DiscreteOperator> op_;
    SystemConfig cfg_;
    SparseMatrix full_mass_;
    Eigen::SimplicialLDLT<SparseMatrix> full_solver_;
    Eigen::SimplicialLDLT<SparseMatrix> effective_solver_;
};

struct SimulationOptions {
    bool log_increments = false;
};

/// Increments for one path drawn from the sampler on `stream`.
inline IncrementSource stream_source(const Sampler& sampler, double dt, StreamConfig stream) {
    return [&sampler, dt, stream](std::size_t step) { return sampler.sample_increment(dt, stream, step); };
}

/// Records for the three coupled systems of one path; a system not
/// requested is left empty.
struct CoupledPaths {
    PathRecord full;
    PathRecord effective;
    PathRecord limit;
};

struct CoupledRequest {
    bool full = true;
    bool effective = true;
    bool limit = false;
};

namespace detail {

inline void record(PathRecord& rec, const Dynamics& dyn, const FieldState& s, double eps) {
    rec.times.push_back(s.time);
    rec.states.push_back(s.values);
    rec.traces.push_back(dyn.op().trace_value(dyn.op().restrict_to_free(s.values)));
    rec.energy_log.push_back(dyn.energy(s.values, eps));
}

inline void mark_failed(PathRecord& rec, std::size_t step) {
    rec.failed = true;
    rec.failure_step = step;
}

} // namespace detail

/// Runs the requested systems in lockstep on one increment sequence. The
/// effective path is always integrated when the limit is requested because
/// f'(u) is frozen at its left-endpoint value.
inline CoupledPaths simulate_coupled(const Dynamics& dyn, const IncrementSource& source, CoupledRequest req,
                                     SimulationOptions opts = {}) {
    CoupledPaths out;
    out.full.kind = SystemKind::full;
    out.full.epsilon = dyn.epsilon();
    out.effective.kind = SystemKind::effective;
    out.limit.kind = SystemKind::deviation_limit;
    const bool run_eff = req.effective || req.limit;

    FieldState u_full = dyn.initial_state(), u_eff = dyn.initial_state(), v = dyn.zero_state();
    bool full_alive = req.full, eff_alive = run_eff, lim_alive = req.limit;
    if (req.full) detail::record(out.full, dyn, u_full, dyn.epsilon());
    if (run_eff) detail::record(out.effective, dyn, u_eff, 0.0);
    if (req.limit) detail::record(out.limit, dyn, v, 0.0);

    Fnv1a hash;
    std::vector<NoiseIncrement> logged;
    const std::size_t n_steps = dyn.config().step_count();
    for (std::size_t k = 0; k < n_steps; ++k) {
        if (!full_alive && !eff_alive && !lim_alive) break;
        NoiseIncrement inc = source(k);
        hash.update(std::span<const double>(inc.dW1.data(), static_cast<std::size_t>(inc.dW1.size())));
        hash.update(std::span<const double>(inc.dW2.data(), static_cast<std::size_t>(inc.dW2.size())));
        if (full_alive) {
            try {
                u_full = dyn.step_full(u_full, inc);
                detail::record(out.full, dyn, u_full, dyn.epsilon());
            } catch (const PathFailure& e) {
                detail::mark_failed(out.full, e.step());
                full_alive = false;
            }
        }
        if (lim_alive) {
            try {
                v = dyn.step_deviation_limit(v, u_eff, inc);
                detail::record(out.limit, dyn, v, 0.0);
            } catch (const PathFailure& e) {
                detail::mark_failed(out.limit, e.step());
                lim_alive = false;
            }
        }
        if (eff_alive) {
            try {
                u_eff = dyn.step_effective(u_eff, inc);
                detail::record(out.effective, dyn, u_eff, 0.0);
            } catch (const PathFailure& e) {
                detail::mark_failed(out.effective, e.step());
                eff_alive = false;
                if (lim_alive) {
                    detail::mark_failed(out.limit, e.step());
                    lim_alive = false;
                }
            }
        }
        if (opts.log_increments) logged.push_back(std::move(inc));
    }
    const auto hex = hash.hex();
    out.full.noise_hash = out.effective.noise_hash = out.limit.noise_hash = hex;
    if (opts.log_increments) {
        if (req.full) out.full.increments = logged;
        if (run_eff) out.effective.increments = logged;
        if (req.limit) out.limit.increments = std::move(logged);
    }
    if (!req.effective && !req.limit) out.effective = {};
    return out;
}

/// Integrates one system over [0, T]. Blow-up yields a failed record, not an
/// exception.
inline PathRecord simulate_path(const Dynamics& dyn, const IncrementSource& source, SystemKind which,
                                SimulationOptions opts = {}) {
    CoupledRequest req{which == SystemKind::full, which == SystemKind::effective, which == SystemKind::deviation_limit};
    auto paths = simulate_coupled(dyn, source, req, opts);
    switch (which) {
    case SystemKind::full: return std::move(paths.full);
    case SystemKind::effective: return std::move(paths.effective);
    case SystemKind::deviation_limit: return std::move(paths.limit);
    }
    return {};
}

inline PathRecord simulate_path(const Dynamics& dyn, const Sampler& sampler, const StreamConfig& stream, SystemKind which,
                                SimulationOptions opts = {}) {
    return simulate_path(dyn, stream_source(sampler, dyn.config().dt, stream), which, opts);
}

/// Smooth space-time test function and its time derivative.
struct TestFunction {
    std::function<double(double, const SpatialMesh::Point&)> value;
    std::function<double(double, const SpatialMesh::Point&)> time_derivative;
};

/// |LHS - RHS| of the discrete weak identity for a full-system path:
///   <u(T),psi(T)> + eps<g1 u(T), psi(T)> = <u0,psi0> + eps<g1 u0, psi0>
///     + int <u, psi_t> + eps int <g1 u, psi_t> - int a(u, psi) + int <f(u), psi>
///     + s1 int <psi, dW1> + sqrt(eps) s2 int <psi, dW2>_{Gamma1}
/// with left-point quadrature in time. psi is interpolated at the nodes and
/// pinned to 0 on Gamma2. Noise terms use the increments logged in the
/// record; a noisy path without logged increments is rejected.
inline double weak_residual(const PathRecord& path, const Dynamics& dyn, const TestFunction& psi) {
    if (path.failed) throw ConfigError("weak_residual needs a complete path");
    if (path.size() < 2) return 0.0;
    const auto& op = dyn.op();
    const auto& cfg = dyn.config();
    const double eps = path.kind == SystemKind::full ? path.epsilon : 0.0;
    const bool noisy = cfg.noise.sigma1 != 0.0 || cfg.noise.sigma2 != 0.0;
    if (noisy && path.increments.size() + 1 < path.size())
        throw ConfigError("weak_residual: noisy path has no logged increments");

    auto interpolate = [&](const std::function<double(double, const SpatialMesh::Point&)>& fn, double t) {
        Vector out(static_cast<Eigen::Index>(op.free_count()));
        for (std::size_t i = 0; i < op.free_count(); ++i) out[static_cast<Eigen::Index>(i)] = fn(t, op.mesh.nodes[op.free_dofs[i]]);
        return out;
    };
    const SparseMatrix E = op.M_free + eps * op.B_free;
    const SparseMatrix A = op.K_free + op.R_free;

    const Vector u0 = op.restrict_to_free(path.states.front());
    const Vector uT = op.restrict_to_free(path.states.back());
    const double lhs = interpolate(psi.value, path.times.back()).dot(E * uT);
    double rhs = interpolate(psi.value, path.times.front()).dot(E * u0);
    for (std::size_t k = 0; k + 1 < path.size(); ++k) {
        const double t = path.times[k];
        const double h = path.times[k + 1] - t;
        const Vector u = op.restrict_to_free(path.states[k]);
        const Vector p = interpolate(psi.value, t);
        const Vector pt = interpolate(psi.time_derivative, t);
        rhs += h * (pt.dot(E * u) - p.dot(A * u) + p.dot(op.M_free * dyn.apply_f(u)));
        if (noisy) {
            const auto& inc = path.increments[k];
            rhs += cfg.noise.sigma1 * p.dot(op.M_free * op.restrict_to_free(inc.dW1));
            rhs += std::sqrt(eps) * cfg.noise.sigma2 * p.dot(op.B_coupling * inc.dW2);
        }
    }
    return std::abs(lhs - rhs);
}

} // namespace spdelab
