#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "spdelab/dynamics.hpp"
#include "spdelab/error.hpp"

namespace spdelab {

/// Discrete L2(0,T; L2(D)) norm: trapezoid in time, mass matrix in space.
inline double l2l2_norm(const DiscreteOperator& op, const std::vector<Vector>& states, const std::vector<double>& times) {
    if (states.size() != times.size()) throw GridMismatchError("states and times differ in length");
    double acc = 0.0;
    auto sq = [&](const Vector& nodal) {
        const Vector u = op.restrict_to_free(nodal);
        return u.dot(op.M_free * u);
    };
    for (std::size_t k = 0; k + 1 < states.size(); ++k)
        acc += 0.5 * (times[k + 1] - times[k]) * (sq(states[k]) + sq(states[k + 1]));
    return std::sqrt(acc);
}

inline double l2l2_norm(const DiscreteOperator& op, const PathRecord& path) { return l2l2_norm(op, path.states, path.times); }

struct DeviationRecord {
    double kappa = 0.5;
    double eps = 0.0;
    PathRecord path;
    double norm_L2L2 = 0.0;
};

namespace detail {

inline void require_same_grid(const PathRecord& a, const PathRecord& b) {
    if (a.failed || b.failed) throw GridMismatchError("cannot compare failed paths");
    if (a.size() != b.size()) throw GridMismatchError("paths have different lengths");
    for (std::size_t k = 0; k < a.size(); ++k) {
        if (std::abs(a.times[k] - b.times[k]) > 1e-12 * (1.0 + std::abs(a.times[k])))
            throw GridMismatchError("paths have different time grids");
        if (a.states[k].size() != b.states[k].size()) throw GridMismatchError("paths live on different meshes");
    }
}

} // namespace detail

/// v = eps^-kappa (u_eps - u) on the shared grid.
inline DeviationRecord deviation_path(const PathRecord& u_eps, const PathRecord& u, double eps, double kappa,
                                      const DiscreteOperator& op) {
    detail::require_same_grid(u_eps, u);
    if (!(eps > 0.0)) throw ConfigError("deviation_path: eps must be positive");
    DeviationRecord rec;
    rec.kappa = kappa;
    rec.eps = eps;
    rec.path.kind = SystemKind::deviation_limit;
    rec.path.epsilon = eps;
    rec.path.times = u.times;
    const double scale = std::pow(eps, -kappa);
    rec.path.states.reserve(u.size());
    for (std::size_t k = 0; k < u.size(); ++k) {
        rec.path.states.push_back(scale * (u_eps.states[k] - u.states[k]));
        rec.path.traces.push_back(op.trace_value(op.restrict_to_free(rec.path.states.back())));
    }
    rec.norm_L2L2 = l2l2_norm(op, rec.path);
    return rec;
}

/// || eps^-1/2 (u_eps - u) - v ||_{L2(0,T;L2(D))} for one coupled path.
inline double normal_deviation_gap(const PathRecord& u_eps, const PathRecord& u, const PathRecord& v_limit, double eps,
                                   const DiscreteOperator& op) {
    detail::require_same_grid(u_eps, u);
    detail::require_same_grid(u, v_limit);
    const double scale = 1.0 / std::sqrt(eps);
    std::vector<Vector> diff;
    diff.reserve(u.size());
    for (std::size_t k = 0; k < u.size(); ++k) diff.push_back(scale * (u_eps.states[k] - u.states[k]) - v_limit.states[k]);
    return l2l2_norm(op, diff, u.times);
}

/// The linear control-to-path map G: w -> rho_w of the controlled system
/// around a fixed effective path, and its exact discrete transpose.
///
/// Controls are stored as a (boundary nodes x steps) matrix whose column j
/// acts on step j+1; paths as a (free dofs x steps) matrix whose column k is
/// rho at t_{k+1} (rho(0) = 0 is implicit).
class ControlMap {
public:
    ControlMap(const Dynamics& dyn, const PathRecord& effective) : dyn_(&dyn) {
        if (effective.failed) throw ConfigError("control map needs a successful effective path");
        const std::size_t n = dyn.config().step_count();
        if (effective.size() < n + 1) throw GridMismatchError("effective path shorter than the time grid");
        u_free_.reserve(n);
        for (std::size_t k = 0; k < n; ++k) u_free_.push_back(dyn.op().restrict_to_free(effective.states[k]));
    }

    std::size_t steps() const { return u_free_.size(); }
    std::size_t control_rows() const { return dyn_->op().boundary_count(); }
    std::size_t state_rows() const { return dyn_->op().free_count(); }
    const Dynamics& dynamics() const { return *dyn_; }

    Eigen::MatrixXd apply(const Eigen::MatrixXd& w) const {
        check_shape(w, control_rows(), "control");
        const auto& op = dyn_->op();
        const double gain = dyn_->config().dt * dyn_->config().noise.sigma2;
        Eigen::MatrixXd y(static_cast<Eigen::Index>(state_rows()), static_cast<Eigen::Index>(steps()));
        Vector rho = Vector::Zero(static_cast<Eigen::Index>(state_rows())), tmp;
        for (std::size_t k = 0; k < steps(); ++k) {
            dyn_->apply_linearized_mass(u_free_[k], rho, tmp);
            tmp.noalias() += gain * (op.B_coupling * w.col(static_cast<Eigen::Index>(k)));
            rho = dyn_->solve_effective(tmp);
            y.col(static_cast<Eigen::Index>(k)) = rho;
        }
        return y;
    }

    /// Euclidean transpose of apply(), by the backward recursion
    /// lambda_j = S p_j, p_{j-1} = y_{j-1} + C_{j-1} lambda_j.
    Eigen::MatrixXd apply_transpose(const Eigen::MatrixXd& y) const {
        check_shape(y, state_rows(), "path");
        const auto& op = dyn_->op();
        const double gain = dyn_->config().dt * dyn_->config().noise.sigma2;
        Eigen::MatrixXd w(static_cast<Eigen::Index>(control_rows()), static_cast<Eigen::Index>(steps()));
        Vector p = y.col(static_cast<Eigen::Index>(steps() - 1)), tmp;
        for (std::size_t j = steps(); j-- > 0;) {
            const Vector lambda = dyn_->solve_effective(p);
            w.col(static_cast<Eigen::Index>(j)) = gain * (op.B_coupling.transpose() * lambda);
            if (j == 0) break;
            dyn_->apply_linearized_mass(u_free_[j], lambda, tmp);
            p = y.col(static_cast<Eigen::Index>(j - 1)) + tmp;
        }
        return w;
    }

private:
    void check_shape(const Eigen::MatrixXd& m, std::size_t rows, const char* what) const {
        if (static_cast<std::size_t>(m.rows()) != rows || static_cast<std::size_t>(m.cols()) != steps())
            throw GridMismatchError(std::string(what) + " has the wrong shape for the control map");
    }

    const Dynamics* dyn_;
    std::vector<Vector> u_free_;
};

/// Path of the controlled system for control w, rho(0) = 0, via step_controlled.
inline PathRecord forward_control_map(const ControlMap& map, const Eigen::MatrixXd& w) {
    const auto& dyn = map.dynamics();
    if (static_cast<std::size_t>(w.cols()) != map.steps() || static_cast<std::size_t>(w.rows()) != map.control_rows())
        throw GridMismatchError("control has the wrong shape");
    PathRecord rec;
    rec.kind = SystemKind::deviation_limit;
    FieldState rho = dyn.zero_state();
    detail::record(rec, dyn, rho, 0.0);
    const Eigen::MatrixXd y = map.apply(w);
    for (std::size_t k = 0; k < map.steps(); ++k) {
        rho = {dyn.op().prolong(y.col(static_cast<Eigen::Index>(k))), rho.time + dyn.config().dt};
        detail::record(rec, dyn, rho, 0.0);
    }
    return rec;
}

/// Relative mismatch |<G w, y> - <w, G^T y>| / (|G w| |y|) for random w, y.
inline double transpose_mismatch(const ControlMap& map, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    auto random = [&](std::size_t rows) {
        Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(map.steps()));
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
        return m;
    };
    const Eigen::MatrixXd w = random(map.control_rows());
    const Eigen::MatrixXd y = random(map.state_rows());
    const Eigen::MatrixXd gw = map.apply(w);
    const double lhs = (gw.array() * y.array()).sum();
    const double rhs = (w.array() * map.apply_transpose(y).array()).sum();
    return std::abs(lhs - rhs) / (gw.norm() * y.norm());
}

struct RateProblem {
    Eigen::MatrixXd target; ///< free dofs x steps, column k = y(t_{k+1})
    double q2 = 1.0;        ///< H0 norm is |w|^2_{L2(Gamma1)} / q2
    double tolerance = 1e-8;
    std::optional<double> M_bound; ///< optional radius of the S_M ball on int |w|^2_{H0}
    std::size_t max_iterations = 0; ///< 0 selects 4 x the control dimension
};

struct RateResult {
    double value = 0.0;
    Eigen::MatrixXd w_star;
    double residual = 0.0;
    std::size_t iterations = 0;
    bool within_ball = true; ///< false when M_bound is set and exceeded
};

/// Inner products behind the rate function: controls in L2(0,T;H0), paths
/// in L2(0,T;L2(D)) with trapezoid weights (rho(0) = 0 contributes nothing).
class RateGeometry {
public:
    RateGeometry(const ControlMap& map, double q2) : map_(&map), q2_(q2) {
        if (!(q2 > 0.0)) throw ConfigError("rate function: q2 must be positive");
        const auto& op = map.dynamics().op();
        boundary_mass_ = Eigen::MatrixXd(detail::restrict_block(op.B, op.boundary_nodes, op.boundary_nodes, op.mesh.node_count()));
        boundary_mass_ldlt_.compute(boundary_mass_);
        dt_ = map.dynamics().config().dt;
    }

    double time_weight(std::size_t k) const { return k + 1 == map_->steps() ? 0.5 * dt_ : dt_; }

    double control_inner(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) const {
        double s = 0.0;
        for (Eigen::Index j = 0; j < a.cols(); ++j) s += a.col(j).dot(boundary_mass_ * b.col(j));
        return dt_ * s / q2_;
    }

    double path_inner(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) const {
        const auto& M = map_->dynamics().op().M_free;
        double s = 0.0;
        for (Eigen::Index k = 0; k < a.cols(); ++k) s += time_weight(static_cast<std::size_t>(k)) * a.col(k).dot(M * b.col(k));
        return s;
    }

    /// Hilbert adjoint of G under the two inner products.
    Eigen::MatrixXd adjoint(const Eigen::MatrixXd& y) const {
        const auto& M = map_->dynamics().op().M_free;
        Eigen::MatrixXd weighted(y.rows(), y.cols());
        for (Eigen::Index k = 0; k < y.cols(); ++k) weighted.col(k) = time_weight(static_cast<std::size_t>(k)) * (M * y.col(k));
        Eigen::MatrixXd g = map_->apply_transpose(weighted);
        for (Eigen::Index j = 0; j < g.cols(); ++j) g.col(j) = (q2_ / dt_) * boundary_mass_ldlt_.solve(g.col(j));
        return g;
    }

    double cost(const Eigen::MatrixXd& w) const { return 0.5 * control_inner(w, w); }

private:
    const ControlMap* map_;
    double q2_;
    double dt_ = 0.0;
    Eigen::MatrixXd boundary_mass_;
    Eigen::LDLT<Eigen::MatrixXd> boundary_mass_ldlt_;
};

/// I(y) = min 1/2 int |w|^2_{H0} subject to ||G w - y|| <= tolerance.
///
/// Conjugate gradients on the normal equations G G* mu = y (Craig's
/// method): iterates stay in the range of G*, so the first iterate meeting
/// the tolerance is the minimum-norm control up to that tolerance.
inline RateResult rate_function(const ControlMap& map, const RateProblem& problem) {
    if (!(problem.tolerance > 0.0)) throw ConfigError("rate function: tolerance must be positive");
    if (static_cast<std::size_t>(problem.target.rows()) != map.state_rows() ||
        static_cast<std::size_t>(problem.target.cols()) != map.steps())
        throw GridMismatchError("rate function: target has the wrong shape");
    RateGeometry geo(map, problem.q2);

    RateResult out;
    out.w_star = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(map.control_rows()), static_cast<Eigen::Index>(map.steps()));
    Eigen::MatrixXd r = problem.target;
    double rr = geo.path_inner(r, r);
    out.residual = std::sqrt(rr);
    const std::size_t max_it = problem.max_iterations ? problem.max_iterations
                                                      : 4 * static_cast<std::size_t>(out.w_star.size()) + 10;
    Eigen::MatrixXd p = geo.adjoint(r);
    while (out.residual > problem.tolerance && out.iterations < max_it) {
        const double pp = geo.control_inner(p, p);
        if (!(pp > 0.0)) break; // residual orthogonal to the range of G
        const double alpha = rr / pp;
        out.w_star += alpha * p;
        r -= alpha * map.apply(p);
        const double rr_new = geo.path_inner(r, r);
        ++out.iterations;
        out.residual = std::sqrt(rr_new);
        p = geo.adjoint(r) + (rr_new / rr) * p;
        rr = rr_new;
    }
    // Recompute the residual from scratch; the recurrence drifts.
    const Eigen::MatrixXd final_r = map.apply(out.w_star) - problem.target;
    out.residual = std::sqrt(geo.path_inner(final_r, final_r));
    if (out.residual > problem.tolerance)
        throw InfeasibleTargetError("rate function: target not reachable within tolerance (residual " +
                                    std::to_string(out.residual) + " after " + std::to_string(out.iterations) +
                                    " iterations)");
    out.value = geo.cost(out.w_star);
    if (problem.M_bound) out.within_ball = 2.0 * out.value <= *problem.M_bound;
    return out;
}

} // namespace spdelab
