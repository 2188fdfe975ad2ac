#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <Eigen/Sparse>
#include <unsupported/Eigen/SparseExtra>

#include "spdelab/error.hpp"
#include "spdelab/mesh.hpp"

namespace spdelab {

using Vector = Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

inline constexpr std::size_t kNoDof = std::numeric_limits<std::size_t>::max();

/// Assembled P1 operators for the Robin/dynamical-boundary problem.
///
/// The full matrices live on all mesh nodes. Time stepping works on the
/// free dofs (Dirichlet nodes eliminated by row/column removal) through the
/// `*_free` accessors. Boundary data is carried on `boundary_nodes`: every
/// node touched by a Gamma1 facet, which in 2D includes the two Dirichlet
/// corners closing the edge.
struct DiscreteOperator {
    SpatialMesh mesh;
    bool lumped = false;

    SparseMatrix K; ///< int grad u . grad v
    SparseMatrix R; ///< int_{Gamma1} u v
    SparseMatrix M; ///< int_D u v
    SparseMatrix B; ///< boundary mass on Gamma1; same entries as R

    std::vector<std::size_t> dirichlet_dofs;
    std::vector<std::size_t> free_dofs;
    std::vector<std::size_t> node_to_free; ///< kNoDof for Dirichlet nodes
    std::vector<std::size_t> boundary_nodes;
    std::vector<std::size_t> gamma1_free; ///< free indices of Gamma1 nodes

    SparseMatrix K_free, R_free, M_free, B_free;
    SparseMatrix B_coupling; ///< free x boundary_nodes block of B
    std::vector<double> element_measure;

    std::size_t free_count() const { return free_dofs.size(); }
    std::size_t boundary_count() const { return boundary_nodes.size(); }

    SparseMatrix stiffness_free() const { return K_free + R_free; }

    Vector restrict_to_free(const Vector& nodal) const {
        Vector out(static_cast<Eigen::Index>(free_dofs.size()));
        for (std::size_t i = 0; i < free_dofs.size(); ++i)
            out[static_cast<Eigen::Index>(i)] = nodal[static_cast<Eigen::Index>(free_dofs[i])];
        return out;
    }

    Vector prolong(const Vector& free) const {
        Vector out = Vector::Zero(static_cast<Eigen::Index>(mesh.node_count()));
        for (std::size_t i = 0; i < free_dofs.size(); ++i)
            out[static_cast<Eigen::Index>(free_dofs[i])] = free[static_cast<Eigen::Index>(i)];
        return out;
    }

    /// Boundary values of a free-dof vector on `boundary_nodes` (Dirichlet
    /// corners read as 0).
    Vector boundary_values(const Vector& free) const {
        Vector out(static_cast<Eigen::Index>(boundary_nodes.size()));
        for (std::size_t i = 0; i < boundary_nodes.size(); ++i) {
            const auto f = node_to_free[boundary_nodes[i]];
            out[static_cast<Eigen::Index>(i)] = f == kNoDof ? 0.0 : free[static_cast<Eigen::Index>(f)];
        }
        return out;
    }

    /// Mean of the free Gamma1 values; in 1D this is the single trace value.
    double trace_value(const Vector& free) const {
        double s = 0.0;
        for (auto f : gamma1_free) s += free[static_cast<Eigen::Index>(f)];
        return gamma1_free.empty() ? 0.0 : s / static_cast<double>(gamma1_free.size());
    }

    /// out = M_c x on free dofs, where M_c is the mass matrix weighted by the
    /// P1 interpolant of the coefficient c (indexed by free dof).
    void apply_weighted_mass(const Vector& coeff_free, const Vector& x, Vector& out) const {
        out.setZero(x.size());
        auto value = [&](const Vector& v, std::size_t node) {
            const auto f = node_to_free[node];
            return f == kNoDof ? 0.0 : v[static_cast<Eigen::Index>(f)];
        };
        for (std::size_t e = 0; e < mesh.elements.size(); ++e) {
            const auto& el = mesh.elements[e];
            const double meas = element_measure[e];
            const std::size_t nv = el.size();
            if (lumped) {
                const double w = meas / static_cast<double>(nv);
                for (std::size_t a = 0; a < nv; ++a) {
                    const auto fa = node_to_free[el[a]];
                    if (fa == kNoDof) continue;
                    out[static_cast<Eigen::Index>(fa)] += w * value(coeff_free, el[a]) * value(x, el[a]);
                }
                continue;
            }
            // exact integral of phi_a phi_b phi_c over the simplex
            for (std::size_t a = 0; a < nv; ++a) {
                const auto fa = node_to_free[el[a]];
                if (fa == kNoDof) continue;
                double acc = 0.0;
                for (std::size_t b = 0; b < nv; ++b) {
                    const double xb = value(x, el[b]);
                    if (xb == 0.0) continue;
                    for (std::size_t c = 0; c < nv; ++c)
                        acc += triple_integral(nv, a, b, c) * value(coeff_free, el[c]) * xb;
                }
                out[static_cast<Eigen::Index>(fa)] += meas * acc;
            }
        }
    }

private:
    static double triple_integral(std::size_t nv, std::size_t a, std::size_t b, std::size_t c) {
        if (nv == 2) {
            if (a == b && b == c) return 1.0 / 4.0;
            return 1.0 / 12.0;
        }
        if (a == b && b == c) return 1.0 / 10.0;
        if (a == b || b == c || a == c) return 1.0 / 30.0;
        return 1.0 / 60.0;
    }
};

namespace detail {

inline SparseMatrix restrict_block(const SparseMatrix& full, const std::vector<std::size_t>& rows,
                                   const std::vector<std::size_t>& cols, std::size_t n) {
    std::vector<std::size_t> row_map(n, kNoDof), col_map(n, kNoDof);
    for (std::size_t i = 0; i < rows.size(); ++i) row_map[rows[i]] = i;
    for (std::size_t j = 0; j < cols.size(); ++j) col_map[cols[j]] = j;
    std::vector<Triplet> trips;
    for (Eigen::Index k = 0; k < full.outerSize(); ++k) {
        for (SparseMatrix::InnerIterator it(full, k); it; ++it) {
            const auto r = row_map[static_cast<std::size_t>(it.row())];
            const auto c = col_map[static_cast<std::size_t>(it.col())];
            if (r != kNoDof && c != kNoDof)
                trips.emplace_back(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c), it.value());
        }
    }
    SparseMatrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
    out.setFromTriplets(trips.begin(), trips.end());
    return out;
}

inline double triangle_area(const SpatialMesh::Point& a, const SpatialMesh::Point& b, const SpatialMesh::Point& c) {
    return 0.5 * std::abs((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]));
}

} // namespace detail

/// Assembles K, R, M, B with P1 elements and records the Dirichlet dof map.
inline DiscreteOperator assemble_operators(const SpatialMesh& mesh, bool lump_mass = false) {
    validate_mesh(mesh);
    DiscreteOperator op;
    op.mesh = mesh;
    op.lumped = lump_mass;
    const std::size_t n = mesh.node_count();
    const auto N = static_cast<Eigen::Index>(n);

    std::vector<Triplet> kt, mt, bt;
    op.element_measure.reserve(mesh.elements.size());
    for (const auto& el : mesh.elements) {
        if (mesh.dimension == 1) {
            const double len = std::abs(mesh.nodes[el[1]][0] - mesh.nodes[el[0]][0]);
            op.element_measure.push_back(len);
            const auto i = static_cast<Eigen::Index>(el[0]), j = static_cast<Eigen::Index>(el[1]);
            kt.emplace_back(i, i, 1.0 / len);
            kt.emplace_back(j, j, 1.0 / len);
            kt.emplace_back(i, j, -1.0 / len);
            kt.emplace_back(j, i, -1.0 / len);
            if (lump_mass) {
                mt.emplace_back(i, i, len / 2.0);
                mt.emplace_back(j, j, len / 2.0);
            } else {
                mt.emplace_back(i, i, len / 3.0);
                mt.emplace_back(j, j, len / 3.0);
                mt.emplace_back(i, j, len / 6.0);
                mt.emplace_back(j, i, len / 6.0);
            }
            continue;
        }
        const auto& p0 = mesh.nodes[el[0]];
        const auto& p1 = mesh.nodes[el[1]];
        const auto& p2 = mesh.nodes[el[2]];
        const double area = detail::triangle_area(p0, p1, p2);
        if (!(area > 0.0)) throw DomainError("degenerate triangle");
        op.element_measure.push_back(area);
        // Gradients of barycentric coordinates.
        const std::array<std::array<double, 2>, 3> grad{{
            {(p1[1] - p2[1]) / (2.0 * area), (p2[0] - p1[0]) / (2.0 * area)},
            {(p2[1] - p0[1]) / (2.0 * area), (p0[0] - p2[0]) / (2.0 * area)},
            {(p0[1] - p1[1]) / (2.0 * area), (p1[0] - p0[0]) / (2.0 * area)},
        }};
        // Orientation does not matter for grad.grad products (sign cancels).
        for (std::size_t a = 0; a < 3; ++a) {
            for (std::size_t b = 0; b < 3; ++b) {
                const auto ia = static_cast<Eigen::Index>(el[a]), ib = static_cast<Eigen::Index>(el[b]);
                kt.emplace_back(ia, ib, area * (grad[a][0] * grad[b][0] + grad[a][1] * grad[b][1]));
                if (!lump_mass) mt.emplace_back(ia, ib, area * (a == b ? 1.0 / 6.0 : 1.0 / 12.0));
            }
            if (lump_mass) mt.emplace_back(static_cast<Eigen::Index>(el[a]), static_cast<Eigen::Index>(el[a]), area / 3.0);
        }
    }
    for (const auto& facet : mesh.gamma1_facets) {
        if (mesh.dimension == 1) {
            const auto i = static_cast<Eigen::Index>(facet[0]);
            bt.emplace_back(i, i, 1.0);
            continue;
        }
        const auto& a = mesh.nodes[facet[0]];
        const auto& b = mesh.nodes[facet[1]];
        const double len = std::hypot(b[0] - a[0], b[1] - a[1]);
        const auto i = static_cast<Eigen::Index>(facet[0]), j = static_cast<Eigen::Index>(facet[1]);
        bt.emplace_back(i, i, len / 3.0);
        bt.emplace_back(j, j, len / 3.0);
        bt.emplace_back(i, j, len / 6.0);
        bt.emplace_back(j, i, len / 6.0);
    }

    op.K.resize(N, N);
    op.M.resize(N, N);
    op.B.resize(N, N);
    op.K.setFromTriplets(kt.begin(), kt.end());
    op.M.setFromTriplets(mt.begin(), mt.end());
    op.B.setFromTriplets(bt.begin(), bt.end());
    op.R = op.B;

    op.node_to_free.assign(n, kNoDof);
    for (std::size_t i = 0; i < n; ++i) {
        if (mesh.boundary_tags[i] == BoundaryTag::Gamma2) {
            op.dirichlet_dofs.push_back(i);
        } else {
            op.node_to_free[i] = op.free_dofs.size();
            op.free_dofs.push_back(i);
        }
    }
    std::vector<bool> on_boundary(n, false);
    for (const auto& facet : mesh.gamma1_facets)
        for (auto v : facet) on_boundary[v] = true;
    for (std::size_t i = 0; i < n; ++i)
        if (on_boundary[i]) op.boundary_nodes.push_back(i);
    for (auto i : mesh.nodes_tagged(BoundaryTag::Gamma1)) op.gamma1_free.push_back(op.node_to_free[i]);

    op.K_free = detail::restrict_block(op.K, op.free_dofs, op.free_dofs, n);
    op.R_free = detail::restrict_block(op.R, op.free_dofs, op.free_dofs, n);
    op.M_free = detail::restrict_block(op.M, op.free_dofs, op.free_dofs, n);
    op.B_free = detail::restrict_block(op.B, op.free_dofs, op.free_dofs, n);
    op.B_coupling = detail::restrict_block(op.B, op.free_dofs, op.boundary_nodes, n);
    return op;
}

/// Discrete coercivity constants: a(z,z) >= alpha |z|^2_{X0} - beta |z|^2_{X0}
/// read off the generalized eigenproblem (K + R, M + B) on free dofs.
struct CoercivityConstants {
    double alpha = 0.0;
    double beta = 0.0;
    double lambda_min = 0.0;
    double lambda_max = 0.0;
};

namespace detail {

inline Eigen::VectorXd generalized_eigenvalues(const SparseMatrix& a, const SparseMatrix& b) {
    const Eigen::MatrixXd A(a), Bm(b);
    Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> solver(A, Bm, Eigen::EigenvaluesOnly);
    if (solver.info() != Eigen::Success) throw DiagnosticsError("generalized eigen-solver did not converge");
    return solver.eigenvalues();
}

} // namespace detail

inline CoercivityConstants coercivity_diagnostics(const DiscreteOperator& op) {
    const auto ev = detail::generalized_eigenvalues(op.K_free + op.R_free, op.M_free + op.B_free);
    CoercivityConstants out;
    out.lambda_min = ev.minCoeff();
    out.lambda_max = ev.maxCoeff();
    if (out.lambda_min > 0.0) {
        out.alpha = out.lambda_min;
        out.beta = 0.0;
    } else {
        // Shift so that the form is coercive with half of the top of the spectrum.
        out.alpha = 0.5 * out.lambda_max;
        out.beta = out.alpha - out.lambda_min;
    }
    if (!(out.alpha > 0.0)) throw DiagnosticsError("operator is not coercive on free dofs");
    return out;
}

/// Smallest M_disc with a(u,w) <= M_disc |u|_{K+M} |w|_{K+M}.
inline double boundedness_constant(const DiscreteOperator& op) {
    return detail::generalized_eigenvalues(op.K_free + op.R_free, op.K_free + op.M_free).maxCoeff();
}

/// Eigenvalues of the Robin Laplacian, generalized problem (K + R, M).
inline Eigen::VectorXd robin_eigenvalues(const DiscreteOperator& op) {
    return detail::generalized_eigenvalues(op.K_free + op.R_free, op.M_free);
}

/// Solves r y - Laplace y = 0 in D, d_nu y + y = g on Gamma1, y = 0 on Gamma2.
/// `g` is given on `op.boundary_nodes`; returns nodal values.
inline Vector neumann_map(const DiscreteOperator& op, double r, const Vector& g) {
    if (static_cast<std::size_t>(g.size()) != op.boundary_count())
        throw DomainError("boundary data size does not match Gamma1 nodes");
    const SparseMatrix system = r * op.M_free + op.K_free + op.R_free;
    Eigen::SimplicialLDLT<SparseMatrix> ldlt(system);
    if (ldlt.info() != Eigen::Success || (ldlt.vectorD().array() <= 0.0).any())
        throw SingularSystemError("Neumann-map system is singular for r = " + std::to_string(r));
    const Vector y = ldlt.solve(op.B_coupling * g);
    return op.prolong(y);
}

/// Writes K, R, M, B (full, all nodes) as Matrix Market files into `dir`.
inline void dump_operators(const DiscreteOperator& op, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    Eigen::saveMarket(op.K, (dir / "K.mtx").string());
    Eigen::saveMarket(op.R, (dir / "R.mtx").string());
    Eigen::saveMarket(op.M, (dir / "M.mtx").string());
    Eigen::saveMarket(op.B, (dir / "B.mtx").string());
}

} // namespace spdelab
