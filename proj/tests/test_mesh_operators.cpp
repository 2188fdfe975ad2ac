#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <vector>

#include <boost/math/tools/roots.hpp>
#include <gtest/gtest.h>
#include <unsupported/Eigen/SparseExtra>

#include "spdelab/mesh.hpp"
#include "spdelab/operators.hpp"
#include "spdelab/statistics.hpp"

using namespace spdelab;

namespace {

Eigen::MatrixXd dense(const SparseMatrix& m) { return Eigen::MatrixXd(m); }

DiscreteOperator interval(std::size_t n, bool lumped = false) { return assemble_operators(build_interval_mesh(n, 1.0), lumped); }

Vector random_vector(std::mt19937_64& rng, Eigen::Index n) {
    std::normal_distribution<double> normal;
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
    return v;
}

// First root of tan k = -k in (pi/2, pi): the lowest Robin mode sin(kx) on
// (0,1) with y(0) = 0 and y'(1) + y(1) = 0 has eigenvalue k^2.
double robin_mode_wavenumber() {
    auto g = [](double k) { return std::sin(k) + k * std::cos(k); };
    boost::math::tools::eps_tolerance<double> tol(52);
    const auto [lo, hi] = boost::math::tools::bisect(g, 0.5 * std::numbers::pi + 1e-9, std::numbers::pi, tol);
    return 0.5 * (lo + hi);
}

} // namespace

TEST(IntervalMesh, ThreeNodesHaveExpectedCoordinatesAndTags) {
    const auto mesh = build_interval_mesh(3, 1.0);
    ASSERT_EQ(mesh.node_count(), 3u);
    EXPECT_DOUBLE_EQ(mesh.nodes[0][0], 0.0);
    EXPECT_DOUBLE_EQ(mesh.nodes[1][0], 0.5);
    EXPECT_DOUBLE_EQ(mesh.nodes[2][0], 1.0);
    EXPECT_EQ(mesh.boundary_tags[0], BoundaryTag::Gamma2);
    EXPECT_FALSE(mesh.boundary_tags[1].has_value());
    EXPECT_EQ(mesh.boundary_tags[2], BoundaryTag::Gamma1);
    EXPECT_DOUBLE_EQ(mesh.h, 0.5);
}

TEST(IntervalMesh, RejectsTooFewNodes) {
    EXPECT_THROW(build_interval_mesh(2, 1.0), DomainError);
    EXPECT_THROW(build_interval_mesh(5, 0.0), DomainError);
}

TEST(IntervalMesh, HundredOneNodes) {
    const auto mesh = build_interval_mesh(101, 1.0);
    EXPECT_NEAR(mesh.h, 0.01, 1e-15);
    std::size_t interior = 0;
    for (const auto& t : mesh.boundary_tags) interior += t.has_value() ? 0 : 1;
    EXPECT_EQ(interior, 99u);
}

TEST(RectangleMesh, TagsRightEdgeAsGamma1) {
    const auto mesh = build_rectangle_mesh(5, 4, 2.0, 1.5);
    EXPECT_EQ(mesh.node_count(), 20u);
    EXPECT_EQ(mesh.elements.size(), 2u * 4u * 3u);
    EXPECT_EQ(mesh.gamma1_facets.size(), 3u);
    for (const auto& f : mesh.gamma1_facets)
        for (auto v : f) EXPECT_DOUBLE_EQ(mesh.nodes[v][0], 2.0);
    EXPECT_THROW(build_rectangle_mesh(2, 4, 1.0, 1.0), DomainError);
}

TEST(Operators, HandAssembledThreeNodeInterval) {
    const auto op = interval(3);
    const double h = 0.5;
    // Free dofs are nodes 1 and 2; two cells of length h.
    Eigen::Matrix2d K;
    K << 2.0 / h, -1.0 / h, -1.0 / h, 1.0 / h;
    Eigen::Matrix2d M;
    M << 2.0 * h / 3.0, h / 6.0, h / 6.0, h / 3.0;
    Eigen::Matrix2d R = Eigen::Matrix2d::Zero();
    R(1, 1) = 1.0;
    EXPECT_LT((dense(op.K_free) - K).norm(), 1e-14);
    EXPECT_LT((dense(op.M_free) - M).norm(), 1e-14);
    EXPECT_LT((dense(op.R_free) - R).norm(), 1e-14);
    EXPECT_LT((dense(op.B_free) - R).norm(), 1e-14);
    ASSERT_EQ(op.boundary_count(), 1u);
    EXPECT_DOUBLE_EQ(op.B_coupling.coeff(1, 0), 1.0);
}

TEST(Operators, ConstantVectorIdentities) {
    for (const auto& op : {interval(17), assemble_operators(build_rectangle_mesh(6, 5, 1.0, 0.75))}) {
        const Vector one = Vector::Ones(static_cast<Eigen::Index>(op.mesh.node_count()));
        EXPECT_NEAR(one.dot(op.K * one), 0.0, 1e-12);
        const double gamma1_measure = op.mesh.dimension == 1 ? 1.0 : op.mesh.extent[1];
        EXPECT_NEAR(one.dot(op.R * one), gamma1_measure, 1e-12);
        const double area = op.mesh.dimension == 1 ? op.mesh.extent[0] : op.mesh.extent[0] * op.mesh.extent[1];
        EXPECT_NEAR(one.dot(op.M * one), area, 1e-12);
    }
}

TEST(Operators, StiffnessIsExactlySymmetric) {
    for (const auto& op : {interval(33), assemble_operators(build_rectangle_mesh(7, 6, 1.0, 1.0))}) {
        const Eigen::MatrixXd A = dense(op.K_free + op.R_free);
        EXPECT_EQ((A - A.transpose()).cwiseAbs().maxCoeff(), 0.0);
        std::mt19937_64 rng(3);
        const Vector u = random_vector(rng, A.rows()), w = random_vector(rng, A.rows());
        EXPECT_NEAR(u.dot(A * w), w.dot(A * u), 1e-12 * std::abs(u.dot(A * w)) + 1e-14);
    }
}

TEST(Operators, FreeStiffnessIsPositiveDefinite) {
    for (const auto& op : {interval(3), interval(65), assemble_operators(build_rectangle_mesh(5, 5, 1.0, 1.0))}) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(dense(op.K_free + op.R_free));
        EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
    }
}

TEST(Operators, LumpedMassIsDiagonalWithSameTotal) {
    const auto op = interval(9, true);
    const Eigen::MatrixXd M = dense(op.M);
    EXPECT_EQ((M - Eigen::MatrixXd(M.diagonal().asDiagonal())).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_NEAR(M.sum(), 1.0, 1e-14);
}

TEST(Operators, WeightedMassMatchesGaussQuadrature) {
    const auto op = interval(9);
    std::mt19937_64 rng(11);
    const auto n = static_cast<Eigen::Index>(op.free_count());
    const Vector c = random_vector(rng, n), x = random_vector(rng, n);
    Vector out;
    op.apply_weighted_mass(c, x, out);

    // Independent: 3-point Gauss-Legendre on each cell is exact for the cubic integrand.
    const Vector cn = op.prolong(c), xn = op.prolong(x);
    Vector ref = Vector::Zero(static_cast<Eigen::Index>(op.mesh.node_count()));
    const double gx[3] = {-std::sqrt(0.6), 0.0, std::sqrt(0.6)};
    const double gw[3] = {5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0};
    for (std::size_t e = 0; e + 1 < op.mesh.node_count(); ++e) {
        const double h = op.mesh.nodes[e + 1][0] - op.mesh.nodes[e][0];
        for (int q = 0; q < 3; ++q) {
            const double s = 0.5 * (gx[q] + 1.0);
            const double phi[2] = {1.0 - s, s};
            const auto i = static_cast<Eigen::Index>(e);
            const double cq = phi[0] * cn[i] + phi[1] * cn[i + 1];
            const double xq = phi[0] * xn[i] + phi[1] * xn[i + 1];
            for (int a = 0; a < 2; ++a) ref[i + a] += 0.5 * h * gw[q] * cq * xq * phi[a];
        }
    }
    EXPECT_LT((out - op.restrict_to_free(ref)).norm(), 1e-13 * ref.norm());

    // The coefficient reads as 0 on Gamma2, so only rows away from it see a constant.
    Vector constant;
    op.apply_weighted_mass(Vector::Constant(n, 2.5), x, constant);
    const Vector expected = 2.5 * (op.M_free * x);
    EXPECT_LT((constant - expected).tail(n - 1).norm(), 1e-13 * constant.norm());
}

TEST(Coercivity, ThreeNodeAlphaMatchesClosedForm) {
    const auto op = interval(3);
    const auto co = coercivity_diagnostics(op);
    // det(A - l B) = 0 for the 2x2 pair A = K+R, B = M+B_Gamma1, by hand.
    const double h = 0.5;
    const double a11 = 2.0 / h, a12 = -1.0 / h, a22 = 1.0 / h + 1.0;
    const double b11 = 2.0 * h / 3.0, b12 = h / 6.0, b22 = h / 3.0 + 1.0;
    const double qa = b11 * b22 - b12 * b12;
    const double qb = -(a11 * b22 + a22 * b11 - 2.0 * a12 * b12);
    const double qc = a11 * a22 - a12 * a12;
    const double alpha = (-qb - std::sqrt(qb * qb - 4.0 * qa * qc)) / (2.0 * qa);
    EXPECT_NEAR(co.alpha, alpha, 1e-12);
    EXPECT_EQ(co.beta, 0.0);
}

TEST(Coercivity, ScalingStiffnessDoublesAlpha) {
    auto op = interval(17);
    const double alpha = coercivity_diagnostics(op).alpha;
    op.K_free *= 2.0;
    op.R_free *= 2.0;
    EXPECT_NEAR(coercivity_diagnostics(op).alpha, 2.0 * alpha, 1e-10 * alpha);
}

TEST(Coercivity, BoundsHoldOnRandomVectors) {
    for (const auto& op : {interval(33), assemble_operators(build_rectangle_mesh(6, 6, 1.0, 1.0))}) {
        const auto co = coercivity_diagnostics(op);
        EXPECT_GT(co.alpha, 0.0);
        const double bound = boundedness_constant(op);
        const SparseMatrix A = op.K_free + op.R_free, X0 = op.M_free + op.B_free, X1 = op.K_free + op.M_free;
        std::mt19937_64 rng(17);
        const auto n = static_cast<Eigen::Index>(op.free_count());
        for (int trial = 0; trial < 100; ++trial) {
            const Vector u = random_vector(rng, n), w = random_vector(rng, n);
            EXPECT_GE(u.dot(A * u), co.alpha * u.dot(X0 * u) * (1.0 - 1e-12));
            EXPECT_LE(std::abs(u.dot(A * w)), bound * std::sqrt(u.dot(X1 * u) * w.dot(X1 * w)) * (1.0 + 1e-12));
        }
    }
}

TEST(RobinEigenvalues, ConvergeAtSecondOrder) {
    const double k = robin_mode_wavenumber();
    EXPECT_NEAR(k, 2.0288, 1e-4);
    const double mu = k * k;
    std::vector<double> hs, errs;
    for (std::size_t n : {33u, 65u, 129u}) {
        const auto op = interval(n);
        hs.push_back(op.mesh.h);
        errs.push_back(std::abs(robin_eigenvalues(op).minCoeff() - mu));
    }
    const auto fit = fit_loglog(hs, errs);
    EXPECT_NEAR(fit.slope, 2.0, 0.1);
}

TEST(NeumannMap, ZeroDataGivesZero) {
    const auto op = interval(17);
    EXPECT_EQ(neumann_map(op, 1.0, Vector::Zero(1)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(NeumannMap, SinhProfileConvergesAtSecondOrder) {
    auto exact = [](double x) { return std::sinh(x) / (std::cosh(1.0) + std::sinh(1.0)); };
    std::vector<double> hs, errs;
    for (std::size_t n : {33u, 65u, 129u}) {
        const auto op = interval(n);
        const Vector y = neumann_map(op, 1.0, Vector::Ones(1));
        double err = 0.0;
        for (std::size_t i = 0; i < n; ++i) err = std::max(err, std::abs(y[static_cast<Eigen::Index>(i)] - exact(op.mesh.nodes[i][0])));
        hs.push_back(op.mesh.h);
        errs.push_back(err);
    }
    EXPECT_LT(errs.back(), 1e-4);
    const auto fit = fit_loglog(hs, errs);
    EXPECT_GE(fit.slope, 1.8);
    EXPECT_LE(fit.slope, 2.2);
}

TEST(NeumannMap, IsLinearInBoundaryData) {
    const auto op = assemble_operators(build_rectangle_mesh(6, 7, 1.0, 1.0));
    std::mt19937_64 rng(5);
    const auto nb = static_cast<Eigen::Index>(op.boundary_count());
    const Vector g1 = random_vector(rng, nb), g2 = random_vector(rng, nb);
    const Vector sum = neumann_map(op, 1.0, g1 + g2);
    const Vector parts = neumann_map(op, 1.0, g1) + neumann_map(op, 1.0, g2);
    EXPECT_LT((sum - parts).norm(), 1e-12 * sum.norm());
    EXPECT_THROW(neumann_map(op, 1.0, Vector::Ones(nb + 1)), DomainError);
}

TEST(Operators, DumpWritesReadableMatrixMarket) {
    const auto op = interval(5);
    const auto dir = std::filesystem::temp_directory_path() / "spdelab_dump_test";
    std::filesystem::remove_all(dir);
    dump_operators(op, dir);
    SparseMatrix K;
    ASSERT_TRUE(Eigen::loadMarket(K, (dir / "K.mtx").string()));
    EXPECT_LT((dense(K) - dense(op.K)).norm(), 1e-12);
    for (const char* name : {"R.mtx", "M.mtx", "B.mtx"}) EXPECT_TRUE(std::filesystem::exists(dir / name));
    std::filesystem::remove_all(dir);
}
