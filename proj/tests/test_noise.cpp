#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "spdelab/dynamics.hpp"
#include "spdelab/mesh.hpp"
#include "spdelab/noise.hpp"
#include "spdelab/operators.hpp"

using namespace spdelab;

namespace {

bool same(const NoiseIncrement& a, const NoiseIncrement& b) {
    return a.dt == b.dt && a.dW1.size() == b.dW1.size() && a.dW2.size() == b.dW2.size() &&
           (a.dW1.array() == b.dW1.array()).all() && (a.dW2.array() == b.dW2.array()).all();
}

std::string message_of(const CovarianceSpec& spec, const SpatialMesh& mesh) {
    try {
        Sampler s(spec, mesh);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return {};
}

// (E' M E)^{-1} E' M: coefficients of a nodal field in the retained modes.
Eigen::MatrixXd mode_projector(const Sampler& s, const DiscreteOperator& op) {
    const Eigen::MatrixXd M(op.M);
    const auto& E = s.interior_modes();
    return (E.transpose() * M * E).ldlt().solve(E.transpose() * M);
}

} // namespace

TEST(Sampler, DefaultSpectrumIsAccepted) {
    const auto mesh = build_interval_mesh(129, 1.0);
    const Sampler s(default_covariance(), mesh);
    double partial = 0.0, weighted = 0.0;
    for (int k = 1; k <= 32; ++k) {
        partial += std::pow(k, -3.0);
        weighted += std::pow(k, -3.0) * k * std::numbers::pi;
    }
    EXPECT_NEAR(s.trace_check().trace_partial, partial, 1e-12);
    EXPECT_NEAR(s.trace_check().sqrt_a_partial, weighted, 1e-10);
    // sum_k k^-3 (k pi) converges to pi * zeta(2) = pi^3 / 6.
    EXPECT_LT(s.trace_check().sqrt_a_partial, std::pow(std::numbers::pi, 3) / 6.0);
    EXPECT_NEAR(s.trace_check().sqrt_a_exponent, 2.0, 1e-9);
}

TEST(Sampler, HarmonicSpectrumFailsSqrtATraceCondition) {
    auto spec = default_covariance();
    spec.interior_eigenvalues = power_law_spectrum(1.0, 1.0, 32);
    const auto msg = message_of(spec, build_interval_mesh(65, 1.0));
    EXPECT_NE(msg.find("Tr(A^{1/2} Q1)"), std::string::npos) << msg;
}

TEST(Sampler, RejectsInvalidSpectra) {
    const auto mesh = build_interval_mesh(33, 1.0);
    auto spec = default_covariance();
    spec.interior_eigenvalues.clear();
    EXPECT_THROW(Sampler(spec, mesh), ConfigError);
    spec = default_covariance();
    spec.interior_eigenvalues[3] = 2.0;
    EXPECT_THROW(Sampler(spec, mesh), ConfigError);
    spec = default_covariance();
    spec.interior_eigenvalues[0] = -1.0;
    EXPECT_THROW(Sampler(spec, mesh), ConfigError);
}

TEST(Sampler, TwoDimensionalBoundarySpectrumMustBeTraceClass) {
    const auto mesh = build_rectangle_mesh(9, 9, 1.0, 1.0);
    auto spec = default_covariance();
    spec.boundary_eigenvalues = power_law_spectrum(1.0, 2.0, 8);
    EXPECT_NO_THROW(Sampler(spec, mesh));
    spec.boundary_eigenvalues = std::vector<double>(8, 1.0);
    EXPECT_THROW(Sampler(spec, mesh), ConfigError);
}

TEST(Sampler, IncrementsAreDeterministicPerStreamAndStep) {
    const auto mesh = build_interval_mesh(33, 1.0);
    const Sampler s(default_covariance(), mesh);
    const auto stream = coupled_streams(42, 7);
    EXPECT_TRUE(same(s.sample_increment(1e-3, stream, 12), s.sample_increment(1e-3, stream, 12)));
    EXPECT_FALSE(same(s.sample_increment(1e-3, stream, 12), s.sample_increment(1e-3, stream, 13)));
    EXPECT_FALSE(same(s.sample_increment(1e-3, stream, 12), s.sample_increment(1e-3, coupled_streams(42, 8), 12)));
    EXPECT_FALSE(same(s.sample_increment(1e-3, stream, 12), s.sample_increment(1e-3, coupled_streams(43, 7), 12)));
    EXPECT_THROW(s.sample_increment(0.0, stream, 0), ConfigError);
}

TEST(Sampler, NodalMeansVanish) {
    const auto mesh = build_interval_mesh(17, 1.0);
    const Sampler s(default_covariance(), mesh);
    const int N = 10000;
    const double dt = 1e-2;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(17), sq = Eigen::VectorXd::Zero(17);
    for (int i = 0; i < N; ++i) {
        const auto inc = s.sample_increment(dt, coupled_streams(1, 0), static_cast<std::uint64_t>(i));
        sum += inc.dW1;
        sq += inc.dW1.cwiseProduct(inc.dW1);
    }
    for (Eigen::Index j = 1; j < 17; ++j) {
        const double mean = sum[j] / N;
        const double var = sq[j] / N - mean * mean;
        EXPECT_LT(std::abs(mean), 4.0 * std::sqrt(var / N)) << "node " << j;
    }
}

TEST(Sampler, NodeCovarianceMatchesTruncatedSeries) {
    const auto mesh = build_interval_mesh(33, 1.0);
    const Sampler s(default_covariance(), mesh);
    const std::size_t i = 8, j = 20;
    const double dt = 1e-3;
    double closed = 0.0;
    for (int k = 1; k <= 32; ++k)
        closed += std::pow(k, -3.0) * 2.0 * std::sin(k * std::numbers::pi * mesh.nodes[i][0]) *
                  std::sin(k * std::numbers::pi * mesh.nodes[j][0]);
    closed *= dt;
    EXPECT_NEAR(s.interior_covariance(i, j, dt), closed, 1e-15);

    const int N = 40000;
    double cij = 0.0, cii = 0.0, cjj = 0.0;
    for (int n = 0; n < N; ++n) {
        const auto inc = s.sample_increment(dt, coupled_streams(9, 3), static_cast<std::uint64_t>(n));
        const double a = inc.dW1[static_cast<Eigen::Index>(i)], b = inc.dW1[static_cast<Eigen::Index>(j)];
        cij += a * b;
        cii += a * a;
        cjj += b * b;
    }
    cij /= N;
    cii /= N;
    cjj /= N;
    const double se = std::sqrt((cii * cjj + cij * cij) / N);
    EXPECT_LT(std::abs(cij - closed), 4.0 * se);
}

TEST(Sampler, ModeVariancesAndInteriorBoundaryIndependence) {
    const auto mesh = build_interval_mesh(129, 1.0);
    const auto op = assemble_operators(mesh);
    const Sampler s(default_covariance(), mesh);
    const Eigen::MatrixXd P = mode_projector(s, op);
    const int N = 100000;
    const double dt = 1e-3;
    const auto K = static_cast<Eigen::Index>(s.spec().truncation());
    Eigen::VectorXd sq = Eigen::VectorXd::Zero(K), cross = Eigen::VectorXd::Zero(K);
    double b2 = 0.0;
    for (int n = 0; n < N; ++n) {
        const auto inc = s.sample_increment(dt, coupled_streams(2024, 0), static_cast<std::uint64_t>(n));
        const Eigen::VectorXd xi = P * inc.dW1 / std::sqrt(dt);
        const double eta = inc.dW2[0] / std::sqrt(dt);
        sq += xi.cwiseProduct(xi);
        cross += eta * xi;
        b2 += eta * eta;
    }
    const double rel_se = std::sqrt(2.0 / (N - 1));
    for (Eigen::Index k = 0; k < K; ++k) {
        const double q = std::pow(static_cast<double>(k + 1), -3.0);
        const double var = sq[k] / N;
        EXPECT_LT(std::abs(var / q - 1.0), 5.0 * rel_se) << "mode " << k + 1;
        const double corr = cross[k] / std::sqrt(sq[k] * b2);
        EXPECT_LT(std::abs(corr), 4.0 / std::sqrt(static_cast<double>(N))) << "mode " << k + 1;
    }
    EXPECT_LT(std::abs(b2 / N - 1.0), 5.0 * rel_se);
}

TEST(CoupledStreams, SameNoiseAcrossEpsilonDifferentAcrossPaths) {
    auto op = std::make_shared<const DiscreteOperator>(assemble_operators(build_interval_mesh(17, 1.0)));
    SystemConfig cfg;
    cfg.dt = 1e-2;
    const Sampler sampler(cfg.noise, op->mesh);
    auto run = [&](double eps, std::uint64_t path) {
        SystemConfig c = cfg;
        c.epsilon = eps;
        const Dynamics dyn(op, c);
        return simulate_path(dyn, sampler, coupled_streams(5, path), SystemKind::full);
    };
    const auto a = run(0.1, 0), b = run(0.01, 0), c = run(0.1, 1), a2 = run(0.1, 0);
    EXPECT_EQ(a.noise_hash, b.noise_hash);
    EXPECT_NE(a.noise_hash, c.noise_hash);
    ASSERT_EQ(a.size(), a2.size());
    for (std::size_t k = 0; k < a.size(); ++k) ASSERT_TRUE((a.states[k].array() == a2.states[k].array()).all());
}
