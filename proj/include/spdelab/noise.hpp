#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "spdelab/error.hpp"
#include "spdelab/hash.hpp"
#include "spdelab/mesh.hpp"

namespace spdelab {

/// Diagonal covariance of the interior (Q1) and boundary (Q2) Wiener
/// processes in a sine eigenbasis, plus noise amplitudes.
struct CovarianceSpec {
    std::vector<double> interior_eigenvalues; ///< q_{1k}, k = 1..K_trunc
    std::vector<double> boundary_eigenvalues; ///< q_{2k}; a single q2 in 1D
    double sigma1 = 0.5;
    double sigma2 = 0.5;
    double tail_tol = 1e-6;

    std::size_t truncation() const { return interior_eigenvalues.size(); }
};

/// q_k = scale * k^(-exponent), k = 1..count.
inline std::vector<double> power_law_spectrum(double scale, double exponent, std::size_t count) {
    std::vector<double> q(count);
    for (std::size_t k = 0; k < count; ++k) q[k] = scale * std::pow(static_cast<double>(k + 1), -exponent);
    return q;
}

/// Default spectra: q_{1k} = k^-3 with 32 modes, q2 = 1, sigma1 = sigma2 = 0.5.
inline CovarianceSpec default_covariance() {
    CovarianceSpec spec;
    spec.interior_eigenvalues = power_law_spectrum(1.0, 3.0, 32);
    spec.boundary_eigenvalues = {1.0};
    return spec;
}

/// Identifies one path's noise. Runs sharing (master_seed, path_index)
/// consume identical increments regardless of epsilon.
struct StreamConfig {
    std::uint64_t master_seed = 0;
    std::uint64_t path_index = 0;
    static constexpr std::uint64_t interior_label = 0x1;
    static constexpr std::uint64_t boundary_label = 0x2;
};

inline StreamConfig coupled_streams(std::uint64_t master_seed, std::uint64_t path_index) {
    return StreamConfig{master_seed, path_index};
}

namespace detail {

inline std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// SplitMix64 sequence; satisfies UniformRandomBitGenerator.
class SplitMix64 {
public:
    using result_type = std::uint64_t;
    explicit SplitMix64(std::uint64_t state) : state_(state) {}
    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
    result_type operator()() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return mix64(state_);
    }

private:
    std::uint64_t state_;
};

inline std::uint64_t stream_key(const StreamConfig& s, std::uint64_t label, std::uint64_t step) {
    std::uint64_t k = mix64(s.master_seed + 0x632be59bd9b4e019ULL);
    k = mix64(k ^ (s.path_index + 0x9e3779b97f4a7c15ULL));
    k = mix64(k ^ (label * 0xd1b54a32d192ed03ULL));
    return mix64(k ^ (step + 0x2545f4914f6cdd1dULL));
}

/// Fits log s_k = c - p log k over the second half of the sequence and
/// returns p; +inf if the sequence is too short to estimate.
inline double decay_exponent(const std::vector<double>& s) {
    const std::size_t n = s.size();
    if (n < 4) return std::numeric_limits<double>::infinity();
    const std::size_t first = n / 2;
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double m = static_cast<double>(n - first);
    for (std::size_t k = first; k < n; ++k) {
        const double x = std::log(static_cast<double>(k + 1)), y = std::log(s[k]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    return -(m * sxy - sx * sy) / (m * sxx - sx * sx);
}

/// Power-law tail estimate of sum_{k > n} s_k; +inf when the exponent says
/// the series diverges.
inline double tail_estimate(const std::vector<double>& s, double exponent) {
    if (!(exponent > 1.0)) return std::numeric_limits<double>::infinity();
    if (!std::isfinite(exponent)) return 0.0;
    const double n = static_cast<double>(s.size());
    // s_k ~ s_n (k/n)^-p, so the tail integral is s_n n / (p - 1).
    return s.back() * n / (exponent - 1.0);
}

} // namespace detail

/// One increment pair (dW1 on nodes, dW2 on the Gamma1 boundary nodes).
struct NoiseIncrement {
    Eigen::VectorXd dW1;
    Eigen::VectorXd dW2;
    double dt = 0.0;

    NoiseIncrement& operator+=(const NoiseIncrement& o) {
        dW1 += o.dW1;
        dW2 += o.dW2;
        dt += o.dt;
        return *this;
    }
};

/// Outcome of the trace-class checks, kept for diagnostics output.
struct TraceCheck {
    double trace_partial = 0.0;          ///< sum_{k<=K} q1k
    double trace_exponent = 0.0;         ///< fitted decay exponent of q1k
    double trace_tail = 0.0;             ///< estimated sum_{k>K} q1k
    double sqrt_a_partial = 0.0;         ///< sum_{k<=K} q1k sqrt(lambda_k)
    double sqrt_a_exponent = 0.0;        ///< fitted decay exponent of q1k sqrt(lambda_k)
    double sqrt_a_tail = 0.0;            ///< estimated tail of the same series
    double boundary_trace = 0.0;         ///< sum q2k
};

/// Truncated Karhunen-Loeve sampler for (W1, W2). Immutable after
/// construction; share freely between workers.
class Sampler {
public:
    Sampler(const CovarianceSpec& spec, const SpatialMesh& mesh) : spec_(spec), dimension_(mesh.dimension) {
        const std::size_t K = spec.truncation();
        if (K == 0) throw ConfigError("noise: truncation K_trunc must be >= 1");
        validate_sequence(spec.interior_eigenvalues, "interior");
        if (spec.boundary_eigenvalues.empty()) throw ConfigError("noise: boundary spectrum is empty");
        validate_sequence(spec.boundary_eigenvalues, "boundary");
        if (!(spec.sigma1 >= 0.0) || !(spec.sigma2 >= 0.0)) throw ConfigError("noise: sigma1, sigma2 must be >= 0");
        if (!(spec.tail_tol > 0.0)) throw ConfigError("noise: tail_tol must be positive");

        const std::size_t n = mesh.node_count();
        interior_modes_.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(K));
        std::vector<double> lambda(K);
        const auto indices = interior_mode_indices(mesh, K);
        for (std::size_t k = 0; k < K; ++k) {
            const auto [i, j] = indices[k];
            lambda[k] = eigenvalue(mesh, i, j);
            for (std::size_t v = 0; v < n; ++v)
                interior_modes_(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(k)) = mode_value(mesh, i, j, mesh.nodes[v]);
        }
        check_trace(lambda);

        std::vector<bool> on_boundary(n, false);
        for (const auto& f : mesh.gamma1_facets)
            for (auto v : f) on_boundary[v] = true;
        std::vector<std::size_t> bnodes;
        for (std::size_t v = 0; v < n; ++v)
            if (on_boundary[v]) bnodes.push_back(v);
        const std::size_t K2 = spec.boundary_eigenvalues.size();
        if (mesh.dimension == 1 && K2 != 1) throw ConfigError("noise: 1D boundary spectrum must hold exactly one q2");
        boundary_modes_.resize(static_cast<Eigen::Index>(bnodes.size()), static_cast<Eigen::Index>(K2));
        for (std::size_t b = 0; b < bnodes.size(); ++b) {
            for (std::size_t k = 0; k < K2; ++k) {
                double value = 1.0;
                if (mesh.dimension == 2) {
                    const double ly = mesh.extent[1];
                    value = std::sqrt(2.0 / ly) * std::sin(static_cast<double>(k + 1) * std::numbers::pi * mesh.nodes[bnodes[b]][1] / ly);
                }
                boundary_modes_(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(k)) = value;
            }
        }
    }

    const CovarianceSpec& spec() const { return spec_; }
    const TraceCheck& trace_check() const { return trace_; }
    /// Mode shapes e_k at the nodes, one column per retained mode.
    const Eigen::MatrixXd& interior_modes() const { return interior_modes_; }
    const Eigen::MatrixXd& boundary_modes() const { return boundary_modes_; }

    /// Deterministic function of (stream, step_index): the same arguments
    /// always yield bit-identical increments.
    NoiseIncrement sample_increment(double dt, const StreamConfig& stream, std::uint64_t step_index) const {
        if (!(dt > 0.0)) throw ConfigError("noise: dt must be positive");
        NoiseIncrement inc;
        inc.dt = dt;
        inc.dW1 = interior_modes_ * draw(spec_.interior_eigenvalues, dt, stream, StreamConfig::interior_label, step_index);
        inc.dW2 = boundary_modes_ * draw(spec_.boundary_eigenvalues, dt, stream, StreamConfig::boundary_label, step_index);
        return inc;
    }

    /// Coefficients of a nodal field in the retained interior modes, by
    /// least squares against the nodal mode shapes with mass weighting `mass`.
    Eigen::VectorXd project_interior(const Eigen::VectorXd& nodal, const Eigen::MatrixXd& mass) const {
        const Eigen::MatrixXd gram = interior_modes_.transpose() * mass * interior_modes_;
        return gram.ldlt().solve(interior_modes_.transpose() * (mass * nodal));
    }

    /// dt * sum_k q1k e_k(x_i) e_k(x_j).
    double interior_covariance(std::size_t i, std::size_t j, double dt) const {
        double s = 0.0;
        for (Eigen::Index k = 0; k < interior_modes_.cols(); ++k)
            s += spec_.interior_eigenvalues[static_cast<std::size_t>(k)] * interior_modes_(static_cast<Eigen::Index>(i), k) *
                 interior_modes_(static_cast<Eigen::Index>(j), k);
        return dt * s;
    }

private:
    static void validate_sequence(const std::vector<double>& q, const char* name) {
        for (std::size_t k = 0; k < q.size(); ++k) {
            if (!(q[k] > 0.0) || !std::isfinite(q[k]))
                throw ConfigError(std::string("noise: ") + name + " eigenvalues must be positive");
            if (k > 0 && q[k] > q[k - 1])
                throw ConfigError(std::string("noise: ") + name + " eigenvalues must be non-increasing");
        }
    }

    void check_trace(const std::vector<double>& lambda) {
        const auto& q = spec_.interior_eigenvalues;
        std::vector<double> weighted(q.size());
        for (std::size_t k = 0; k < q.size(); ++k) weighted[k] = q[k] * std::sqrt(lambda[k]);
        for (double v : q) trace_.trace_partial += v;
        for (double v : weighted) trace_.sqrt_a_partial += v;
        trace_.trace_exponent = detail::decay_exponent(q);
        trace_.sqrt_a_exponent = detail::decay_exponent(weighted);
        trace_.trace_tail = detail::tail_estimate(q, trace_.trace_exponent);
        trace_.sqrt_a_tail = detail::tail_estimate(weighted, trace_.sqrt_a_exponent);
        for (double v : spec_.boundary_eigenvalues) trace_.boundary_trace += v;

        // A power-law series converges iff its exponent exceeds 1; tail_tol is
        // the required margin above that threshold.
        std::string failed;
        if (!(trace_.trace_exponent > 1.0 + spec_.tail_tol))
            failed += " Q1 is not trace class (sum q1k diverges, fitted decay exponent " +
                      std::to_string(trace_.trace_exponent) + ");";
        if (!(trace_.sqrt_a_exponent > 1.0 + spec_.tail_tol))
            failed += " Tr(A^{1/2} Q1) diverges (fitted decay exponent of q1k sqrt(lambda_k) " +
                      std::to_string(trace_.sqrt_a_exponent) + ");";
        if (!failed.empty()) throw ConfigError("noise:" + failed);
        if (dimension_ == 2 && !(detail::decay_exponent(spec_.boundary_eigenvalues) > 1.0 + spec_.tail_tol))
            throw ConfigError("noise: Q2 is not trace class");
    }

    static std::vector<std::pair<std::size_t, std::size_t>> interior_mode_indices(const SpatialMesh& mesh, std::size_t K) {
        std::vector<std::pair<std::size_t, std::size_t>> out;
        if (mesh.dimension == 1) {
            for (std::size_t k = 1; k <= K; ++k) out.emplace_back(k, 0);
            return out;
        }
        // Product modes ordered by Laplacian eigenvalue.
        const std::size_t side = K + 1;
        for (std::size_t i = 1; i <= side; ++i)
            for (std::size_t j = 1; j <= side; ++j) out.emplace_back(i, j);
        std::stable_sort(out.begin(), out.end(), [&](auto l, auto r) {
            return eigenvalue(mesh, l.first, l.second) < eigenvalue(mesh, r.first, r.second);
        });
        out.resize(K);
        return out;
    }

    static double eigenvalue(const SpatialMesh& mesh, std::size_t i, std::size_t j) {
        const double kx = static_cast<double>(i) * std::numbers::pi / mesh.extent[0];
        if (mesh.dimension == 1) return kx * kx;
        const double ky = static_cast<double>(j) * std::numbers::pi / mesh.extent[1];
        return kx * kx + ky * ky;
    }

    static double mode_value(const SpatialMesh& mesh, std::size_t i, std::size_t j, const SpatialMesh::Point& p) {
        const double lx = mesh.extent[0];
        const double ex = std::sqrt(2.0 / lx) * std::sin(static_cast<double>(i) * std::numbers::pi * p[0] / lx);
        if (mesh.dimension == 1) return ex;
        const double ly = mesh.extent[1];
        return ex * std::sqrt(2.0 / ly) * std::sin(static_cast<double>(j) * std::numbers::pi * p[1] / ly);
    }

    static Eigen::VectorXd draw(const std::vector<double>& q, double dt, const StreamConfig& stream,
                                std::uint64_t label, std::uint64_t step) {
        detail::SplitMix64 rng(detail::stream_key(stream, label, step));
        std::normal_distribution<double> normal;
        Eigen::VectorXd xi(static_cast<Eigen::Index>(q.size()));
        for (std::size_t k = 0; k < q.size(); ++k) xi[static_cast<Eigen::Index>(k)] = std::sqrt(q[k] * dt) * normal(rng);
        return xi;
    }

    CovarianceSpec spec_;
    int dimension_;
    Eigen::MatrixXd interior_modes_;
    Eigen::MatrixXd boundary_modes_;
    TraceCheck trace_;
};

inline Sampler build_sampler(const CovarianceSpec& spec, const SpatialMesh& mesh) { return Sampler(spec, mesh); }

inline NoiseIncrement sample_increment(const Sampler& sampler, double dt, const StreamConfig& stream,
                                       std::uint64_t step_index) {
    return sampler.sample_increment(dt, stream, step_index);
}

/// Hash of a whole increment sequence, for reproducibility audits.
inline std::string noise_hash(const std::vector<NoiseIncrement>& increments) {
    Fnv1a h;
    for (const auto& inc : increments) {
        h.update(std::span<const double>(inc.dW1.data(), static_cast<std::size_t>(inc.dW1.size())));
        h.update(std::span<const double>(inc.dW2.data(), static_cast<std::size_t>(inc.dW2.size())));
    }
    return h.hex();
}

} // namespace spdelab
