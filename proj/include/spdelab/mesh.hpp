#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "spdelab/error.hpp"

namespace spdelab {

enum class BoundaryTag { Gamma1, Gamma2 };

/// Simplicial P1 mesh in one or two space dimensions.
///
/// Elements are intervals (1D) or triangles (2D). Boundary facets on the
/// dynamical part of the boundary are listed separately so the boundary mass
/// and Robin matrices can be assembled over them.
struct SpatialMesh {
    using Point = std::array<double, 2>;

    int dimension = 1;
    std::vector<Point> nodes;
    std::vector<std::vector<std::size_t>> elements;
    /// Per node; empty optional for interior nodes.
    std::vector<std::optional<BoundaryTag>> boundary_tags;
    /// Facets (points in 1D, edges in 2D) lying on the closure of Gamma1.
    std::vector<std::vector<std::size_t>> gamma1_facets;
    double h = 0.0;
    /// Extent of the domain, (L) in 1D or (Lx, Ly) in 2D.
    Point extent{0.0, 0.0};

    std::size_t node_count() const { return nodes.size(); }

    std::vector<std::size_t> nodes_tagged(BoundaryTag tag) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < boundary_tags.size(); ++i)
            if (boundary_tags[i] == tag) out.push_back(i);
        return out;
    }
};

/// Uniform mesh of (0, length). Node 0 is Dirichlet, node n-1 carries the
/// dynamical boundary condition.
inline SpatialMesh build_interval_mesh(std::size_t n, double length) {
    if (n < 3) throw DomainError("interval mesh needs at least 3 nodes, got " + std::to_string(n));
    if (!(length > 0.0) || !std::isfinite(length))
        throw DomainError("interval length must be positive and finite");

    SpatialMesh mesh;
    mesh.dimension = 1;
    mesh.h = length / static_cast<double>(n - 1);
    mesh.extent = {length, 0.0};
    mesh.nodes.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        mesh.nodes[i] = {length * static_cast<double>(i) / static_cast<double>(n - 1), 0.0};
    mesh.nodes.back()[0] = length;
    mesh.elements.reserve(n - 1);
    for (std::size_t e = 0; e + 1 < n; ++e) mesh.elements.push_back({e, e + 1});
    mesh.boundary_tags.assign(n, std::nullopt);
    mesh.boundary_tags.front() = BoundaryTag::Gamma2;
    mesh.boundary_tags.back() = BoundaryTag::Gamma1;
    mesh.gamma1_facets.push_back({n - 1});
    return mesh;
}

/// Uniform triangulation of (0,lx) x (0,ly) with nx x ny nodes. Gamma1 is the
/// open right edge x = lx; every other boundary node (corners included) is
/// Dirichlet.
inline SpatialMesh build_rectangle_mesh(std::size_t nx, std::size_t ny, double lx, double ly) {
    if (nx < 3 || ny < 3) throw DomainError("rectangle mesh needs at least 3 nodes per direction");
    if (!(lx > 0.0) || !(ly > 0.0)) throw DomainError("rectangle extents must be positive");

    SpatialMesh mesh;
    mesh.dimension = 2;
    mesh.extent = {lx, ly};
    const double hx = lx / static_cast<double>(nx - 1);
    const double hy = ly / static_cast<double>(ny - 1);
    mesh.h = std::hypot(hx, hy);
    auto id = [nx](std::size_t i, std::size_t j) { return j * nx + i; };

    mesh.nodes.resize(nx * ny);
    mesh.boundary_tags.assign(nx * ny, std::nullopt);
    for (std::size_t j = 0; j < ny; ++j) {
        for (std::size_t i = 0; i < nx; ++i) {
            mesh.nodes[id(i, j)] = {hx * static_cast<double>(i), hy * static_cast<double>(j)};
            const bool on_left = i == 0, on_right = i == nx - 1;
            const bool on_bottom = j == 0, on_top = j == ny - 1;
            if (on_left || on_bottom || on_top)
                mesh.boundary_tags[id(i, j)] = BoundaryTag::Gamma2;
            else if (on_right)
                mesh.boundary_tags[id(i, j)] = BoundaryTag::Gamma1;
        }
    }
    for (std::size_t j = 0; j + 1 < ny; ++j) {
        for (std::size_t i = 0; i + 1 < nx; ++i) {
            mesh.elements.push_back({id(i, j), id(i + 1, j), id(i + 1, j + 1)});
            mesh.elements.push_back({id(i, j), id(i + 1, j + 1), id(i, j + 1)});
        }
    }
    for (std::size_t j = 0; j + 1 < ny; ++j) mesh.gamma1_facets.push_back({id(nx - 1, j), id(nx - 1, j + 1)});
    return mesh;
}

/// Throws DomainError when the mesh violates its structural invariants.
inline void validate_mesh(const SpatialMesh& mesh) {
    if (mesh.dimension != 1 && mesh.dimension != 2) throw DomainError("mesh dimension must be 1 or 2");
    if (!(mesh.h > 0.0)) throw DomainError("mesh size h must be positive");
    if (mesh.boundary_tags.size() != mesh.nodes.size()) throw DomainError("boundary tag count mismatch");
    if (mesh.nodes_tagged(BoundaryTag::Gamma1).empty()) throw DomainError("Gamma1 is empty");
    if (mesh.nodes_tagged(BoundaryTag::Gamma2).empty()) throw DomainError("Gamma2 is empty");
    const std::size_t per_element = mesh.dimension == 1 ? 2 : 3;
    for (const auto& el : mesh.elements) {
        if (el.size() != per_element) throw DomainError("element with wrong vertex count");
        for (auto v : el)
            if (v >= mesh.nodes.size()) throw DomainError("element references missing node");
    }
}

} // namespace spdelab
