#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "geossl/rng.hpp"

namespace geossl {

struct TriangleMesh {
    std::vector<std::array<double, 3>> vertices;
    std::vector<std::array<int, 3>> faces;
};

// N sampled surface points with unit normals and a nonnegative scalar
// curvature estimate, in unit-bounding-box coordinates. `origin_face` holds
// the face each point was drawn from; it is transient and not serialized.
struct SurfacePointCloud {
    std::vector<std::array<float, 3>> points;
    std::vector<std::array<float, 3>> normals;
    std::vector<float> curvature;
    std::vector<int> origin_face;
    int nonmanifold_flags = 0;  // points whose origin face touched a non-manifold edge

    static constexpr int kFeatureDim = 4;  // normal (3) + curvature (1)
    size_t size() const { return points.size(); }
};

// --- mesh I/O -----------------------------------------------------------

// Loads .obj (positions and faces; other records ignored) or .stl (ASCII or
// little-endian binary, auto-detected). STL produces one vertex triple per
// facet; call weld_vertices afterwards if edge adjacency is needed.
TriangleMesh load_mesh(const std::filesystem::path& path);

// Writes .obj or .stl chosen by extension. OBJ vertices are printed with 17
// significant digits so a load/save/load round trip is exact.
void save_mesh(const TriangleMesh& mesh, const std::filesystem::path& path);

// Merges vertices that quantize to the same cell of size `tol`. Faces keep
// their orientation; faces that collapse to fewer than 3 distinct vertices
// are retained (degenerate faces are excluded from sampling downstream).
TriangleMesh weld_vertices(const TriangleMesh& mesh, double tol = 1e-7);

// --- canonicalization and sampling --------------------------------------

// Centers the axis-aligned bounding box at the origin and uniformly scales so
// the longest axis spans exactly 1. Throws if every axis has zero extent.
TriangleMesh canonicalize(const TriangleMesh& mesh);

// Draws n points i.i.d. proportionally to face area, uniform within each
// face. Zero-area faces have zero probability. Deterministic given seed.
SurfacePointCloud sample_surface(const TriangleMesh& mesh, int n, uint64_t seed);

// Fills normals (area-weighted average over the origin face and its
// edge-adjacent faces) and curvature (mean dihedral angle between the origin
// face normal and each edge-adjacent face normal, divided by the distance
// between the face centroids). Points whose origin face touches an edge
// shared by more than two faces fall back to the bare face normal with zero
// curvature and are counted in nonmanifold_flags.
void estimate_normals_and_curvature(const TriangleMesh& mesh, SurfacePointCloud& cloud);

// --- helpers ------------------------------------------------------------

std::array<double, 3> face_normal(const TriangleMesh& mesh, int face);
double face_area(const TriangleMesh& mesh, int face);
double total_surface_area(const TriangleMesh& mesh);

}  // namespace geossl
