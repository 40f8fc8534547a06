#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "geossl/mesh.hpp"

namespace geossl {

// Fixed H x W x D grid of latent cells covering the unit box. Cell (ix,iy,iz)
// has flat index ix + H*(iy + W*iz) (x fastest), matching the patchify
// ordering downstream.
struct LatentGrid {
    int H = 0, W = 0, D = 0;
    int T = 0;
    std::vector<std::array<float, 3>> coords;  // cell centers, in [-0.5, 0.5]^3
};

LatentGrid build_latent_grid(int H, int W, int D);

// Exact neighbor lists: for every cell, the indices of all cloud points with
// Euclidean distance <= r from the cell center, ascending. Accelerated by a
// uniform spatial hash of bucket size r; results match the brute-force scan.
std::vector<std::vector<int>> radius_neighbors(const SurfacePointCloud& cloud,
                                               const LatentGrid& grid, float r);

// O(T*N) reference scan, used by tests as the oracle.
std::vector<std::vector<int>> radius_neighbors_brute(const SurfacePointCloud& cloud,
                                                     const LatentGrid& grid, float r);

constexpr int kSignatureDim = 28;

// Per-cell 28-dim raw statistics over the finest-radius neighborhood:
// {mean, std, min, max} of relative position (3), normal (3) and curvature
// (1), laid out group-major: pos-mean(3), pos-std(3), pos-min(3), pos-max(3),
// then the same four statistics for normals (12), then curvature (4).
// Standard deviation is the population convention (divide by count).
// Cells with no neighbor are inactive and carry an all-zero signature.
struct GeoSignatureSet {
    std::vector<float> signatures;  // T x 28, row-major
    std::vector<char> active;       // T
    std::vector<int> active_indices;
    int active_count() const { return static_cast<int>(active_indices.size()); }
};

GeoSignatureSet geo_signature(const SurfacePointCloud& cloud, const LatentGrid& grid,
                              const std::vector<std::vector<int>>& finest_neighbors);

}  // namespace geossl
