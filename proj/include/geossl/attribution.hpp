#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "geossl/mesh.hpp"
#include "geossl/trainer.hpp"

namespace geossl {

// Per-cell reconstruction-error field mapped onto mesh vertices.
struct AttributionMap {
    std::vector<int> cells;            // active cell indices, grid order
    std::vector<double> cell_error;    // sum of squared normalized residuals per cell
    std::vector<double> vertex_value;  // one value per canonical mesh vertex
    double vmin = 0.0, vmax = 0.0;     // colormap range over vertex values
};

// Runs the model with every active token masked (predict-everything mode),
// scores each active cell by its squared residual against the normalized
// signature, and assigns each vertex the error of its nearest active cell
// within the coarsest tokenizer radius (0 beyond that). The mesh is
// canonicalized internally; vertex order is preserved.
AttributionMap attribution_map(const Checkpoint& ckpt, const TriangleMesh& mesh,
                               int sample_points, uint64_t seed);

// ASCII PLY with per-vertex colors from a monotone "hot" colormap
// (black -> red -> yellow -> white over the value range) plus the raw value
// as a float "quality" property. Vertices are the canonicalized positions.
void write_attribution_ply(const std::string& path, const TriangleMesh& canonical_mesh,
                           const AttributionMap& map);

}  // namespace geossl
