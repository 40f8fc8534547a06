#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "geossl/mesh.hpp"

namespace geossl {

enum class PartKind { box, cylinder, sphere, box_with_fillet, l_bracket };

const char* part_kind_name(PartKind kind);
PartKind part_kind_from_name(const std::string& name);

// Shape dimensions for the synthetic part families. Unused fields are
// ignored by kinds that do not need them. `segments` is the tessellation
// density parameter (>= 4) used by the curved kinds.
struct PartParams {
    double size_x = 1.0, size_y = 1.0, size_z = 1.0;  // box / bracket extents
    double radius = 0.5;                              // cylinder / sphere
    double height = 1.0;                              // cylinder
    double fillet_radius = 0.2;                       // box_with_fillet
    double thickness = 0.3;                           // l_bracket legs
    int segments = 16;
};

// Watertight triangle mesh of the requested primitive. Deterministic given
// (kind, params); `seed` perturbs nothing here, it is reserved for
// randomized corpora via random_part_params.
TriangleMesh generate_synthetic_part(PartKind kind, const PartParams& params);

// Seeded random dimensions for a corpus part of the given kind.
PartParams random_part_params(PartKind kind, uint64_t seed);

// Writes `count` parts (kinds cycled, dimensions seeded per part) as OBJ
// files named part_<index>_<kind>.obj. Returns the relative file names.
std::vector<std::string> generate_corpus(const std::filesystem::path& dir, int count,
                                         uint64_t seed);

}  // namespace geossl
