#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "geossl/mesh.hpp"

namespace geossl {

enum class Bucket { train, val };

// Deterministic, platform-independent split assignment: the first 8 bytes of
// the path's MD5 digest, read big-endian, reduced mod 10000, land in val iff
// below round(val_fraction * 10000). Pure function of the byte string.
Bucket hash_split(std::string_view path, double val_fraction);

constexpr uint32_t kSampleFormatVersion = 1;

// Preprocessed sample: point cloud plus the mesh path it came from.
// origin_face is transient (sampling bookkeeping) and is not serialized.
struct SampleRecord {
    SurfacePointCloud cloud;
    std::string source_path;
    uint32_t format_version = kSampleFormatVersion;
};

// Binary layout: magic "SHPS", u32 version, u32 N, f32 points[N*3],
// f32 normals[N*3], f32 curvature[N], u16 path length, path bytes.
// All scalars little-endian.
void write_sample(const SampleRecord& record, const std::filesystem::path& path);
SampleRecord read_sample(const std::filesystem::path& path);

// Contrastive view: removes a uniformly random floor(dropout*N)-subset, then
// adds i.i.d. N(0, sigma^2) noise to each surviving coordinate. Survivors
// keep their original order; normals and curvature are carried unchanged.
// Throws if fewer than 16 points would survive.
SurfacePointCloud augment_view(const SurfacePointCloud& cloud, float jitter_sigma, float dropout,
                               uint64_t seed);

}  // namespace geossl
