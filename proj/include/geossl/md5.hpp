#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace geossl {

// RFC 1321 MD5. Used only for the deterministic train/val split, where the
// digest of a file path must be stable across platforms and runs.
std::array<uint8_t, 16> md5(std::string_view data);

std::string md5_hex(std::string_view data);

}  // namespace geossl
