#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "puddle/core.hpp"
#include "puddle/refmap.hpp"

// Export bundle (`.pexp`): an 16-byte file header
//   char[8] "PUDBNDL1", u32 version, u32 section count
// followed by sections
//   u32 kind, u64 payload length, payload, u32 CRC-32C of the payload.
// Section 1 (manifest) comes first, then one section 2 per puddle in
// manifest order, then section 3 with the reference maps.
namespace puddle::bundle {

inline constexpr std::uint64_t kMagic = 0x314C444E42445550ull; // "PUDBNDL1"
inline constexpr std::uint32_t kVersion = 1;

enum class Section : std::uint32_t { manifest = 1, puddle_image = 2, ref_maps = 3 };

struct ManifestEntry {
    PuddleId id;
    PuddleKind kind = PuddleKind::data;
    std::uint64_t total_size = 0;
    std::uint64_t heap_size = 0;
    std::uint64_t assigned = 0;
};

struct Manifest {
    std::uint32_t format_version = kFormatVersion;
    std::string pool_name;
    PuddleId pool;
    PuddleId root;
    std::vector<ManifestEntry> puddles;
};

struct Bundle {
    Manifest manifest;
    std::vector<Bytes> images; // parallel to manifest.puddles
    std::vector<ReferenceMap> maps;
};

Bytes encode(const Bundle& b);
/// corrupt_bundle on framing or checksum errors, version_mismatch on an
/// unsupported bundle or puddle format version.
Bundle decode(ByteSpan bytes);

void write_file(int fd, const Bundle& b);
Bundle read_file(int fd);

} // namespace puddle::bundle
