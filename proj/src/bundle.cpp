#include "puddle/bundle.hpp"

#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "puddle/crc32c.hpp"

namespace puddle::bundle {

namespace {

void section(Writer& out, Section kind, const Bytes& payload)
{
    out.u32(static_cast<std::uint32_t>(kind)).u64(payload.size()).raw(payload).u32(crc32c(payload));
}

} // namespace

Bytes encode(const Bundle& b)
{
    if (b.images.size() != b.manifest.puddles.size()) {
        fail(Errc::corrupt_bundle, "image count does not match manifest");
    }
    Writer out;
    out.u64(kMagic).u32(kVersion).u32(static_cast<std::uint32_t>(2 + b.images.size()));

    Writer m;
    m.u32(b.manifest.format_version).str(b.manifest.pool_name);
    put_id(m, b.manifest.pool);
    put_id(m, b.manifest.root);
    m.u32(static_cast<std::uint32_t>(b.manifest.puddles.size()));
    for (const auto& e : b.manifest.puddles) {
        put_id(m, e.id);
        m.u32(static_cast<std::uint32_t>(e.kind)).u64(e.total_size).u64(e.heap_size).u64(e.assigned);
    }
    section(out, Section::manifest, m.bytes());

    for (std::size_t i = 0; i < b.images.size(); ++i) {
        Writer img;
        put_id(img, b.manifest.puddles[i].id);
        img.raw(b.images[i]);
        section(out, Section::puddle_image, img.bytes());
    }

    Writer maps;
    maps.u32(static_cast<std::uint32_t>(b.maps.size()));
    for (const auto& map : b.maps) {
        map.encode(maps);
    }
    section(out, Section::ref_maps, maps.bytes());
    return out.take();
}

Bundle decode(ByteSpan bytes)
{
    Reader r(bytes, Errc::corrupt_bundle);
    if (r.u64() != kMagic) {
        fail(Errc::corrupt_bundle, "not a bundle");
    }
    if (auto v = r.u32(); v != kVersion) {
        fail(Errc::version_mismatch, "unsupported bundle version " + std::to_string(v));
    }
    auto count = r.u32();
    Bundle b;
    bool have_manifest = false;
    bool have_maps = false;
    for (std::uint32_t s = 0; s < count; ++s) {
        auto kind = static_cast<Section>(r.u32());
        auto len = r.u64();
        if (len > r.remaining()) {
            fail(Errc::corrupt_bundle, "section overruns bundle");
        }
        auto payload = r.raw(len);
        if (r.u32() != crc32c(payload)) {
            fail(Errc::corrupt_bundle, "section checksum mismatch");
        }
        Reader p(payload, Errc::corrupt_bundle);
        switch (kind) {
        case Section::manifest: {
            if (have_manifest) {
                fail(Errc::corrupt_bundle, "duplicate manifest");
            }
            have_manifest = true;
            auto& m = b.manifest;
            m.format_version = p.u32();
            if (m.format_version != kFormatVersion) {
                fail(Errc::version_mismatch, "unsupported puddle format " + std::to_string(m.format_version));
            }
            m.pool_name = p.str();
            m.pool = get_id(p);
            m.root = get_id(p);
            auto n = p.u32();
            for (std::uint32_t i = 0; i < n; ++i) {
                ManifestEntry e;
                e.id = get_id(p);
                e.kind = static_cast<PuddleKind>(p.u32());
                e.total_size = p.u64();
                e.heap_size = p.u64();
                e.assigned = p.u64();
                m.puddles.push_back(e);
            }
            break;
        }
        case Section::puddle_image: {
            if (!have_manifest || b.images.size() >= b.manifest.puddles.size()) {
                fail(Errc::corrupt_bundle, "image section out of order");
            }
            const auto& e = b.manifest.puddles[b.images.size()];
            if (get_id(p) != e.id || p.remaining() != e.total_size) {
                fail(Errc::corrupt_bundle, "image does not match manifest entry");
            }
            auto img = p.raw(e.total_size);
            b.images.emplace_back(img.begin(), img.end());
            break;
        }
        case Section::ref_maps: {
            auto n = p.u32();
            for (std::uint32_t i = 0; i < n; ++i) {
                b.maps.push_back(ReferenceMap::decode(p));
            }
            have_maps = true;
            break;
        }
        default:
            fail(Errc::corrupt_bundle, "unknown section kind");
        }
    }
    if (!have_manifest || !have_maps || b.images.size() != b.manifest.puddles.size()) {
        fail(Errc::corrupt_bundle, "incomplete bundle");
    }
    bool root_listed = false;
    for (const auto& e : b.manifest.puddles) {
        root_listed |= e.id == b.manifest.root;
    }
    if (!root_listed) {
        fail(Errc::corrupt_bundle, "root puddle missing from manifest");
    }
    return b;
}

void write_file(int fd, const Bundle& b)
{
    auto bytes = encode(b);
    if (::ftruncate(fd, 0) != 0 && errno != EINVAL) {
        fail(Errc::io_failure, std::string("truncate bundle: ") + std::strerror(errno));
    }
    std::size_t off = 0;
    while (off < bytes.size()) {
        auto k = ::pwrite(fd, bytes.data() + off, bytes.size() - off, static_cast<off_t>(off));
        if (k < 0) {
            if (errno == EINTR) {
                continue;
            }
            fail(Errc::io_failure, std::string("write bundle: ") + std::strerror(errno));
        }
        off += static_cast<std::size_t>(k);
    }
    ::fsync(fd);
}

Bundle read_file(int fd)
{
    struct stat st {};
    if (::fstat(fd, &st) != 0) {
        fail(Errc::io_failure, "stat bundle");
    }
    Bytes bytes(static_cast<std::size_t>(st.st_size));
    std::size_t off = 0;
    while (off < bytes.size()) {
        auto k = ::pread(fd, bytes.data() + off, bytes.size() - off, static_cast<off_t>(off));
        if (k < 0 && errno == EINTR) {
            continue;
        }
        if (k <= 0) {
            fail(Errc::io_failure, "read bundle");
        }
        off += static_cast<std::size_t>(k);
    }
    return decode(bytes);
}

} // namespace puddle::bundle
