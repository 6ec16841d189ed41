#pragma once

#include <array>
#include <compare>
#include <cstring>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include "puddle/bytes.hpp"
#include "puddle/fd.hpp"
#include "puddle/pmem.hpp"

namespace puddle {

/// 128-bit puddle identifier.
struct PuddleId {
    std::array<std::uint8_t, 16> bytes{};

    static PuddleId random();
    static PuddleId parse(std::string_view hex);
    std::string hex() const;
    bool nil() const noexcept;

    auto operator<=>(const PuddleId&) const = default;
};

inline void put_id(Writer& w, const PuddleId& id)
{
    w.raw(std::as_bytes(std::span(id.bytes)));
}

inline PuddleId get_id(Reader& r)
{
    PuddleId id;
    auto b = r.raw(id.bytes.size());
    std::memcpy(id.bytes.data(), b.data(), b.size());
    return id;
}

inline constexpr std::size_t kPage = 4096;
inline constexpr std::uint64_t kHeapPerHeaderPage = 2ull << 20;
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint64_t kRootOffset = 0;
inline constexpr std::uint64_t kNullOffset = ~std::uint64_t{0};

enum class PuddleKind : std::uint32_t { data = 1, log = 2, log_space = 3 };

enum HeaderFlags : std::uint32_t {
    kRelocPending = 1u << 0,
};

/// Bit-exact header field offsets (little-endian).
namespace hdr {
inline constexpr std::size_t magic = 0;          // char[8] "PUDDLE01"
inline constexpr std::size_t version = 8;        // u32
inline constexpr std::size_t flags = 12;         // u32
inline constexpr std::size_t uuid = 16;          // u8[16]
inline constexpr std::size_t total_size = 32;    // u64
inline constexpr std::size_t header_size = 40;   // u64
inline constexpr std::size_t heap_size = 48;     // u64
inline constexpr std::size_t assigned_base = 56; // u64, 0 = none
inline constexpr std::size_t root_offset = 64;   // u64, ~0 = null root
inline constexpr std::size_t meta_offset = 72;   // u64
inline constexpr std::size_t meta_size = 80;     // u64
inline constexpr std::size_t data_units = 88;    // u32
inline constexpr std::size_t max_order = 92;     // u32
inline constexpr std::size_t allocated = 96;     // u64
inline constexpr std::size_t kind = 104;         // u32
inline constexpr std::size_t fixed_end = 128;    // alloc metadata starts here
} // namespace hdr

inline constexpr std::string_view kHeaderMagic = "PUDDLE01";

/// 4 KiB of header for every started 2 MiB of heap.
std::uint64_t header_size_for(std::uint64_t heap_size) noexcept;

/// Read-only accessors over a mapped header.
class HeaderView {
public:
    explicit HeaderView(const std::byte* base) noexcept : p_(base) {}

    bool valid_magic() const noexcept;
    std::uint32_t version() const noexcept { return load<std::uint32_t>(p_ + hdr::version); }
    std::uint32_t flags() const noexcept { return load<std::uint32_t>(p_ + hdr::flags); }
    PuddleId uuid() const noexcept;
    std::uint64_t total_size() const noexcept { return load<std::uint64_t>(p_ + hdr::total_size); }
    std::uint64_t header_size() const noexcept { return load<std::uint64_t>(p_ + hdr::header_size); }
    std::uint64_t heap_size() const noexcept { return load<std::uint64_t>(p_ + hdr::heap_size); }
    std::uint64_t assigned_base() const noexcept { return load<std::uint64_t>(p_ + hdr::assigned_base); }
    std::uint64_t root_offset() const noexcept { return load<std::uint64_t>(p_ + hdr::root_offset); }
    PuddleKind kind() const noexcept { return static_cast<PuddleKind>(load<std::uint32_t>(p_ + hdr::kind)); }

    /// Throws corrupt_metadata if the header is not a puddle header of this
    /// format version or disagrees with `file_size`.
    void validate(std::uint64_t file_size) const;

private:
    const std::byte* p_;
};

/// Creates `<dir>/<uuid-hex>.pud` with a durable, initialized header and a
/// zeroed heap.  No address is assigned.
struct CreatedPuddle {
    PuddleId id;
    std::filesystem::path path;
    std::unique_ptr<pmem::PersistentDomain> domain;
};
CreatedPuddle create_puddle(const std::filesystem::path& dir, std::uint64_t heap_size,
                            PuddleKind kind, pmem::Platform* platform = nullptr,
                            std::optional<PuddleId> id = std::nullopt);

std::filesystem::path puddle_file(const std::filesystem::path& dir, const PuddleId& id);

/// Removes a puddle file and its durable shadow.
void remove_puddle_file(const std::filesystem::path& path);

struct AddressRange {
    std::uint64_t start = 0;
    std::uint64_t length = 0;

    std::uint64_t end() const noexcept { return start + length; }
    bool contains(std::uint64_t a) const noexcept { return a >= start && a - start < length; }
    bool overlaps(const AddressRange& o) const noexcept
    {
        return start < o.end() && o.start < end();
    }
    auto operator<=>(const AddressRange&) const = default;
};

/// Page-granular reservation map over the global persistent address range.
/// First-fit placement; a hint is honored iff its whole range is free.
class AddressMap {
public:
    AddressMap(std::uint64_t base, std::uint64_t length);

    std::uint64_t base() const noexcept { return base_; }
    std::uint64_t length() const noexcept { return length_; }

    std::uint64_t assign(const PuddleId& id, std::uint64_t size,
                         std::optional<std::uint64_t> hint = std::nullopt);
    /// Reserves exactly `start` (journal replay, import); fails if taken.
    void reserve_at(const PuddleId& id, std::uint64_t start, std::uint64_t size);
    bool range_free(std::uint64_t start, std::uint64_t size) const;
    void release(const PuddleId& id);

    std::optional<AddressRange> reservation(const PuddleId& id) const;
    std::optional<PuddleId> owner_of(std::uint64_t addr) const;
    const std::map<std::uint64_t, std::uint64_t>& free_extents() const noexcept { return free_; }
    std::size_t reservations() const noexcept { return by_id_.size(); }

private:
    void take(std::uint64_t start, std::uint64_t size);

    std::uint64_t base_;
    std::uint64_t length_;
    std::map<std::uint64_t, std::uint64_t> free_; // start -> length
    std::map<PuddleId, AddressRange> by_id_;
    std::map<std::uint64_t, PuddleId> by_start_;
};

/// Right to map one puddle, as issued by the daemon.
struct Capability {
    PuddleId id;
    PuddleKind kind = PuddleKind::data;
    std::uint64_t total_size = 0;
    std::uint64_t assigned = 0; // 0 = no address assigned
    bool writable = false;
    UniqueFd backing;
    UniqueFd shadow;
};

/// Opens fds for an existing puddle file; size, kind and address come from
/// its header.
Capability open_capability(const std::filesystem::path& path, bool writable);

struct GlobalSpaceConfig {
    std::uint64_t base = 0x200000000000ull;
    std::uint64_t length = 64ull << 30;
};

/// A process's view of the global persistent range: one PROT_NONE
/// reservation into which puddles are mapped at their assigned addresses.
class GlobalSpace {
public:
    struct Mapping {
        PuddleId id;
        AddressRange range;
        std::unique_ptr<pmem::PersistentDomain> domain;
    };

    explicit GlobalSpace(GlobalSpaceConfig config = {}, pmem::Platform* platform = nullptr);
    GlobalSpace(const GlobalSpace&) = delete;
    GlobalSpace& operator=(const GlobalSpace&) = delete;
    ~GlobalSpace();

    std::uint64_t base() const noexcept { return config_.base; }
    std::uint64_t length() const noexcept { return config_.length; }
    bool in_space(std::uint64_t addr) const noexcept
    {
        return addr >= config_.base && addr - config_.base < config_.length;
    }
    pmem::Platform& platform() const noexcept { return *platform_; }

    /// Maps the puddle at its assigned address.
    Mapping& map(Capability cap);
    void unmap(const PuddleId& id);
    bool mapped(const PuddleId& id) const;

    /// Mapping containing `addr` (null if none).
    Mapping* find(std::uint64_t addr);
    Mapping* find(const void* p) { return find(reinterpret_cast<std::uint64_t>(p)); }
    Mapping* get(const PuddleId& id);
    std::vector<PuddleId> mapped_ids() const;

    /// base + header_size + root offset of a mapped puddle.
    std::uint64_t root_address(const PuddleId& id) const;

private:
    GlobalSpaceConfig config_;
    pmem::Platform* platform_;
    void* reservation_ = nullptr;
    mutable std::shared_mutex mu_;
    std::map<std::uint64_t, Mapping> by_start_;
    std::map<PuddleId, std::uint64_t> by_id_;
};

} // namespace puddle

template <>
struct std::hash<puddle::PuddleId> {
    std::size_t operator()(const puddle::PuddleId& id) const noexcept
    {
        std::uint64_t a = puddle::load<std::uint64_t>(id.bytes.data());
        std::uint64_t b = puddle::load<std::uint64_t>(id.bytes.data() + 8);
        return std::hash<std::uint64_t>{}(a ^ (b * 0x9E3779B97F4A7C15ull));
    }
};
