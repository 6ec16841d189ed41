#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string_view>
#include <vector>

#include "puddle/core.hpp"

namespace puddle::alloc {

using TypeId = std::uint64_t;

/// Type id for objects without embedded references.
inline constexpr TypeId kRawType = 0;

/// FNV-1a over the canonical type name.
constexpr TypeId type_id_of(std::string_view name) noexcept
{
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : name) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

inline constexpr std::size_t kUnit = 256;
inline constexpr std::size_t kSlabPage = 4096;
inline constexpr std::uint32_t kSlabOrder = 4; // 16 units
inline constexpr std::size_t kTableEntry = 16;
inline constexpr std::size_t kSlabClasses[] = {8, 16, 32, 64, 128, 256};
inline constexpr std::size_t kSlabThreshold = 256; // sizes below use slabs

/// Extra header counters used by the allocator.
namespace hdrx {
inline constexpr std::size_t slab_bytes = 112; // u64, bytes held by slab pages
inline constexpr std::size_t slab_live = 120;  // u64, live slab object bytes
} // namespace hdrx

enum class UnitState : std::uint8_t { none = 0, alloc = 2, slab = 3 };

/// Receives every metadata range before it is modified (undo logging) and
/// every freshly handed-out object (flushed at commit, contents not logged).
class MutationSink {
public:
    virtual ~MutationSink() = default;
    virtual void before_write(void* addr, std::size_t len) = 0;
    virtual void fresh(void* addr, std::size_t len) = 0;
};

/// Sink that logs nothing; for tools and single-threaded bulk tests.
class NullSink final : public MutationSink {
public:
    void before_write(void*, std::size_t) override {}
    void fresh(void*, std::size_t) override {}
};

struct ObjectDescriptor {
    std::uint64_t addr = 0;
    std::uint64_t size = 0;
    TypeId type_id = 0;
    auto operator<=>(const ObjectDescriptor&) const = default;
};

struct HeapStats {
    std::uint64_t heap = 0;
    std::uint64_t free = 0;
    std::uint64_t allocated = 0;
    std::uint64_t metadata = 0;
    std::uint64_t slab_pages = 0;
};

struct HeapGeometry {
    std::uint64_t data_units = 0;
    std::uint32_t max_order = 0;
    std::uint64_t table_offset = 0; // within the heap
    std::vector<std::uint64_t> bitmap_offset; // within the header, per order
    std::uint64_t bitmap_bytes = 0;
};

/// Data area, table and bitmap placement for a heap of `heap_size` bytes.
HeapGeometry geometry_for(std::uint64_t heap_size);

/// Size class index for a small request, or nullopt for buddy sizes.
std::optional<std::size_t> slab_class_for(std::size_t size) noexcept;

/// Smallest buddy order whose block holds `size` bytes.
std::uint32_t order_for(std::size_t size) noexcept;

/// Allocator over one mapped data puddle.  All state lives in the puddle's
/// header (bitmaps, counters) and the side table at the heap tail; the
/// object keeps only a rebuildable cache of slab pages with free slots.
class PuddleHeap {
public:
    /// `base` is the puddle's first byte (its header).
    explicit PuddleHeap(std::byte* base);

    /// Initializes bitmaps and counters for a fresh, zeroed puddle and
    /// persists them.
    static void format(pmem::PersistentDomain& domain);

    std::byte* base() const noexcept { return base_; }
    std::uint64_t heap_start() const noexcept { return header_; }
    std::uint64_t data_bytes() const noexcept { return geo_.data_units * kUnit; }
    const HeapGeometry& geometry() const noexcept { return geo_; }

    /// Heap offset of a new zeroed object, or nullopt if it does not fit.
    std::optional<std::uint64_t> alloc(std::size_t size, TypeId type, MutationSink& sink);
    /// invalid_address or double_free on bad input.
    void free(std::uint64_t heap_offset, MutationSink& sink);

    bool owns(const void* p) const noexcept;

    /// Every live object, in address order.
    std::vector<ObjectDescriptor> objects() const;
    /// Live object starting exactly at `heap_offset`.
    std::optional<ObjectDescriptor> object_at(std::uint64_t heap_offset) const;

    HeapStats stats() const;

    /// Free blocks per order, as unit indices (for oracle comparison).
    std::vector<std::vector<std::uint64_t>> free_blocks() const;

    /// Drops the volatile slab cache (after abort or recovery).
    void invalidate_cache() noexcept { cache_valid_ = false; }

private:
    struct Entry {
        UnitState state;
        std::uint8_t order;
        std::uint16_t slab_class;
        std::uint32_t reserved;
        TypeId type_id;
    };
    static_assert(sizeof(Entry) == kTableEntry);

    std::byte* table(std::uint64_t unit) const noexcept;
    Entry entry(std::uint64_t unit) const noexcept;
    void set_entry(std::uint64_t unit, const Entry& e, MutationSink& sink);
    std::uint64_t* bitmap_word(std::uint32_t order, std::uint64_t block) const noexcept;
    bool is_free(std::uint32_t order, std::uint64_t unit) const noexcept;
    void set_free(std::uint32_t order, std::uint64_t unit, bool free, MutationSink& sink);
    void add_counter(std::size_t field, std::int64_t delta, MutationSink& sink);
    std::uint64_t counter(std::size_t field) const noexcept;

    std::optional<std::uint64_t> buddy_alloc(std::uint32_t order, MutationSink& sink);
    void buddy_free(std::uint64_t unit, std::uint32_t order, MutationSink& sink);
    bool inside_free_block(std::uint64_t unit) const noexcept;

    std::byte* slab_bitmap(std::uint64_t page_unit) const noexcept;
    std::size_t slab_slots(std::size_t cls) const noexcept { return kSlabPage / kSlabClasses[cls]; }
    void rebuild_cache() const;

    std::byte* base_;
    std::uint64_t header_;
    HeapGeometry geo_;

    // (type, class) -> pages that have a free slot.
    mutable std::map<std::pair<TypeId, std::size_t>, std::set<std::uint64_t>> partial_;
    mutable bool cache_valid_ = false;
};

} // namespace puddle::alloc
