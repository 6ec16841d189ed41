#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "puddle/core.hpp"
#include "puddle/pmem.hpp"

namespace puddle::logging {

inline constexpr std::size_t kEntryHeader = 32;
inline constexpr std::size_t kSegmentHeader = 64;
inline constexpr std::uint64_t kSegmentMagic = 0x31304F47'4C445550ull; // "PUDLOG01"
inline constexpr std::uint64_t kNoEntry = ~std::uint64_t{0};

inline constexpr std::uint32_t kBackward = 1u << 0;       // undo order: applied last-to-first
inline constexpr std::uint32_t kVolatileTarget = 1u << 1; // DRAM target; only used on abort

inline constexpr std::uint32_t kUndoSeq = 1;
inline constexpr std::uint32_t kRedoSeq = 3;

struct SeqRange {
    std::uint32_t lo = 4;
    std::uint32_t hi = 4;

    std::uint64_t pack() const noexcept { return std::uint64_t{lo} | std::uint64_t{hi} << 32; }
    static SeqRange unpack(std::uint64_t v) noexcept
    {
        return {static_cast<std::uint32_t>(v), static_cast<std::uint32_t>(v >> 32)};
    }
    bool admits(std::uint32_t seq) const noexcept { return lo < seq && seq < hi; }
    bool admits_any() const noexcept { return hi > lo + 1; }
    auto operator<=>(const SeqRange&) const = default;
};

/// Entry header field offsets.
namespace ent {
inline constexpr std::size_t target = 0;   // u64
inline constexpr std::size_t size = 8;     // u32
inline constexpr std::size_t seq = 12;     // u32
inline constexpr std::size_t flags = 16;   // u32
inline constexpr std::size_t checksum = 20; // u32, CRC-32C of [0,20) ++ payload
inline constexpr std::size_t reserved = 24; // u64
} // namespace ent

/// Segment header field offsets, relative to the first heap byte.
namespace seg {
inline constexpr std::size_t magic = 0;        // u64
inline constexpr std::size_t seq_range = 8;    // u64: lo | hi << 32, head segment only
inline constexpr std::size_t next_free = 16;   // u64, relative to the entry area
inline constexpr std::size_t last_entry = 24;  // u64, relative to the entry area
inline constexpr std::size_t max_size = 32;    // u64
inline constexpr std::size_t continuation = 40; // u8[16], nil = end of chain
inline constexpr std::size_t index = 56;       // u32
} // namespace seg

struct EntryLocator {
    std::uint32_t segment = 0;
    std::uint64_t offset = 0;
};

/// Decoded entry as found on media.
struct LogEntry {
    EntryLocator at;
    std::uint64_t target = 0;
    std::uint32_t size = 0;
    std::uint32_t seq = 0;
    std::uint32_t flags = 0;
    std::uint32_t stored_checksum = 0;
    ByteSpan payload;

    bool checksum_ok() const noexcept;
    bool backward() const noexcept { return (flags & kBackward) != 0; }
    bool volatile_target() const noexcept { return (flags & kVolatileTarget) != 0; }
};

std::uint32_t entry_checksum(std::uint64_t target, std::uint32_t size, std::uint32_t seq,
                             std::uint32_t flags, ByteSpan payload) noexcept;

/// lo < seq < hi and the checksum verifies.  Entries beyond next_free are
/// never decoded, so "fully written" is implied by the walk.
bool entry_valid(const LogEntry& entry, SeqRange range) noexcept;

/// Formats the heap of a log puddle as an empty segment.
void format_segment(pmem::PersistentDomain& domain, std::uint32_t index);

/// Resolves the continuation uuid of a chained segment to its mapping.
using SegmentResolver = std::function<pmem::PersistentDomain*(const PuddleId&)>;

struct ChainedSegment {
    PuddleId id;
    pmem::PersistentDomain* domain = nullptr;
};
/// Supplies a fresh, formatted segment when the tail runs out of room.
using SegmentSupplier = std::function<std::optional<ChainedSegment>()>;

struct LogStats {
    std::size_t segments = 0;
    std::size_t entries = 0;
    std::uint64_t bytes = 0;
};

class Log {
public:
    /// `head` is the first segment; chained segments are looked up through
    /// `resolve`.
    explicit Log(pmem::PersistentDomain& head, SegmentResolver resolve = {});

    pmem::PersistentDomain& head() const noexcept { return *segments_.front(); }
    void set_supplier(SegmentSupplier supplier) { supply_ = std::move(supplier); }

    /// Writes and persists the entry, then advances next_free durably.
    EntryLocator append(std::uint64_t target, ByteSpan payload, std::uint32_t seq,
                        std::uint32_t flags);

    struct Pending {
        std::uint64_t target;
        ByteSpan payload;
        std::uint32_t seq;
        std::uint32_t flags;
    };
    /// Appends several entries with one fence for the entries and one for the
    /// next_free advance.
    void append_batch(std::span<const Pending> entries);

    SeqRange range() const noexcept;
    /// One 8-byte store, flushed and fenced.
    void set_range(SeqRange range);
    void set_range(std::uint32_t lo, std::uint32_t hi) { set_range(SeqRange{lo, hi}); }

    /// next_free of every segment back to zero, durably.
    void reset();

    /// Links `next` behind the current tail.  The new segment is formatted
    /// before it becomes reachable.
    void chain(const ChainedSegment& next);

    bool empty() const noexcept;
    std::size_t segment_count() const noexcept { return segments_.size(); }
    const std::vector<PuddleId>& chain_ids() const noexcept { return chain_ids_; }
    pmem::PersistentDomain& segment(std::size_t i) const { return *segments_.at(i); }

    /// All entries below next_free in chain order.  A size field running past
    /// next_free is corrupt_log; checksums are not checked here.
    std::vector<LogEntry> entries() const;

    LogStats stats() const;

    /// Re-reads the chain from media (after a crash or a foreign update).
    void reload();

private:
    std::byte* seg_base(std::size_t i) const;
    std::uint64_t seg_u64(std::size_t i, std::size_t field) const;
    std::size_t heap_offset(std::size_t i) const;
    void ensure_room(std::size_t bytes);

    std::vector<pmem::PersistentDomain*> segments_;
    std::vector<PuddleId> chain_ids_; // continuation ids, segments_[1..]
    std::size_t cur_ = 0;             // segment receiving appends
    SegmentResolver resolve_;
    SegmentSupplier supply_;
};

/// Validates `segment` (magic, sizes) and returns false if it is not a log
/// segment.
bool is_segment(const pmem::PersistentDomain& domain) noexcept;

struct ReplayTarget {
    pmem::PersistentDomain* domain = nullptr;
    std::size_t offset = 0;
};
/// Maps a global address range to the domain holding it; nullopt means the
/// range may not be written (the log is then rejected as a whole).
using TargetResolver = std::function<std::optional<ReplayTarget>(std::uint64_t addr, std::size_t len)>;

struct ReplayOptions {
    bool skip_volatile = true;
    /// Reject the whole log on any checksum failure below next_free (daemon
    /// recovery).  When false, bad entries are simply not admitted.
    bool strict = true;
};

/// Applies every admitted entry: backward entries last-to-first, then
/// forward entries first-to-last; flushes and fences what it wrote.
/// Throws corrupt_log or unwritable_range before writing anything.
std::size_t replay_log(const Log& log, const TargetResolver& resolve, ReplayOptions options = {});

// ---------------------------------------------------------------------------
// Log space: the directory of a client's log puddles.

enum class LogStatus : std::uint32_t { active = 1, dropped = 2, invalid = 3 };
enum class LogRole : std::uint32_t { head = 1, segment = 2 };

inline constexpr std::uint64_t kLogSpaceMagic = 0x31305053'4C445550ull; // "PUDLSP01"
inline constexpr std::size_t kLogSpaceEntry = 32;

struct LogSpaceEntry {
    std::size_t slot = 0;
    PuddleId id;
    LogStatus status = LogStatus::active;
    LogRole role = LogRole::head;
};

class LogSpace {
public:
    explicit LogSpace(pmem::PersistentDomain& domain);

    static void format(pmem::PersistentDomain& domain);
    static bool is_log_space(const pmem::PersistentDomain& domain) noexcept;

    std::size_t capacity() const noexcept;
    std::vector<LogSpaceEntry> entries() const;
    std::optional<LogSpaceEntry> find(const PuddleId& id) const;

    /// Durably records a log puddle; reuses a dropped slot if one exists.
    std::size_t add(const PuddleId& id, LogRole role);
    void set_status(std::size_t slot, LogStatus status);

private:
    std::size_t base() const;
    pmem::PersistentDomain& d_;
};

/// Chains `next` after `log` if `space` lists it; puddle_not_owned otherwise.
void chain_log_puddle(Log& log, const LogSpace& space, const ChainedSegment& next);

} // namespace puddle::logging
