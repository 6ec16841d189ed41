#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "puddle/core.hpp"
#include "puddle/refmap.hpp"

// Daemon state: an in-memory registry rebuilt from an append-only journal of
// checksummed records.  Permission and address changes are kept as
// journal-stamped histories so recovery can evaluate a log against the view
// its owner had when it crashed.
namespace puddle::daemon {

inline constexpr std::uint64_t kNever = ~std::uint64_t{0};

/// UNIX-like read/write bits: 0400/0200 owner, 040/020 group, 04/02 other.
struct Perm {
    std::uint32_t uid = 0;
    std::uint32_t gid = 0;
    std::uint16_t mode = 0600;

    bool can_read(std::uint32_t u, std::uint32_t g) const noexcept { return allows(u, g, 4); }
    bool can_write(std::uint32_t u, std::uint32_t g) const noexcept { return allows(u, g, 2); }
    bool operator==(const Perm&) const = default;

private:
    bool allows(std::uint32_t u, std::uint32_t g, unsigned bit) const noexcept
    {
        if (u == uid) {
            return (mode >> 6) & bit;
        }
        if (g == gid) {
            return (mode >> 3) & bit;
        }
        return mode & bit;
    }
};

struct PuddleRecord {
    PuddleId id;
    PuddleKind kind = PuddleKind::data;
    std::uint64_t total_size = 0;
    std::uint64_t heap_size = 0;
    PuddleId pool;
    std::uint64_t created = 0;
    std::uint64_t freed = kNever;
    std::vector<std::pair<std::uint64_t, Perm>> perms;          // (jseq, perm)
    std::vector<std::pair<std::uint64_t, std::uint64_t>> addrs; // (jseq, base), 0 = released
    // Relocation: pointers inside were written against `origin` layouts of
    // the puddles sharing `group`.
    bool pending = false;
    PuddleId group;
    std::uint64_t origin = 0;

    bool alive() const noexcept { return freed == kNever; }
    const Perm& perm() const { return perms.back().second; }
    std::uint64_t address() const { return addrs.empty() ? 0 : addrs.back().second; }
    bool alive_at(std::uint64_t jseq) const noexcept { return created <= jseq && jseq < freed; }
    std::optional<Perm> perm_at(std::uint64_t jseq) const;
    std::uint64_t address_at(std::uint64_t jseq) const;
};

struct PoolRecord {
    PuddleId id;
    std::string name;
    PuddleId root;
    std::vector<PuddleId> puddles;
    bool quarantined = false;
};

struct LogSpaceRecord {
    PuddleId id;
    std::uint32_t uid = 0;
    std::uint32_t gid = 0;
    std::uint64_t registered = 0;
    /// Journal position at which the owning session ended (its crash view);
    /// kNever while the session was alive at the last daemon stop.
    std::uint64_t ended = kNever;
};

enum class RecordType : std::uint16_t {
    puddle_new = 1,
    puddle_free = 2,
    address = 3,
    perm = 4,
    pool_new = 5,
    log_space_reg = 7,
    log_space_end = 8,
    log_space_drop = 9,
    ref_map = 10,
    import = 11,
    relocated = 12,
    quarantine = 13,
    reloc_state = 14, // snapshot only
    pool_state = 15,  // snapshot only
};

struct NewPuddle {
    PuddleId id;
    PuddleKind kind = PuddleKind::data;
    std::uint64_t total_size = 0;
    std::uint64_t heap_size = 0;
    PuddleId pool;
    Perm perm;
    std::uint64_t address = 0;

    void encode(Writer& w) const;
    static NewPuddle decode(Reader& r);
};

struct ImportRecord {
    struct Item {
        NewPuddle puddle;
        std::uint64_t origin = 0;
    };
    PuddleId pool;
    std::string name;
    PuddleId root;
    PuddleId group;
    bool pending = false;
    std::vector<Item> items;
    std::vector<ReferenceMap> maps;

    Bytes encode() const;
    static ImportRecord decode(ByteSpan payload);
};

struct Record {
    std::uint64_t jseq = 0;
    RecordType type = RecordType::puddle_new;
    Bytes payload;
};

class Registry {
public:
    explicit Registry(GlobalSpaceConfig space = {});

    /// Applies one journal record.  Records are validated before they are
    /// journaled, so a failure here means the journal is corrupt.
    void apply(std::uint64_t jseq, RecordType type, ByteSpan payload);

    /// Records that rebuild this registry, histories included.
    std::vector<Record> snapshot() const;

    const GlobalSpaceConfig& space() const noexcept { return space_; }
    AddressMap& addresses() noexcept { return amap_; }
    const AddressMap& addresses() const noexcept { return amap_; }

    const PuddleRecord* puddle(const PuddleId& id) const;
    const PoolRecord* pool(const PuddleId& id) const;
    const PoolRecord* pool_named(const std::string& name) const;
    const std::map<PuddleId, PuddleRecord>& puddles() const noexcept { return puddles_; }
    const std::map<PuddleId, PoolRecord>& pools() const noexcept { return pools_; }
    const std::map<PuddleId, LogSpaceRecord>& log_spaces() const noexcept { return log_spaces_; }
    const std::map<alloc::TypeId, ReferenceMap>& maps() const noexcept { return maps_; }

    /// Alive puddle whose reservation held `addr` at journal position `jseq`.
    const PuddleRecord* owner_at(std::uint64_t addr, std::uint64_t jseq) const;

    std::uint64_t last_jseq() const noexcept { return last_; }

private:
    void add_puddle(std::uint64_t jseq, const NewPuddle& p);
    PuddleRecord& must(const PuddleId& id);

    GlobalSpaceConfig space_;
    AddressMap amap_;
    std::map<PuddleId, PuddleRecord> puddles_;
    std::map<PuddleId, PoolRecord> pools_;
    std::map<PuddleId, LogSpaceRecord> log_spaces_;
    std::map<alloc::TypeId, ReferenceMap> maps_;
    std::uint64_t last_ = 0;
};

/// Journal file header, at offset 0 of `puddled.journal.<generation>`.
namespace jhdr {
inline constexpr std::size_t magic = 0;      // "PUDJRNL1"
inline constexpr std::size_t generation = 8; // u64
inline constexpr std::size_t tail = 16;      // u64, bytes of records after the header
inline constexpr std::size_t clean = 24;     // u64, 1 after a clean shutdown
inline constexpr std::size_t sealed = 32;    // u64, 1 once the generation is complete
inline constexpr std::size_t next_jseq = 40; // u64, floor for new sequence numbers
inline constexpr std::size_t size = 64;
} // namespace jhdr
inline constexpr std::uint64_t kJournalMagic = 0x314C4E524A445550ull; // "PUDJRNL1"

/// Record layout: u32 payload length, u16 type, u16 reserved, u64 jseq,
/// payload, u32 CRC-32C over everything before it, padded to 8 bytes.
class Journal {
public:
    using Snapshotter = std::function<std::vector<Record>()>;

    /// Opens the newest sealed generation in `dir`, creating generation 1 if
    /// none exists, and feeds every record to `sink`.
    Journal(const std::filesystem::path& dir, pmem::Platform* platform, std::uint64_t capacity,
            const std::function<void(const Record&)>& sink);
    ~Journal();

    void set_snapshotter(Snapshotter s) { snapshot_ = std::move(s); }

    /// Durably appends; compacts into a new generation when full.
    std::uint64_t append(RecordType type, ByteSpan payload);

    bool clean() const;
    void set_clean(bool clean);

    std::uint64_t generation() const noexcept { return generation_; }
    std::uint64_t next_jseq() const noexcept { return next_jseq_; }
    std::uint64_t bytes_used() const;
    std::uint64_t records_loaded() const noexcept { return loaded_; }

    static bool is_journal_file(const std::filesystem::path& p);

private:
    std::unique_ptr<pmem::PersistentDomain> create_generation(std::uint64_t gen, std::uint64_t capacity,
                                                              const std::vector<Record>& records,
                                                              bool clean);
    void compact(std::size_t need);

    std::filesystem::path dir_;
    pmem::Platform* platform_;
    std::uint64_t capacity_;
    std::unique_ptr<pmem::PersistentDomain> d_;
    std::uint64_t generation_ = 0;
    std::uint64_t next_jseq_ = 1;
    std::uint64_t loaded_ = 0;
    Snapshotter snapshot_;
};

} // namespace puddle::daemon
