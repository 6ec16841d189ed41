#pragma once

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "puddle/bytes.hpp"
#include "puddle/fd.hpp"

// Emulated persistence domain.
//
// A domain is a memory-mapped backing file (the "working image", i.e. what
// loads and stores see) plus a durable shadow file `<path>.durable` holding
// only bytes that reached the persistence domain.  Lines move
// clean/dirty -> flushed-pending (flush) -> durable (fence).  Power loss keeps
// the durable image and optionally a subset of flushed-pending lines; dirty
// lines never survive.
//
// Writes made through raw pointers into `data()` are not observed as events,
// so `flush` treats any line whose working bytes differ from the durable image
// as dirty.  All persistence events of every domain attached to one Platform
// share a single monotonically increasing event counter, which is the axis
// along which crashes are injected.
namespace puddle::pmem {

inline constexpr std::size_t kLineSize = 64;
inline constexpr std::size_t kPageSize = 4096;

enum class LineState : std::uint8_t { clean, dirty, flushed_pending, durable };
enum class EventKind : std::uint8_t { store, flush, fence };

const char* to_string(EventKind kind) noexcept;

struct Event {
    std::uint64_t index = 0;
    std::uint32_t domain = 0;
    EventKind kind = EventKind::store;
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
};

enum class PendingPolicy : std::uint8_t { drop_all_unfenced, subset };

struct CrashPlan {
    static constexpr std::uint64_t kNow = ~std::uint64_t{0};

    /// Events with index < crash_event happened; the rest did not.
    std::uint64_t crash_event = kNow;
    PendingPolicy pending_policy = PendingPolicy::drop_all_unfenced;
    /// Under `subset`, bit i keeps the i-th flushed-pending line (ascending
    /// line order).  Only the first 64 pending lines are addressable.
    std::uint64_t subset_mask = 0;
};

/// Post-crash content of one domain, ready to be written back to media.
struct CrashImage {
    UniqueFd backing;
    UniqueFd shadow;
    Bytes image;
    std::string label;
};

class PersistentDomain;

/// Shared event clock and crash switch for a set of domains (one emulated
/// machine).
class Platform {
public:
    Platform() = default;
    Platform(const Platform&) = delete;
    Platform& operator=(const Platform&) = delete;
    ~Platform();

    static Platform& global();

    std::uint64_t events() const noexcept { return counter_.load(std::memory_order_acquire); }

    /// Power is lost just before event `index`: from then on flushes and
    /// fences no longer change any durable state.
    void arm_crash(std::uint64_t index) noexcept { armed_.store(index, std::memory_order_release); }
    void disarm() noexcept { armed_.store(CrashPlan::kNow, std::memory_order_release); }
    std::optional<std::uint64_t> armed() const noexcept;
    bool crashed() const noexcept { return events() > armed_.load(std::memory_order_acquire); }

    void record_events(bool on);
    std::vector<Event> recorded_events() const;
    void clear_recorded_events();

    /// Starts replay traces on every live domain and on every domain opened
    /// afterwards, enabling `simulate_crash` at past event indices.
    void begin_traces();
    void end_traces();

    /// Crash images for every live domain attached to this platform.
    std::vector<CrashImage> capture_crash(const CrashPlan& plan) const;

    std::size_t live_domains() const;

private:
    friend class PersistentDomain;

    std::uint64_t next_event(std::uint32_t domain, EventKind kind, std::uint64_t offset,
                             std::uint64_t length);
    bool applies(std::uint64_t index) const noexcept
    {
        return index < armed_.load(std::memory_order_acquire);
    }
    std::uint32_t attach(PersistentDomain* domain);
    void detach(PersistentDomain* domain);

    std::atomic<std::uint64_t> counter_{0};
    std::atomic<std::uint64_t> armed_{CrashPlan::kNow};
    std::atomic<bool> recording_{false};
    mutable std::mutex mu_;
    bool tracing_ = false;
    std::vector<Event> recorded_;
    std::vector<PersistentDomain*> live_;
    std::uint32_t next_id_ = 1;
};

struct OpenOptions {
    Platform* platform = nullptr;
    /// Map the working image at this address, replacing an existing
    /// reservation (MAP_FIXED).  On close the range is returned to PROT_NONE.
    void* fixed_address = nullptr;
    bool read_only = false;
    bool create = true;
    std::string label;
};

std::filesystem::path shadow_path(const std::filesystem::path& backing);

class PersistentDomain {
public:
    using Line = std::array<std::byte, kLineSize>;

    /// Opens (or creates) `path` with its durable shadow.  `capacity == 0`
    /// adopts the size of an existing file.
    static std::unique_ptr<PersistentDomain> open(const std::filesystem::path& path,
                                                  std::size_t capacity, OpenOptions options = {});
    /// Builds a domain over already-open backing and shadow descriptors (a
    /// capability received from the daemon).
    static std::unique_ptr<PersistentDomain> adopt(UniqueFd backing, UniqueFd shadow,
                                                   std::size_t capacity, OpenOptions options = {});

    PersistentDomain(const PersistentDomain&) = delete;
    PersistentDomain& operator=(const PersistentDomain&) = delete;
    ~PersistentDomain();

    std::size_t capacity() const noexcept { return capacity_; }
    std::size_t line_count() const noexcept { return capacity_ / kLineSize; }
    std::byte* data() noexcept { return working_; }
    const std::byte* data() const noexcept { return working_; }
    std::span<std::byte> bytes() noexcept { return {working_, capacity_}; }
    std::span<const std::byte> bytes() const noexcept { return {working_, capacity_}; }
    std::span<const std::byte> durable_bytes() const noexcept { return {durable_, capacity_}; }
    bool read_only() const noexcept { return read_only_; }
    std::uint32_t id() const noexcept { return id_; }
    Platform& platform() const noexcept { return *platform_; }
    const std::filesystem::path& path() const noexcept { return path_; }
    const std::string& label() const noexcept { return label_; }
    bool contains(const void* p, std::size_t length = 1) const noexcept;
    std::size_t offset_of(const void* p) const noexcept
    {
        return static_cast<std::size_t>(static_cast<const std::byte*>(p) - working_);
    }

    void store(std::size_t offset, ByteSpan payload);
    template <class T>
        requires std::is_trivially_copyable_v<T>
    void store_value(std::size_t offset, const T& value)
    {
        store(offset, as_bytes_of(value));
    }
    void flush(std::size_t offset, std::size_t length);
    void fence();
    void persist(std::size_t offset, std::size_t length)
    {
        flush(offset, length);
        fence();
    }

    LineState line_state(std::size_t line) const;
    std::vector<std::size_t> pending_lines() const;

    /// Durable image plus the flushed-pending lines selected by the plan.
    Bytes simulate_crash(const CrashPlan& plan) const;

    void begin_trace();
    void end_trace();
    bool tracing() const noexcept;
    /// Optional human-readable event log: `event_no kind offset len` lines.
    void set_trace_log(const std::filesystem::path& path);

    UniqueFd dup_backing() const { return backing_fd_.dup(); }
    UniqueFd dup_shadow() const { return shadow_fd_.dup(); }

private:
    PersistentDomain() = default;

    struct TraceRecord {
        std::uint64_t index;
        EventKind kind;
        std::vector<std::pair<std::size_t, Line>> snapshots;
    };
    struct Trace {
        std::uint64_t start_event = 0;
        Bytes base_durable;
        std::map<std::size_t, Line> base_pending;
        std::vector<TraceRecord> records;
    };

    void check_range(std::size_t offset, std::size_t length) const;
    void check_writable() const;
    void log_event(std::uint64_t index, EventKind kind, std::uint64_t offset, std::uint64_t length);
    static Bytes compose(ByteSpan durable, const std::map<std::size_t, Line>& pending,
                         const CrashPlan& plan);

    Platform* platform_ = nullptr;
    std::uint32_t id_ = 0;
    std::filesystem::path path_;
    std::string label_;
    UniqueFd backing_fd_;
    UniqueFd shadow_fd_;
    std::size_t capacity_ = 0;
    std::byte* working_ = nullptr;
    std::byte* durable_ = nullptr;
    bool fixed_ = false;
    bool read_only_ = false;

    mutable std::mutex mu_;
    std::vector<LineState> state_;
    std::map<std::size_t, Line> pending_;
    std::uint64_t last_applied_ = 0;
    bool any_applied_ = false;
    std::unique_ptr<Trace> trace_;
    std::unique_ptr<std::ofstream> trace_log_;
};

/// Writes captured crash images to their backing and shadow files.
void materialize(std::span<const CrashImage> images);

/// Emulates power loss for a file whose writer died: the durable shadow
/// becomes the content.  No-op without a shadow.
void power_cycle(const std::filesystem::path& backing);

/// `power_cycle` for every file under `dir` that has a durable shadow.
void power_cycle_tree(const std::filesystem::path& dir);

} // namespace puddle::pmem
