#pragma once

#include <csignal>

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "puddle/alloc.hpp"
#include "puddle/client.hpp"
#include "puddle/core.hpp"
#include "puddle/logging.hpp"
#include "puddle/refmap.hpp"

namespace puddle {

class Runtime;
class Pool;

struct RuntimeOptions {
    pmem::Platform* platform = nullptr;
    /// Heap of each fresh pool puddle (grown for larger objects).
    std::uint64_t pool_heap = 2ull << 20;
    /// Heap of each per-thread log puddle; more segments chain on demand.
    std::uint64_t log_heap = 1ull << 20;
    /// Resolve accesses to unmapped puddles from a SIGSEGV handler.
    bool fault_handler = true;
    /// Permission bits of pools created through this runtime.
    std::uint16_t mode = 0600;
};

enum class TxState : std::uint8_t { idle, active, committing_stage1, committing_stage2, committed };

struct RelocStats {
    std::uint64_t puddles_mapped = 0;
    std::uint64_t puddles_rewritten = 0;
    std::uint64_t objects_visited = 0;
    std::uint64_t slots_visited = 0;
    std::uint64_t slots_rewritten = 0;
    std::uint64_t faults = 0;
    std::uint64_t rewrite_ns = 0;
};

/// One thread's transaction state and its cached log.
class TxContext final : public alloc::MutationSink {
public:
    TxState state() const noexcept { return state_; }
    int depth() const noexcept { return depth_; }
    /// Entries written by the current transaction.
    std::size_t entries() const noexcept { return undo_.size() + redo_.size(); }
    /// This thread's log, null before its first transaction.
    const logging::Log* log() const noexcept { return log_.get(); }

    void begin();
    void add(const void* addr, std::size_t len);
    void add_volatile(void* addr, std::size_t len);
    void redo_set(void* addr, ByteSpan payload);
    void commit();
    void abort();

    void before_write(void* addr, std::size_t len) override;
    void fresh(void* addr, std::size_t len) override;

private:
    friend class Runtime;
    friend class Pool;

    struct Undo {
        std::uint64_t addr;
        Bytes old;
        bool is_volatile;
    };
    struct Redo {
        std::uint64_t addr;
        Bytes data;
    };

    explicit TxContext(Runtime& rt) : rt_(rt) {}
    void require_active() const;
    void arm();
    void finish();
    void lock_pool(Pool& p);

    Runtime& rt_;
    TxState state_ = TxState::idle;
    int depth_ = 0;
    bool armed_ = false;
    std::unique_ptr<pmem::PersistentDomain> head_;
    std::vector<std::unique_ptr<pmem::PersistentDomain>> segments_;
    std::unique_ptr<logging::Log> log_;
    std::vector<Undo> undo_;
    std::vector<Redo> redo_;
    std::vector<AddressRange> fresh_;
    std::set<std::pair<std::uint64_t, std::size_t>> meta_;
    std::vector<Pool*> locked_;
};

/// A pool opened through a Runtime.  Addresses are global and stable for
/// the lifetime of the mapping.
class Pool {
public:
    const PuddleId& id() const noexcept { return id_; }
    const std::string& name() const noexcept { return name_; }
    const PuddleId& root_puddle() const noexcept { return root_; }
    bool quarantined() const noexcept { return quarantined_; }

    /// Zeroed object of `size` bytes tagged `type`; requires an active
    /// transaction on the calling thread.
    std::uint64_t pm_malloc(std::size_t size, alloc::TypeId type = alloc::kRawType);
    void pm_free(std::uint64_t addr);

    /// Address of the first object slot of the root puddle.
    std::uint64_t root_address() const;
    /// Persists `addr` (inside the root puddle, or 0) as the pool's root.
    void set_root(std::uint64_t addr);
    /// Current root, 0 if none was set.
    std::uint64_t get_root() const;

    /// Every live object of every puddle (maps them all).
    std::vector<alloc::ObjectDescriptor> objects();
    std::vector<PuddleId> puddles() const;
    alloc::HeapStats stats();

private:
    friend class Runtime;
    friend class TxContext;

    struct Member {
        PuddleId id;
        std::uint64_t assigned = 0;
        std::uint64_t total_size = 0;
    };

    Pool(Runtime& rt, PuddleId id, std::string name, PuddleId root) : rt_(rt), id_(id), name_(std::move(name)), root_(root) {}
    alloc::PuddleHeap& heap_of(const PuddleId& id);

    Runtime& rt_;
    PuddleId id_;
    std::string name_;
    PuddleId root_;
    bool quarantined_ = false;
    mutable std::mutex members_mu_;
    std::vector<Member> members_;
    std::mutex alloc_mu_; // held by a transaction from its first allocation to its end
};

/// Client-side library state: the global persistent range, mapped puddles,
/// open pools and per-thread transaction contexts.  One per process.
class Runtime {
public:
    Runtime(std::unique_ptr<Client> client, RuntimeOptions options = {});
    ~Runtime();
    Runtime(const Runtime&) = delete;
    Runtime& operator=(const Runtime&) = delete;

    /// The live runtime of this process, or null.
    static Runtime* current() noexcept;

    Client& client() noexcept { return *client_; }
    GlobalSpace& space() noexcept { return *space_; }
    pmem::Platform& platform() const noexcept { return *platform_; }
    const RuntimeOptions& options() const noexcept { return options_; }

    Pool& create_pool(const std::string& name, std::uint64_t heap = 0);
    Pool& open_pool(const std::string& name);
    Pool* find_pool(const PuddleId& id);

    /// Registers (or confirms) a type's reference map with the daemon.
    void register_type(const ReferenceMap& map);

    /// The calling thread's transaction context.
    TxContext& tx();

    /// Maps the puddle holding `addr` if needed (explicit demand mapping)
    /// and returns the address as a pointer.  wild_address if no puddle
    /// owns it.
    void* resolve(std::uint64_t addr);
    template <class T>
    T* ptr(std::uint64_t addr)
    {
        return addr == 0 ? nullptr : static_cast<T*>(resolve(addr));
    }

    /// Maps one puddle, rewriting its references first if it was relocated.
    GlobalSpace::Mapping& map_puddle(const PuddleId& id);

    /// Id of this client's log space; nil before the first transaction.
    PuddleId log_space() noexcept
    {
        std::lock_guard lock(mu_);
        return log_space_id_;
    }

    RelocStats reloc_stats() const;
    void reset_reloc_stats();

    /// Skip all daemon cleanup on destruction (the process "died").
    void abandon() noexcept { abandoned_ = true; }

private:
    friend class TxContext;
    friend class Pool;
    friend struct ThreadSlot;

    void ensure_log_space_locked();
    void acquire_log(TxContext& ctx);
    logging::ChainedSegment new_segment(std::vector<std::unique_ptr<pmem::PersistentDomain>>& owner);
    void rewrite(Capability& cap, const RelocInfo& info);
    const ReferenceMap* map_for(alloc::TypeId type);
    alloc::PuddleHeap& heap_at(GlobalSpace::Mapping& m);
    std::pair<GlobalSpace::Mapping*, pmem::PersistentDomain*> writable_target(std::uint64_t addr, std::size_t len);
    bool handle_fault(std::uint64_t addr) noexcept;
    static void on_fault(int sig, siginfo_t* info, void* uctx);

    std::unique_ptr<Client> client_;
    RuntimeOptions options_;
    pmem::Platform* platform_;
    std::unique_ptr<GlobalSpace> space_;
    std::uint64_t serial_;
    bool abandoned_ = false;

    std::mutex mu_; // pools, contexts, log space
    std::map<PuddleId, std::unique_ptr<Pool>> pools_;
    std::vector<std::unique_ptr<TxContext>> contexts_;
    std::vector<TxContext*> idle_;
    std::unique_ptr<pmem::PersistentDomain> log_space_dom_;
    std::unique_ptr<logging::LogSpace> log_space_;
    PuddleId log_space_id_;
    std::vector<PuddleId> log_puddles_;

    std::recursive_mutex map_mu_; // mapping and relocation
    std::map<PuddleId, std::unique_ptr<alloc::PuddleHeap>> heaps_;
    std::map<alloc::TypeId, ReferenceMap> maps_;
    std::unique_ptr<pmem::PersistentDomain> reloc_dom_;
    std::unique_ptr<logging::Log> reloc_log_;
    std::vector<std::unique_ptr<pmem::PersistentDomain>> reloc_segments_;
    RelocStats stats_;
    std::set<PuddleId> registry_pending_;
    std::atomic<std::uint64_t> faults_{0};
};

// Thread-level transaction API over Runtime::current().
void tx_begin();
void tx_add(const void* addr, std::size_t len);
void tx_add_volatile(void* addr, std::size_t len);
void tx_redo_set(void* addr, ByteSpan payload);
void tx_commit();
void tx_abort();

template <class T>
    requires std::is_trivially_copyable_v<T>
void tx_redo_set(T* addr, const T& value)
{
    tx_redo_set(static_cast<void*>(addr), as_bytes_of(value));
}

/// Runs `fn` in a transaction: commits on return, aborts and rethrows on
/// exception.
template <class Fn>
void transaction(Fn&& fn)
{
    tx_begin();
    try {
        fn();
    } catch (...) {
        tx_abort();
        throw;
    }
    tx_commit();
}

} // namespace puddle
