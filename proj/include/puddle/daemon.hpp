#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "puddle/core.hpp"
#include "puddle/fd.hpp"
#include "puddle/logging.hpp"
#include "puddle/registry.hpp"
#include "puddle/wire.hpp"

namespace puddle::daemon {

struct Credentials {
    std::uint32_t uid = 0;
    std::uint32_t gid = 0;
    std::int32_t pid = 0;
};

struct DaemonOptions {
    std::filesystem::path data_dir;
    pmem::Platform* platform = nullptr;
    GlobalSpaceConfig space{};
    /// Start as after a power loss: durable shadows replace working files.
    bool power_cycle = false;
    std::uint64_t journal_capacity = 4ull << 20;
    /// Largest heap a single request may ask for.
    std::uint64_t max_heap = 1ull << 32;
    /// Called inside recovery_all, before any log is touched (tests).
    std::function<void()> recovery_hook;
};

struct QuarantinedLog {
    PuddleId log_space;
    PuddleId log;
    std::string reason;
};

struct RecoveryReport {
    bool dirty = false;
    bool ran = false;
    std::size_t log_spaces = 0;
    std::size_t logs_replayed = 0;
    std::size_t entries_applied = 0;
    std::size_t orphans_removed = 0;
    std::size_t lost_puddles = 0;
    std::vector<QuarantinedLog> quarantined;
    std::vector<PuddleId> quarantined_pools;
};

/// The puddle service.  Owns every puddle file under the data directory,
/// journals its registry, and performs crash recovery in its constructor,
/// before any request can be handled.  Requests are serialized.
class Daemon {
public:
    explicit Daemon(DaemonOptions options);
    Daemon(const Daemon&) = delete;
    Daemon& operator=(const Daemon&) = delete;
    /// Marks a clean shutdown unless `abandon` was called.
    ~Daemon();

    std::uint64_t open_session(const Credentials& creds);
    /// Records the end of the session's log spaces (their crash view).
    void close_session(std::uint64_t session);

    wire::Frame handle(std::uint64_t session, wire::Frame request);

    const RecoveryReport& recovery() const noexcept { return report_; }
    bool shutdown_requested() const noexcept { return shutdown_; }
    const std::filesystem::path& data_dir() const noexcept { return options_.data_dir; }
    pmem::Platform& platform() const noexcept { return *platform_; }
    const GlobalSpaceConfig& space() const noexcept { return options_.space; }

    /// Drops the daemon as if its process died: no clean-shutdown mark.
    void abandon() noexcept { abandoned_ = true; }

    /// Locked access to the registry (tests, status).
    template <class Fn>
    auto inspect(Fn&& fn) const
    {
        std::lock_guard lock(mu_);
        return fn(reg_);
    }

    std::uint64_t requests(wire::Code code) const;

private:
    struct Session {
        Credentials creds;
        std::set<PuddleId> log_spaces;
    };

    std::uint64_t commit(RecordType type, ByteSpan payload);
    void collect_orphans();
    void recovery_all();
    void quarantine_pools(const logging::Log* log, std::uint64_t view);
    void remove_file(const PuddleId& id);
    void free_puddle(const PuddleId& id);
    std::filesystem::path path_of(const PuddleId& id) const;

    const PuddleRecord& require_puddle(const PuddleId& id) const;
    const PoolRecord& require_pool(const std::string& name) const;
    NewPuddle make_puddle(std::uint64_t heap, PuddleKind kind, const PuddleId& pool, const Perm& perm);
    void encode_capability(wire::Frame& out, const PuddleRecord& p, bool writable) const;
    bool pool_busy(const PoolRecord& pool) const;

    wire::Frame dispatch(Session& s, wire::Frame& req);

    DaemonOptions options_;
    pmem::Platform* platform_;
    UniqueFd lock_;
    mutable std::mutex mu_;
    Registry reg_;
    std::unique_ptr<Journal> journal_;
    RecoveryReport report_;
    std::map<std::uint64_t, Session> sessions_;
    std::uint64_t next_session_ = 1;
    std::map<wire::Code, std::uint64_t> counts_;
    bool shutdown_ = false;
    bool abandoned_ = false;
};

} // namespace puddle::daemon
