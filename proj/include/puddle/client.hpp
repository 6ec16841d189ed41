#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "puddle/core.hpp"
#include "puddle/daemon.hpp"
#include "puddle/refmap.hpp"
#include "puddle/wire.hpp"

namespace puddle {

/// Request/response transport to the daemon.  One request yields exactly
/// one response; implementations serialize concurrent callers.
class Link {
public:
    virtual ~Link() = default;
    virtual wire::Frame call(wire::Frame request) = 0;
};

/// In-process transport straight into a Daemon object.  Descriptors move as
/// owned handles instead of ancillary data.
class LocalLink final : public Link {
public:
    LocalLink(daemon::Daemon& d, daemon::Credentials creds);
    ~LocalLink() override;
    wire::Frame call(wire::Frame request) override;

private:
    daemon::Daemon& d_;
    std::uint64_t session_;
};

/// UNIX-domain stream socket transport.
class SocketLink final : public Link {
public:
    explicit SocketLink(const std::filesystem::path& socket);
    wire::Frame call(wire::Frame request) override;
    int fd() const noexcept { return fd_.get(); }

private:
    std::mutex mu_;
    UniqueFd fd_;
};

/// `--socket`, else $PUDDLED_SOCKET, else /tmp/puddled.sock.
std::filesystem::path default_socket_path(const std::string& flag = {});
/// `--data-dir`, else $PUDDLED_DIR, else /var/lib/puddled.
std::filesystem::path default_data_dir(const std::string& flag = {});

/// Socket front end for a Daemon.  Binding replaces a stale socket file at
/// `socket`; nothing is read until `run` is given the recovered daemon.
class Server {
public:
    explicit Server(std::filesystem::path socket);
    ~Server();
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    const std::filesystem::path& path() const noexcept { return path_; }
    /// Serves until SHUTDOWN or `stop`.
    void run(daemon::Daemon& d);
    /// Safe from any thread and from signal handlers.
    void stop() noexcept;

private:
    std::filesystem::path path_;
    UniqueFd listen_;
    UniqueFd wake_r_;
    UniqueFd wake_w_;
};

struct PoolMember {
    PuddleId id;
    std::uint64_t assigned = 0;
    std::uint64_t total_size = 0;
    bool pending = false;
};

struct PoolInfo {
    PuddleId pool;
    PuddleId root;
    bool quarantined = false;
    std::vector<PoolMember> puddles;
};

struct PoolSummary {
    std::string name;
    PuddleId id;
    std::uint32_t puddles = 0;
    bool quarantined = false;
};

struct CreatedPool {
    PuddleId pool;
    Capability root;
};

struct ImportResult {
    PuddleId pool;
    std::string name;
    std::uint32_t puddles = 0;
    bool relocated = false;
};

struct AddrInfo {
    PuddleId id;
    std::uint64_t base = 0;
    std::uint64_t total_size = 0;
    bool pending = false;
};

struct RelocInfo {
    struct Member {
        std::uint64_t origin = 0;
        std::uint64_t total_size = 0;
        std::uint64_t assigned = 0;
        PuddleId id;
    };
    bool pending = false;
    std::uint64_t origin = 0;
    std::vector<Member> group;
};

struct DaemonStatus {
    bool clean_start = false;
    bool recovery_ran = false;
    std::uint64_t space_base = 0;
    std::uint64_t space_length = 0;
    std::uint32_t puddles = 0;
    std::uint32_t pools = 0;
    std::uint32_t log_spaces = 0;
    std::uint32_t frontier = 0;
    std::uint64_t journal_generation = 0;
    std::uint64_t journal_bytes = 0;
    std::uint32_t logs_replayed = 0;
    std::uint32_t logs_quarantined = 0;
    std::uint64_t entries_applied = 0;
    std::uint32_t orphans_removed = 0;
    std::uint32_t lost_puddles = 0;
    std::vector<std::string> quarantined_pools;
};

/// Typed requests over a Link, with per-code call counters.
class Client {
public:
    explicit Client(std::unique_ptr<Link> link);

    static std::unique_ptr<Client> connect(const std::filesystem::path& socket);
    static std::unique_ptr<Client> local(daemon::Daemon& d, daemon::Credentials creds);

    Bytes ping(ByteSpan payload = {});
    Capability new_puddle(std::uint64_t heap, PuddleKind kind, const PuddleId& pool = {},
                          std::uint16_t mode = 0600);
    Capability exist_puddle(const PuddleId& id, bool want_write);
    void free_puddle(const PuddleId& id);
    void reg_log_space(const PuddleId& id);
    void unreg_log_space(const PuddleId& id);
    /// True if the map was new.
    bool reg_ref_map(const ReferenceMap& map);
    std::vector<ReferenceMap> list_ref_maps();
    CreatedPool create_pool(const std::string& name, std::uint64_t heap, std::uint16_t mode = 0600);
    PoolInfo open_pool(const std::string& name);
    std::vector<PoolSummary> list_pools();
    /// Writes the bundle to `fd`.  Returns (puddles, image bytes).
    std::pair<std::uint32_t, std::uint64_t> export_pool(const std::string& name, int fd);
    /// Empty `name` lets the daemon choose.
    ImportResult import_bundle(int fd, const std::string& name = {}, std::uint16_t mode = 0600);
    DaemonStatus status();
    AddrInfo lookup_addr(std::uint64_t addr);
    RelocInfo reloc_info(const PuddleId& id);
    void mark_relocated(const PuddleId& id);
    void chmod(const PuddleId& id, std::uint32_t uid, std::uint32_t gid, std::uint16_t mode);
    void shutdown();

    std::uint64_t calls(wire::Code code) const noexcept
    {
        return counts_[static_cast<std::size_t>(code) % counts_.size()].load(std::memory_order_relaxed);
    }

private:
    wire::Frame call(wire::Code code, Bytes payload, std::vector<UniqueFd> fds = {});

    std::unique_ptr<Link> link_;
    std::atomic<std::uint64_t> next_id_{1};
    std::array<std::atomic<std::uint64_t>, 64> counts_{};
};

/// EXPORT_POOL into a new file at `path`.
std::pair<std::uint32_t, std::uint64_t> export_pool_to(Client& c, const std::string& pool,
                                                       const std::filesystem::path& path);
/// IMPORT_BUNDLE from the bundle file at `path`.
ImportResult import_bundle_from(Client& c, const std::filesystem::path& path, const std::string& name = {},
                                std::uint16_t mode = 0600);

/// Decodes a capability response (payload prefix plus two descriptors).
Capability decode_capability(Reader& r, std::vector<UniqueFd>& fds);

} // namespace puddle
