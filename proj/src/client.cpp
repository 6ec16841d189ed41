#include "puddle/client.hpp"

#include <fcntl.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/stat.h>
#include <sys/un.h>
#include <unistd.h>

#include <cerrno>
#include <cstdlib>
#include <cstring>

namespace puddle {

using wire::Code;
using wire::Frame;

LocalLink::LocalLink(daemon::Daemon& d, daemon::Credentials creds) : d_(d), session_(d.open_session(creds)) {}

LocalLink::~LocalLink()
{
    d_.close_session(session_);
}

Frame LocalLink::call(Frame request)
{
    return d_.handle(session_, std::move(request));
}

namespace {

sockaddr_un make_addr(const std::filesystem::path& p)
{
    sockaddr_un addr{};
    addr.sun_family = AF_UNIX;
    auto s = p.string();
    if (s.size() >= sizeof(addr.sun_path)) {
        fail(Errc::io_failure, "socket path too long: " + s);
    }
    std::memcpy(addr.sun_path, s.c_str(), s.size() + 1);
    return addr;
}

} // namespace

SocketLink::SocketLink(const std::filesystem::path& socket)
{
    fd_ = UniqueFd(::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (!fd_) {
        fail(Errc::io_failure, std::string("socket: ") + std::strerror(errno));
    }
    auto addr = make_addr(socket);
    if (::connect(fd_.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
        fail(Errc::daemon_unreachable, "cannot connect to " + socket.string() + ": " + std::strerror(errno));
    }
}

Frame SocketLink::call(Frame request)
{
    std::lock_guard lock(mu_);
    wire::send_frame(fd_.get(), request);
    Frame resp;
    if (!wire::recv_frame(fd_.get(), resp)) {
        fail(Errc::daemon_unreachable, "daemon closed the connection");
    }
    if (resp.id != request.id) {
        fail(Errc::protocol_error, "response id does not match request");
    }
    return resp;
}

std::filesystem::path default_socket_path(const std::string& flag)
{
    if (!flag.empty()) {
        return flag;
    }
    if (const char* env = std::getenv("PUDDLED_SOCKET"); env != nullptr && *env != '\0') {
        return env;
    }
    return "/tmp/puddled.sock";
}

std::filesystem::path default_data_dir(const std::string& flag)
{
    if (!flag.empty()) {
        return flag;
    }
    if (const char* env = std::getenv("PUDDLED_DIR"); env != nullptr && *env != '\0') {
        return env;
    }
    return "/var/lib/puddled";
}

Server::Server(std::filesystem::path socket) : path_(std::move(socket))
{
    listen_ = UniqueFd(::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (!listen_) {
        fail(Errc::io_failure, std::string("socket: ") + std::strerror(errno));
    }
    auto addr = make_addr(path_);
    ::unlink(path_.c_str());
    if (::bind(listen_.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
        ::listen(listen_.get(), 64) != 0) {
        fail(Errc::io_failure, "cannot listen on " + path_.string() + ": " + std::strerror(errno));
    }
    // Any local user may connect; requests are authorized by peer credentials.
    ::chmod(path_.c_str(), 0666);
    int p[2];
    if (::pipe2(p, O_CLOEXEC | O_NONBLOCK) != 0) {
        fail(Errc::io_failure, "pipe");
    }
    wake_r_ = UniqueFd(p[0]);
    wake_w_ = UniqueFd(p[1]);
}

Server::~Server()
{
    ::unlink(path_.c_str());
}

void Server::stop() noexcept
{
    char c = 1;
    [[maybe_unused]] auto n = ::write(wake_w_.get(), &c, 1);
}

void Server::run(daemon::Daemon& d)
{
    struct Conn {
        UniqueFd fd;
        std::uint64_t session;
    };
    std::vector<Conn> conns;
    auto drop = [&](std::size_t i) {
        d.close_session(conns[i].session);
        conns.erase(conns.begin() + static_cast<std::ptrdiff_t>(i));
    };

    while (!d.shutdown_requested()) {
        std::vector<pollfd> fds;
        fds.push_back({wake_r_.get(), POLLIN, 0});
        fds.push_back({listen_.get(), POLLIN, 0});
        for (const auto& c : conns) {
            fds.push_back({c.fd.get(), POLLIN, 0});
        }
        if (::poll(fds.data(), fds.size(), -1) < 0) {
            if (errno == EINTR) {
                continue;
            }
            fail(Errc::io_failure, std::string("poll: ") + std::strerror(errno));
        }
        if (fds[0].revents != 0) {
            break;
        }
        // Connections first, from the back so erasing keeps indices valid.
        for (std::size_t i = conns.size(); i-- > 0;) {
            auto re = fds[i + 2].revents;
            if (re == 0) {
                continue;
            }
            Frame req;
            try {
                if (!wire::recv_frame(conns[i].fd.get(), req)) {
                    drop(i);
                    continue;
                }
            } catch (const Error& e) {
                if (e.errc() == Errc::protocol_error) {
                    Frame resp;
                    resp.status = static_cast<std::uint16_t>(Errc::protocol_error);
                    const auto& what = e.message();
                    auto b = std::as_bytes(std::span(what.data(), what.size()));
                    resp.payload.assign(b.begin(), b.end());
                    try {
                        wire::send_frame(conns[i].fd.get(), resp);
                    } catch (const Error&) {
                    }
                }
                drop(i);
                continue;
            }
            auto resp = d.handle(conns[i].session, std::move(req));
            try {
                wire::send_frame(conns[i].fd.get(), resp);
            } catch (const Error&) {
                drop(i);
            }
        }
        if ((fds[1].revents & POLLIN) != 0) {
            UniqueFd c(::accept4(listen_.get(), nullptr, nullptr, SOCK_CLOEXEC));
            if (c) {
                ucred cred{};
                socklen_t len = sizeof(cred);
                if (::getsockopt(c.get(), SOL_SOCKET, SO_PEERCRED, &cred, &len) == 0) {
                    auto s = d.open_session({cred.uid, cred.gid, cred.pid});
                    conns.push_back({std::move(c), s});
                }
            }
        }
    }
    for (std::size_t i = conns.size(); i-- > 0;) {
        drop(i);
    }
}

// ---------------------------------------------------------------------------

Capability decode_capability(Reader& r, std::vector<UniqueFd>& fds)
{
    Capability cap;
    cap.id = get_id(r);
    cap.kind = static_cast<PuddleKind>(r.u32());
    cap.total_size = r.u64();
    cap.assigned = r.u64();
    cap.writable = r.u8() != 0;
    if (fds.size() < 2) {
        fail(Errc::no_capability, "capability response without descriptors");
    }
    cap.backing = std::move(fds[0]);
    cap.shadow = std::move(fds[1]);
    fds.erase(fds.begin(), fds.begin() + 2);
    return cap;
}

Client::Client(std::unique_ptr<Link> link) : link_(std::move(link)) {}

std::unique_ptr<Client> Client::connect(const std::filesystem::path& socket)
{
    return std::make_unique<Client>(std::make_unique<SocketLink>(socket));
}

std::unique_ptr<Client> Client::local(daemon::Daemon& d, daemon::Credentials creds)
{
    return std::make_unique<Client>(std::make_unique<LocalLink>(d, creds));
}

Frame Client::call(Code code, Bytes payload, std::vector<UniqueFd> fds)
{
    Frame req;
    req.code = code;
    req.id = next_id_.fetch_add(1, std::memory_order_relaxed);
    req.payload = std::move(payload);
    req.fds = std::move(fds);
    counts_[static_cast<std::size_t>(code) % counts_.size()].fetch_add(1, std::memory_order_relaxed);
    auto resp = link_->call(std::move(req));
    wire::throw_if_error(resp);
    return resp;
}

Bytes Client::ping(ByteSpan payload)
{
    return call(Code::ping, Bytes(payload.begin(), payload.end())).payload;
}

Capability Client::new_puddle(std::uint64_t heap, PuddleKind kind, const PuddleId& pool, std::uint16_t mode)
{
    Writer w;
    w.u64(heap).u32(static_cast<std::uint32_t>(kind));
    put_id(w, pool);
    w.u16(mode);
    auto resp = call(Code::get_new_puddle, w.take());
    Reader r(resp.payload);
    return decode_capability(r, resp.fds);
}

Capability Client::exist_puddle(const PuddleId& id, bool want_write)
{
    Writer w;
    put_id(w, id);
    w.u8(want_write ? 1 : 0);
    auto resp = call(Code::get_exist_puddle, w.take());
    Reader r(resp.payload);
    return decode_capability(r, resp.fds);
}

void Client::free_puddle(const PuddleId& id)
{
    Writer w;
    put_id(w, id);
    call(Code::free_puddle, w.take());
}

void Client::reg_log_space(const PuddleId& id)
{
    Writer w;
    put_id(w, id);
    call(Code::reg_log_space, w.take());
}

void Client::unreg_log_space(const PuddleId& id)
{
    Writer w;
    put_id(w, id);
    call(Code::unreg_log_space, w.take());
}

bool Client::reg_ref_map(const ReferenceMap& map)
{
    Writer w;
    map.encode(w);
    auto resp = call(Code::reg_ref_map, w.take());
    Reader r(resp.payload);
    return r.u8() != 0;
}

std::vector<ReferenceMap> Client::list_ref_maps()
{
    auto resp = call(Code::list_ref_maps, {});
    Reader r(resp.payload);
    std::vector<ReferenceMap> out(r.u32());
    for (auto& m : out) {
        m = ReferenceMap::decode(r);
    }
    return out;
}

CreatedPool Client::create_pool(const std::string& name, std::uint64_t heap, std::uint16_t mode)
{
    Writer w;
    w.str(name).u64(heap).u16(mode);
    auto resp = call(Code::create_pool, w.take());
    Reader r(resp.payload);
    CreatedPool out;
    out.pool = get_id(r);
    out.root = decode_capability(r, resp.fds);
    return out;
}

PoolInfo Client::open_pool(const std::string& name)
{
    Writer w;
    w.str(name);
    auto resp = call(Code::open_pool, w.take());
    Reader r(resp.payload);
    PoolInfo info;
    info.pool = get_id(r);
    info.root = get_id(r);
    info.quarantined = r.u8() != 0;
    info.puddles.resize(r.u32());
    for (auto& m : info.puddles) {
        m.id = get_id(r);
        m.assigned = r.u64();
        m.total_size = r.u64();
        m.pending = r.u8() != 0;
    }
    return info;
}

std::vector<PoolSummary> Client::list_pools()
{
    auto resp = call(Code::list_pools, {});
    Reader r(resp.payload);
    std::vector<PoolSummary> out(r.u32());
    for (auto& p : out) {
        p.name = r.str();
        p.id = get_id(r);
        p.puddles = r.u32();
        p.quarantined = r.u8() != 0;
    }
    return out;
}

std::pair<std::uint32_t, std::uint64_t> Client::export_pool(const std::string& name, int fd)
{
    Writer w;
    w.str(name);
    std::vector<UniqueFd> fds;
    fds.emplace_back(::fcntl(fd, F_DUPFD_CLOEXEC, 0));
    auto resp = call(Code::export_pool, w.take(), std::move(fds));
    Reader r(resp.payload);
    auto n = r.u32();
    return {n, r.u64()};
}

ImportResult Client::import_bundle(int fd, const std::string& name, std::uint16_t mode)
{
    Writer w;
    w.str(name).u16(mode);
    std::vector<UniqueFd> fds;
    fds.emplace_back(::fcntl(fd, F_DUPFD_CLOEXEC, 0));
    auto resp = call(Code::import_bundle, w.take(), std::move(fds));
    Reader r(resp.payload);
    ImportResult out;
    out.pool = get_id(r);
    out.name = r.str();
    out.puddles = r.u32();
    out.relocated = r.u8() != 0;
    return out;
}

DaemonStatus Client::status()
{
    auto resp = call(Code::status, {});
    Reader r(resp.payload);
    DaemonStatus s;
    s.clean_start = r.u8() != 0;
    s.recovery_ran = r.u8() != 0;
    s.space_base = r.u64();
    s.space_length = r.u64();
    s.puddles = r.u32();
    s.pools = r.u32();
    s.log_spaces = r.u32();
    s.frontier = r.u32();
    s.journal_generation = r.u64();
    s.journal_bytes = r.u64();
    s.logs_replayed = r.u32();
    s.logs_quarantined = r.u32();
    s.entries_applied = r.u64();
    s.orphans_removed = r.u32();
    s.lost_puddles = r.u32();
    s.quarantined_pools.resize(r.u32());
    for (auto& n : s.quarantined_pools) {
        n = r.str();
    }
    return s;
}

AddrInfo Client::lookup_addr(std::uint64_t addr)
{
    Writer w;
    w.u64(addr);
    auto resp = call(Code::lookup_addr, w.take());
    Reader r(resp.payload);
    AddrInfo a;
    a.id = get_id(r);
    a.base = r.u64();
    a.total_size = r.u64();
    a.pending = r.u8() != 0;
    return a;
}

RelocInfo Client::reloc_info(const PuddleId& id)
{
    Writer w;
    put_id(w, id);
    auto resp = call(Code::reloc_info, w.take());
    Reader r(resp.payload);
    RelocInfo info;
    info.pending = r.u8() != 0;
    info.origin = r.u64();
    info.group.resize(r.u32());
    for (auto& m : info.group) {
        m.origin = r.u64();
        m.total_size = r.u64();
        m.assigned = r.u64();
        m.id = get_id(r);
    }
    return info;
}

void Client::mark_relocated(const PuddleId& id)
{
    Writer w;
    put_id(w, id);
    call(Code::mark_relocated, w.take());
}

void Client::chmod(const PuddleId& id, std::uint32_t uid, std::uint32_t gid, std::uint16_t mode)
{
    Writer w;
    put_id(w, id);
    w.u32(uid).u32(gid).u16(mode);
    call(Code::chmod, w.take());
}

void Client::shutdown()
{
    call(Code::shutdown, {});
}

std::pair<std::uint32_t, std::uint64_t> export_pool_to(Client& c, const std::string& pool,
                                                       const std::filesystem::path& path)
{
    UniqueFd fd(::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644));
    if (!fd) {
        fail(Errc::io_failure, "cannot create " + path.string() + ": " + std::strerror(errno));
    }
    try {
        return c.export_pool(pool, fd.get());
    } catch (...) {
        ::unlink(path.c_str());
        throw;
    }
}

ImportResult import_bundle_from(Client& c, const std::filesystem::path& path, const std::string& name,
                                std::uint16_t mode)
{
    UniqueFd fd(::open(path.c_str(), O_RDONLY | O_CLOEXEC));
    if (!fd) {
        fail(Errc::io_failure, "cannot open " + path.string() + ": " + std::strerror(errno));
    }
    return c.import_bundle(fd.get(), name, mode);
}

} // namespace puddle
