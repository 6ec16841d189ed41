#include "puddle/daemon.hpp"

#include <fcntl.h>
#include <sys/file.h>

#include <algorithm>
#include <cstring>

#include "puddle/alloc.hpp"
#include "puddle/bundle.hpp"
#include "puddle/logging.hpp"

namespace puddle::daemon {

namespace fs = std::filesystem;
using wire::Code;
using wire::Frame;

namespace {

Bytes id_payload(const PuddleId& id)
{
    Writer w;
    put_id(w, id);
    return w.take();
}

UniqueFd open_file(const fs::path& p, bool writable)
{
    UniqueFd fd(::open(p.c_str(), (writable ? O_RDWR : O_RDONLY) | O_CLOEXEC));
    if (!fd) {
        fail(Errc::io_failure, "cannot open " + p.string() + ": " + std::strerror(errno));
    }
    return fd;
}

std::unique_ptr<pmem::PersistentDomain> open_domain(const fs::path& p, pmem::Platform* platform)
{
    pmem::OpenOptions o;
    o.platform = platform;
    o.create = false;
    return pmem::PersistentDomain::open(p, 0, o);
}

} // namespace

Daemon::Daemon(DaemonOptions options)
    : options_(std::move(options)),
      platform_(options_.platform ? options_.platform : &pmem::Platform::global()),
      reg_(options_.space)
{
    fs::create_directories(options_.data_dir);
    auto lock_path = options_.data_dir / "puddled.lock";
    lock_ = UniqueFd(::open(lock_path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0600));
    if (!lock_) {
        fail(Errc::io_failure, "cannot open " + lock_path.string());
    }
    if (::flock(lock_.get(), LOCK_EX | LOCK_NB) != 0) {
        fail(Errc::lock_held, "data directory is in use by another daemon");
    }
    if (options_.power_cycle) {
        pmem::power_cycle_tree(options_.data_dir);
    }
    journal_ = std::make_unique<Journal>(options_.data_dir, platform_, options_.journal_capacity,
                                         [this](const Record& r) { reg_.apply(r.jseq, r.type, r.payload); });
    journal_->set_snapshotter([this] { return reg_.snapshot(); });
    report_.dirty = !journal_->clean();
    collect_orphans();
    recovery_all();
    journal_->set_clean(false);
}

Daemon::~Daemon()
{
    if (abandoned_ || platform_->crashed()) {
        return;
    }
    try {
        std::lock_guard lock(mu_);
        for (auto& [id, s] : sessions_) {
            for (const auto& ls : s.log_spaces) {
                if (reg_.log_spaces().count(ls) != 0) {
                    commit(RecordType::log_space_end, id_payload(ls));
                }
            }
        }
        journal_->set_clean(true);
    } catch (const Error&) {
        // Leave the dirty flag; the next start recovers.
    }
}

fs::path Daemon::path_of(const PuddleId& id) const
{
    return puddle_file(options_.data_dir, id);
}

std::uint64_t Daemon::commit(RecordType type, ByteSpan payload)
{
    auto jseq = journal_->append(type, payload);
    reg_.apply(jseq, type, payload);
    return jseq;
}

void Daemon::remove_file(const PuddleId& id)
{
    // After power loss nothing runs; file system changes would outlive it.
    if (platform_->crashed()) {
        return;
    }
    remove_puddle_file(path_of(id));
}

void Daemon::free_puddle(const PuddleId& id)
{
    commit(RecordType::puddle_free, id_payload(id));
    remove_file(id);
}

void Daemon::collect_orphans()
{
    std::set<PuddleId> on_disk;
    for (const auto& e : fs::directory_iterator(options_.data_dir)) {
        const auto& p = e.path();
        if (p.extension() == ".durable") {
            auto backing = p;
            backing.replace_extension();
            if (!fs::exists(backing)) {
                std::error_code ec;
                fs::remove(p, ec);
            }
            continue;
        }
        if (p.extension() != ".pud") {
            continue;
        }
        PuddleId id;
        try {
            id = PuddleId::parse(p.stem().string());
        } catch (const Error&) {
            continue;
        }
        auto* rec = reg_.puddle(id);
        if (rec == nullptr || !rec->alive()) {
            remove_puddle_file(p);
            ++report_.orphans_removed;
        } else {
            on_disk.insert(id);
        }
    }
    for (const auto& [id, rec] : reg_.puddles()) {
        if (rec.alive() && on_disk.count(id) == 0) {
            ++report_.lost_puddles;
        }
    }
}

void Daemon::quarantine_pools(const logging::Log* log, std::uint64_t view)
{
    if (log == nullptr) {
        return;
    }
    std::vector<logging::LogEntry> entries;
    try {
        entries = log->entries();
    } catch (const Error&) {
        return;
    }
    std::set<PuddleId> pools;
    for (const auto& e : entries) {
        if (auto* p = reg_.owner_at(e.target, view); p != nullptr && !p->pool.nil()) {
            pools.insert(p->pool);
        }
    }
    for (const auto& pool : pools) {
        if (auto* rec = reg_.pool(pool); rec != nullptr && !rec->quarantined) {
            commit(RecordType::quarantine, id_payload(pool));
            report_.quarantined_pools.push_back(pool);
        }
    }
}

// Replays every active log of every registered log space.  Permissions and
// address ownership are evaluated at the log space's crash view: the journal
// position at which its session ended.
void Daemon::recovery_all()
{
    if (!report_.dirty && reg_.log_spaces().empty()) {
        return;
    }
    report_.ran = true;
    if (options_.recovery_hook) {
        options_.recovery_hook();
    }
    std::map<PuddleId, std::unique_ptr<pmem::PersistentDomain>> open;
    auto domain_of = [&](const PuddleId& id) -> pmem::PersistentDomain* {
        if (auto it = open.find(id); it != open.end()) {
            return it->second.get();
        }
        auto* rec = reg_.puddle(id);
        if (rec == nullptr || !rec->alive() || !fs::exists(path_of(id))) {
            return nullptr;
        }
        auto d = open_domain(path_of(id), platform_);
        auto* raw = d.get();
        open[id] = std::move(d);
        return raw;
    };

    auto spaces = reg_.log_spaces();
    for (const auto& [space_id, ls] : spaces) {
        ++report_.log_spaces;
        auto view = ls.ended == kNever ? reg_.last_jseq() : ls.ended;
        auto* space_rec = reg_.puddle(space_id);
        auto* sd = space_rec && space_rec->kind == PuddleKind::log_space ? domain_of(space_id) : nullptr;
        if (sd == nullptr || !logging::LogSpace::is_log_space(*sd)) {
            commit(RecordType::log_space_drop, id_payload(space_id));
            continue;
        }
        logging::LogSpace space(*sd);
        bool keep = false;
        for (const auto& entry : space.entries()) {
            if (entry.status != logging::LogStatus::active) {
                keep |= entry.status == logging::LogStatus::invalid;
                continue;
            }
            if (entry.role != logging::LogRole::head) {
                continue;
            }
            std::unique_ptr<logging::Log> log;
            try {
                auto* rec = reg_.puddle(entry.id);
                auto* hd = domain_of(entry.id);
                if (rec == nullptr || hd == nullptr || rec->kind != PuddleKind::log) {
                    fail(Errc::corrupt_log, "log puddle is missing");
                }
                log = std::make_unique<logging::Log>(*hd, [&](const PuddleId& id) -> pmem::PersistentDomain* {
                    return space.find(id) ? domain_of(id) : nullptr;
                });
                if (log->empty() || !log->range().admits_any()) {
                    continue;
                }
                auto resolver = [&](std::uint64_t addr, std::size_t len) -> std::optional<logging::ReplayTarget> {
                    auto* p = reg_.owner_at(addr, view);
                    if (p == nullptr || p->kind != PuddleKind::data || !p->alive()) {
                        return std::nullopt;
                    }
                    auto base = p->address_at(view);
                    auto perm = p->perm_at(view);
                    if (addr + len > base + p->total_size || !perm || !perm->can_write(ls.uid, ls.gid) ||
                        p->address() != base) {
                        return std::nullopt;
                    }
                    auto* d = domain_of(p->id);
                    if (d == nullptr) {
                        return std::nullopt;
                    }
                    return logging::ReplayTarget{d, addr - base};
                };
                report_.entries_applied += logging::replay_log(*log, resolver, {.skip_volatile = true, .strict = true});
                log->set_range(4, 4);
                log->reset();
                ++report_.logs_replayed;
            } catch (const Error& e) {
                space.set_status(entry.slot, logging::LogStatus::invalid);
                report_.quarantined.push_back({space_id, entry.id, e.what()});
                quarantine_pools(log.get(), view);
                keep = true;
            }
        }
        if (keep) {
            if (ls.ended == kNever) {
                commit(RecordType::log_space_end, id_payload(space_id));
            }
            continue;
        }
        // The owner is gone; its logs and log space go with it.
        auto listed = space.entries();
        open.clear();
        commit(RecordType::log_space_drop, id_payload(space_id));
        for (const auto& entry : listed) {
            if (auto* rec = reg_.puddle(entry.id); rec != nullptr && rec->alive()) {
                free_puddle(entry.id);
            }
        }
        free_puddle(space_id);
    }
}

std::uint64_t Daemon::open_session(const Credentials& creds)
{
    std::lock_guard lock(mu_);
    auto id = next_session_++;
    sessions_[id].creds = creds;
    return id;
}

void Daemon::close_session(std::uint64_t session)
{
    std::lock_guard lock(mu_);
    auto it = sessions_.find(session);
    if (it == sessions_.end()) {
        return;
    }
    try {
        for (const auto& ls : it->second.log_spaces) {
            if (auto rec = reg_.log_spaces().find(ls); rec != reg_.log_spaces().end() && rec->second.ended == kNever) {
                commit(RecordType::log_space_end, id_payload(ls));
            }
        }
    } catch (const Error&) {
    }
    sessions_.erase(it);
}

std::uint64_t Daemon::requests(Code code) const
{
    std::lock_guard lock(mu_);
    auto it = counts_.find(code);
    return it == counts_.end() ? 0 : it->second;
}

const PuddleRecord& Daemon::require_puddle(const PuddleId& id) const
{
    auto* p = reg_.puddle(id);
    if (p == nullptr || !p->alive()) {
        fail(Errc::unknown_uuid, "no puddle " + id.hex());
    }
    return *p;
}

const PoolRecord& Daemon::require_pool(const std::string& name) const
{
    auto* p = reg_.pool_named(name);
    if (p == nullptr) {
        fail(Errc::unknown_pool, "no pool named " + name);
    }
    return *p;
}

NewPuddle Daemon::make_puddle(std::uint64_t heap, PuddleKind kind, const PuddleId& pool, const Perm& perm)
{
    if (heap == 0 || heap % kPage != 0 || heap > options_.max_heap) {
        fail(Errc::bad_size, "heap size must be a non-zero page multiple within quota");
    }
    if (kind != PuddleKind::data && kind != PuddleKind::log && kind != PuddleKind::log_space) {
        fail(Errc::bad_size, "unknown puddle kind");
    }
    auto created = create_puddle(options_.data_dir, heap, kind, platform_);
    auto& d = *created.domain;
    NewPuddle np;
    np.id = created.id;
    np.kind = kind;
    np.total_size = d.capacity();
    np.heap_size = heap;
    np.pool = pool;
    np.perm = perm;
    try {
        np.address = reg_.addresses().assign(np.id, np.total_size);
        reg_.addresses().release(np.id); // the journal record reserves it
    } catch (...) {
        created.domain.reset();
        remove_puddle_file(created.path);
        throw;
    }
    d.store_value<std::uint64_t>(hdr::assigned_base, np.address);
    d.persist(hdr::assigned_base, 8);
    switch (kind) {
    case PuddleKind::data: alloc::PuddleHeap::format(d); break;
    case PuddleKind::log: logging::format_segment(d, 0); break;
    case PuddleKind::log_space: logging::LogSpace::format(d); break;
    }
    return np;
}

void Daemon::encode_capability(Frame& out, const PuddleRecord& p, bool writable) const
{
    Writer w;
    put_id(w, p.id);
    w.u32(static_cast<std::uint32_t>(p.kind)).u64(p.total_size).u64(p.address()).u8(writable ? 1 : 0);
    auto bytes = w.take();
    out.payload.insert(out.payload.end(), bytes.begin(), bytes.end());
    auto path = path_of(p.id);
    out.fds.push_back(open_file(path, writable));
    out.fds.push_back(open_file(pmem::shadow_path(path), writable));
}

bool Daemon::pool_busy(const PoolRecord& pool) const
{
    std::vector<AddressRange> ranges;
    for (const auto& id : pool.puddles) {
        auto& p = require_puddle(id);
        if (p.pending) {
            return true;
        }
        ranges.push_back({p.address(), p.total_size});
    }
    // A live, armed log with an entry aimed at the pool means a transaction
    // is in flight.
    for (const auto& [space_id, ls] : reg_.log_spaces()) {
        if (ls.ended != kNever || !fs::exists(path_of(space_id))) {
            continue;
        }
        auto sd = open_domain(path_of(space_id), platform_);
        if (!logging::LogSpace::is_log_space(*sd)) {
            continue;
        }
        logging::LogSpace space(*sd);
        std::map<PuddleId, std::unique_ptr<pmem::PersistentDomain>> segs;
        for (const auto& e : space.entries()) {
            if (e.status == logging::LogStatus::active && fs::exists(path_of(e.id))) {
                segs[e.id] = open_domain(path_of(e.id), platform_);
            }
        }
        for (const auto& e : space.entries()) {
            if (e.role != logging::LogRole::head || segs.count(e.id) == 0) {
                continue;
            }
            try {
                logging::Log log(*segs[e.id], [&](const PuddleId& id) -> pmem::PersistentDomain* {
                    auto it = segs.find(id);
                    return it == segs.end() ? nullptr : it->second.get();
                });
                if (!log.range().admits_any()) {
                    continue;
                }
                for (const auto& entry : log.entries()) {
                    for (const auto& r : ranges) {
                        if (r.contains(entry.target)) {
                            return true;
                        }
                    }
                }
            } catch (const Error&) {
                return true;
            }
        }
    }
    return false;
}

Frame Daemon::handle(std::uint64_t session, Frame req)
{
    std::lock_guard lock(mu_);
    Frame resp;
    resp.code = req.code;
    resp.id = req.id;
    ++counts_[req.code];
    auto it = sessions_.find(session);
    try {
        if (it == sessions_.end()) {
            fail(Errc::protocol_error, "unknown session");
        }
        resp = dispatch(it->second, req);
        resp.code = req.code;
        resp.id = req.id;
        resp.status = 0;
    } catch (const Error& e) {
        resp.payload.clear();
        resp.fds.clear();
        resp.status = static_cast<std::uint16_t>(e.errc());
        const auto& what = e.message();
        auto b = std::as_bytes(std::span(what.data(), what.size()));
        resp.payload.assign(b.begin(), b.end());
    } catch (const std::exception& e) {
        resp.payload.clear();
        resp.fds.clear();
        resp.status = static_cast<std::uint16_t>(Errc::io_failure);
        std::string what = e.what();
        auto b = std::as_bytes(std::span(what.data(), what.size()));
        resp.payload.assign(b.begin(), b.end());
    }
    return resp;
}

Frame Daemon::dispatch(Session& s, Frame& req)
{
    Frame out;
    Reader r(req.payload);
    const auto uid = s.creds.uid;
    const auto gid = s.creds.gid;
    switch (req.code) {
    case Code::ping:
        out.payload = req.payload;
        return out;

    case Code::get_new_puddle: {
        auto heap = r.u64();
        auto kind = static_cast<PuddleKind>(r.u32());
        auto pool_id = get_id(r);
        Perm perm{uid, gid, static_cast<std::uint16_t>(r.u16() & 0666)};
        if (!pool_id.nil()) {
            auto* pool = reg_.pool(pool_id);
            if (pool == nullptr) {
                fail(Errc::unknown_pool, "no pool " + pool_id.hex());
            }
            auto& root = require_puddle(pool->root);
            if (!root.perm().can_write(uid, gid)) {
                fail(Errc::permission_denied, "no write access to pool");
            }
            perm = root.perm();
        }
        if (kind != PuddleKind::data) {
            perm.mode = 0600;
        }
        auto np = make_puddle(heap, kind, pool_id, perm);
        Writer w;
        np.encode(w);
        commit(RecordType::puddle_new, w.bytes());
        encode_capability(out, require_puddle(np.id), true);
        return out;
    }

    case Code::get_exist_puddle: {
        auto id = get_id(r);
        bool want_write = r.u8() != 0;
        auto& p = require_puddle(id);
        if (!p.perm().can_read(uid, gid)) {
            fail(Errc::permission_denied, "no read access to " + id.hex());
        }
        encode_capability(out, p, want_write && p.perm().can_write(uid, gid));
        return out;
    }

    case Code::free_puddle: {
        auto id = get_id(r);
        auto& p = require_puddle(id);
        if (p.perm().uid != uid) {
            fail(Errc::not_owner, "only the owner may free a puddle");
        }
        if (auto* pool = reg_.pool(p.pool); pool != nullptr && pool->root == id) {
            fail(Errc::permission_denied, "a pool's root puddle cannot be freed");
        }
        if (reg_.log_spaces().count(id) != 0) {
            fail(Errc::already_registered, "log space is still registered");
        }
        free_puddle(id);
        return out;
    }

    case Code::reg_log_space: {
        auto id = get_id(r);
        auto& p = require_puddle(id);
        if (p.perm().uid != uid || p.kind != PuddleKind::log_space) {
            fail(Errc::not_owner, "caller does not own log space " + id.hex());
        }
        if (reg_.log_spaces().count(id) != 0) {
            fail(Errc::already_registered, "log space already registered");
        }
        Writer w;
        put_id(w, id);
        w.u32(uid).u32(gid);
        commit(RecordType::log_space_reg, w.bytes());
        s.log_spaces.insert(id);
        return out;
    }

    case Code::unreg_log_space: {
        auto id = get_id(r);
        auto it = reg_.log_spaces().find(id);
        if (it == reg_.log_spaces().end()) {
            fail(Errc::unknown_uuid, "log space not registered");
        }
        if (it->second.uid != uid) {
            fail(Errc::not_owner, "caller does not own log space");
        }
        commit(RecordType::log_space_drop, id_payload(id));
        s.log_spaces.erase(id);
        return out;
    }

    case Code::reg_ref_map: {
        auto map = ReferenceMap::decode(r);
        map.validate();
        if (auto it = reg_.maps().find(map.type_id); it != reg_.maps().end()) {
            if (!it->second.same_layout(map)) {
                fail(Errc::conflicting_map, "different reference map already registered for " + map.name);
            }
            out.payload.push_back(std::byte{0});
            return out;
        }
        Writer w;
        map.encode(w);
        commit(RecordType::ref_map, w.bytes());
        out.payload.push_back(std::byte{1});
        return out;
    }

    case Code::list_ref_maps: {
        Writer w;
        w.u32(static_cast<std::uint32_t>(reg_.maps().size()));
        for (const auto& [t, m] : reg_.maps()) {
            m.encode(w);
        }
        out.payload = w.take();
        return out;
    }

    case Code::create_pool: {
        auto name = r.str();
        auto heap = r.u64();
        auto mode = static_cast<std::uint16_t>(r.u16() & 0666);
        if (name.empty() || reg_.pool_named(name) != nullptr) {
            fail(Errc::pool_exists, "pool " + name + " exists");
        }
        auto pool_id = PuddleId::random();
        auto np = make_puddle(heap, PuddleKind::data, pool_id, Perm{uid, gid, mode});
        Writer w;
        put_id(w, pool_id);
        w.str(name);
        np.encode(w);
        commit(RecordType::pool_new, w.bytes());
        Writer o;
        put_id(o, pool_id);
        out.payload = o.take();
        encode_capability(out, require_puddle(np.id), true);
        return out;
    }

    case Code::open_pool: {
        auto& pool = require_pool(r.str());
        if (!require_puddle(pool.root).perm().can_read(uid, gid)) {
            fail(Errc::permission_denied, "no read access to pool");
        }
        Writer w;
        put_id(w, pool.id);
        put_id(w, pool.root);
        w.u8(pool.quarantined ? 1 : 0).u32(static_cast<std::uint32_t>(pool.puddles.size()));
        for (const auto& id : pool.puddles) {
            auto& p = require_puddle(id);
            put_id(w, id);
            w.u64(p.address()).u64(p.total_size).u8(p.pending ? 1 : 0);
        }
        out.payload = w.take();
        return out;
    }

    case Code::list_pools: {
        Writer w;
        w.u32(static_cast<std::uint32_t>(reg_.pools().size()));
        for (const auto& [id, pool] : reg_.pools()) {
            w.str(pool.name);
            put_id(w, id);
            w.u32(static_cast<std::uint32_t>(pool.puddles.size())).u8(pool.quarantined ? 1 : 0);
        }
        out.payload = w.take();
        return out;
    }

    case Code::export_pool: {
        auto& pool = require_pool(r.str());
        if (req.fds.empty()) {
            fail(Errc::protocol_error, "EXPORT_POOL needs an output descriptor");
        }
        if (pool_busy(pool)) {
            fail(Errc::pool_busy, "pool has pending relocation or an in-flight transaction");
        }
        bundle::Bundle b;
        b.manifest.pool_name = pool.name;
        b.manifest.pool = pool.id;
        b.manifest.root = pool.root;
        std::set<alloc::TypeId> types;
        for (const auto& id : pool.puddles) {
            auto& p = require_puddle(id);
            if (!p.perm().can_read(uid, gid)) {
                fail(Errc::permission_denied, "no read access to " + id.hex());
            }
            b.manifest.puddles.push_back({id, p.kind, p.total_size, p.heap_size, p.address()});
            auto d = open_domain(path_of(id), platform_);
            b.images.emplace_back(d->bytes().begin(), d->bytes().end());
            alloc::PuddleHeap heap(b.images.back().data());
            for (const auto& o : heap.objects()) {
                if (o.type_id != alloc::kRawType) {
                    types.insert(o.type_id);
                }
            }
        }
        for (auto t : types) {
            auto it = reg_.maps().find(t);
            if (it == reg_.maps().end()) {
                fail(Errc::unknown_type, "no reference map for a type stored in the pool");
            }
            b.maps.push_back(it->second);
        }
        bundle::write_file(req.fds[0].get(), b);
        std::uint64_t bytes = 0;
        for (const auto& img : b.images) {
            bytes += img.size();
        }
        Writer w;
        w.u32(static_cast<std::uint32_t>(b.images.size())).u64(bytes);
        out.payload = w.take();
        return out;
    }

    case Code::import_bundle: {
        auto name = r.str();
        auto mode = static_cast<std::uint16_t>(r.u16() & 0666);
        if (req.fds.empty()) {
            fail(Errc::protocol_error, "IMPORT_BUNDLE needs a bundle descriptor");
        }
        auto b = bundle::read_file(req.fds[0].get());
        for (const auto& m : b.maps) {
            m.validate();
            if (auto it = reg_.maps().find(m.type_id); it != reg_.maps().end() && !it->second.same_layout(m)) {
                fail(Errc::conflicting_map, "bundle map conflicts with registered map for " + m.name);
            }
        }
        if (name.empty()) {
            name = b.manifest.pool_name + "-copy";
            for (int k = 2; reg_.pool_named(name) != nullptr; ++k) {
                name = b.manifest.pool_name + "-copy" + std::to_string(k);
            }
        }
        if (reg_.pool_named(name) != nullptr) {
            fail(Errc::pool_exists, "pool " + name + " exists");
        }
        ImportRecord rec;
        rec.pool = PuddleId::random();
        rec.name = name;
        rec.group = PuddleId::random();
        rec.maps = b.maps;
        std::vector<fs::path> written;
        auto& amap = reg_.addresses();
        try {
            for (std::size_t i = 0; i < b.images.size(); ++i) {
                const auto& e = b.manifest.puddles[i];
                const auto& img = b.images[i];
                HeaderView(img.data()).validate(img.size());
                ImportRecord::Item item;
                item.puddle.id = PuddleId::random();
                item.puddle.kind = e.kind;
                item.puddle.total_size = e.total_size;
                item.puddle.heap_size = e.heap_size;
                item.puddle.pool = rec.pool;
                item.puddle.perm = Perm{uid, gid, mode};
                item.puddle.address = amap.assign(item.puddle.id, e.total_size, e.assigned);
                item.origin = e.assigned;
                rec.pending |= item.puddle.address != e.assigned;
                if (e.id == b.manifest.root) {
                    rec.root = item.puddle.id;
                }
                rec.items.push_back(item);
            }
            for (std::size_t i = 0; i < rec.items.size(); ++i) {
                const auto& item = rec.items[i];
                auto path = path_of(item.puddle.id);
                written.push_back(path);
                pmem::OpenOptions o;
                o.platform = platform_;
                auto d = pmem::PersistentDomain::open(path, item.puddle.total_size, o);
                d->store(0, b.images[i]);
                d->store(hdr::uuid, std::as_bytes(std::span(item.puddle.id.bytes)));
                d->store_value<std::uint64_t>(hdr::assigned_base, item.puddle.address);
                auto flags = HeaderView(d->data()).flags();
                flags = rec.pending ? (flags | kRelocPending) : (flags & ~std::uint32_t{kRelocPending});
                d->store_value<std::uint32_t>(hdr::flags, flags);
                d->persist(0, d->capacity());
            }
        } catch (...) {
            for (const auto& item : rec.items) {
                if (amap.reservation(item.puddle.id)) {
                    amap.release(item.puddle.id);
                }
            }
            for (const auto& p : written) {
                remove_puddle_file(p);
            }
            throw;
        }
        for (const auto& item : rec.items) {
            amap.release(item.puddle.id); // the journal record reserves it
        }
        commit(RecordType::import, rec.encode());
        Writer w;
        put_id(w, rec.pool);
        w.str(name).u32(static_cast<std::uint32_t>(rec.items.size())).u8(rec.pending ? 1 : 0);
        out.payload = w.take();
        return out;
    }

    case Code::status: {
        std::size_t frontier = 0;
        std::size_t alive = 0;
        for (const auto& [id, p] : reg_.puddles()) {
            alive += p.alive();
            frontier += p.alive() && p.pending;
        }
        Writer w;
        w.u8(report_.dirty ? 0 : 1).u8(report_.ran ? 1 : 0);
        w.u64(options_.space.base).u64(options_.space.length);
        w.u32(static_cast<std::uint32_t>(alive))
            .u32(static_cast<std::uint32_t>(reg_.pools().size()))
            .u32(static_cast<std::uint32_t>(reg_.log_spaces().size()))
            .u32(static_cast<std::uint32_t>(frontier));
        w.u64(journal_->generation()).u64(journal_->bytes_used());
        w.u32(static_cast<std::uint32_t>(report_.logs_replayed))
            .u32(static_cast<std::uint32_t>(report_.quarantined.size()))
            .u64(report_.entries_applied)
            .u32(static_cast<std::uint32_t>(report_.orphans_removed))
            .u32(static_cast<std::uint32_t>(report_.lost_puddles));
        std::vector<std::string> names;
        for (const auto& [id, pool] : reg_.pools()) {
            if (pool.quarantined) {
                names.push_back(pool.name);
            }
        }
        w.u32(static_cast<std::uint32_t>(names.size()));
        for (const auto& n : names) {
            w.str(n);
        }
        out.payload = w.take();
        return out;
    }

    case Code::lookup_addr: {
        auto addr = r.u64();
        auto owner = reg_.addresses().owner_of(addr);
        if (!owner) {
            fail(Errc::wild_address, "address is not reserved by any puddle");
        }
        auto& p = require_puddle(*owner);
        Writer w;
        put_id(w, p.id);
        w.u64(p.address()).u64(p.total_size).u8(p.pending ? 1 : 0);
        out.payload = w.take();
        return out;
    }

    case Code::reloc_info: {
        auto& p = require_puddle(get_id(r));
        if (!p.perm().can_read(uid, gid)) {
            fail(Errc::permission_denied, "no read access");
        }
        Writer w;
        w.u8(p.pending ? 1 : 0).u64(p.origin);
        std::vector<const PuddleRecord*> group;
        if (!p.group.nil()) {
            for (const auto& [id, q] : reg_.puddles()) {
                if (q.alive() && q.group == p.group) {
                    group.push_back(&q);
                }
            }
        }
        w.u32(static_cast<std::uint32_t>(group.size()));
        for (const auto* q : group) {
            w.u64(q->origin).u64(q->total_size).u64(q->address());
            put_id(w, q->id);
        }
        out.payload = w.take();
        return out;
    }

    case Code::mark_relocated: {
        auto& p = require_puddle(get_id(r));
        if (!p.perm().can_write(uid, gid)) {
            fail(Errc::permission_denied, "no write access");
        }
        if (p.pending) {
            commit(RecordType::relocated, id_payload(p.id));
        }
        return out;
    }

    case Code::chmod: {
        auto& p = require_puddle(get_id(r));
        Perm perm;
        perm.uid = r.u32();
        perm.gid = r.u32();
        perm.mode = static_cast<std::uint16_t>(r.u16() & 0666);
        if (p.perm().uid != uid && uid != 0) {
            fail(Errc::not_owner, "only the owner may change permissions");
        }
        Writer w;
        put_id(w, p.id);
        w.u32(perm.uid).u32(perm.gid).u16(perm.mode);
        commit(RecordType::perm, w.bytes());
        return out;
    }

    case Code::shutdown:
        shutdown_ = true;
        return out;
    }
    fail(Errc::protocol_error, "unhandled request code");
}

} // namespace puddle::daemon
