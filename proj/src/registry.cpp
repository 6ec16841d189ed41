#include "puddle/registry.hpp"

#include <algorithm>

#include "puddle/crc32c.hpp"

namespace puddle::daemon {

namespace fs = std::filesystem;

namespace {

void put_perm(Writer& w, const Perm& p)
{
    w.u32(p.uid).u32(p.gid).u16(p.mode);
}

Perm get_perm(Reader& r)
{
    Perm p;
    p.uid = r.u32();
    p.gid = r.u32();
    p.mode = r.u16();
    return p;
}

Bytes id_payload(const PuddleId& id)
{
    Writer w;
    put_id(w, id);
    return w.take();
}

} // namespace

// ---------------------------------------------------------------------------

std::optional<Perm> PuddleRecord::perm_at(std::uint64_t jseq) const
{
    std::optional<Perm> out;
    for (const auto& [at, p] : perms) {
        if (at <= jseq) {
            out = p;
        }
    }
    return out;
}

std::uint64_t PuddleRecord::address_at(std::uint64_t jseq) const
{
    std::uint64_t out = 0;
    for (const auto& [at, a] : addrs) {
        if (at <= jseq) {
            out = a;
        }
    }
    return out;
}

void NewPuddle::encode(Writer& w) const
{
    put_id(w, id);
    w.u32(static_cast<std::uint32_t>(kind)).u64(total_size).u64(heap_size);
    put_id(w, pool);
    put_perm(w, perm);
    w.u64(address);
}

NewPuddle NewPuddle::decode(Reader& r)
{
    NewPuddle p;
    p.id = get_id(r);
    p.kind = static_cast<PuddleKind>(r.u32());
    p.total_size = r.u64();
    p.heap_size = r.u64();
    p.pool = get_id(r);
    p.perm = get_perm(r);
    p.address = r.u64();
    return p;
}

Bytes ImportRecord::encode() const
{
    Writer w;
    put_id(w, pool);
    w.str(name);
    put_id(w, root);
    put_id(w, group);
    w.u8(pending ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(items.size()));
    for (const auto& it : items) {
        it.puddle.encode(w);
        w.u64(it.origin);
    }
    w.u32(static_cast<std::uint32_t>(maps.size()));
    for (const auto& m : maps) {
        m.encode(w);
    }
    return w.take();
}

ImportRecord ImportRecord::decode(ByteSpan payload)
{
    Reader r(payload, Errc::corrupt_state);
    ImportRecord rec;
    rec.pool = get_id(r);
    rec.name = r.str();
    rec.root = get_id(r);
    rec.group = get_id(r);
    rec.pending = r.u8() != 0;
    auto n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
        Item it;
        it.puddle = NewPuddle::decode(r);
        it.origin = r.u64();
        rec.items.push_back(it);
    }
    auto m = r.u32();
    for (std::uint32_t i = 0; i < m; ++i) {
        rec.maps.push_back(ReferenceMap::decode(r));
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Registry

Registry::Registry(GlobalSpaceConfig space) : space_(space), amap_(space.base, space.length) {}

const PuddleRecord* Registry::puddle(const PuddleId& id) const
{
    auto it = puddles_.find(id);
    return it == puddles_.end() ? nullptr : &it->second;
}

const PoolRecord* Registry::pool(const PuddleId& id) const
{
    auto it = pools_.find(id);
    return it == pools_.end() ? nullptr : &it->second;
}

const PoolRecord* Registry::pool_named(const std::string& name) const
{
    for (const auto& [id, p] : pools_) {
        if (p.name == name) {
            return &p;
        }
    }
    return nullptr;
}

PuddleRecord& Registry::must(const PuddleId& id)
{
    auto it = puddles_.find(id);
    if (it == puddles_.end()) {
        fail(Errc::corrupt_state, "journal names unknown puddle " + id.hex());
    }
    return it->second;
}

const PuddleRecord* Registry::owner_at(std::uint64_t addr, std::uint64_t jseq) const
{
    for (const auto& [id, p] : puddles_) {
        if (!p.alive_at(jseq)) {
            continue;
        }
        auto base = p.address_at(jseq);
        if (base != 0 && addr >= base && addr - base < p.total_size) {
            return &p;
        }
    }
    return nullptr;
}

void Registry::add_puddle(std::uint64_t jseq, const NewPuddle& p)
{
    PuddleRecord rec;
    rec.id = p.id;
    rec.kind = p.kind;
    rec.total_size = p.total_size;
    rec.heap_size = p.heap_size;
    rec.pool = p.pool;
    rec.created = jseq;
    rec.perms.push_back({jseq, p.perm});
    if (p.address != 0) {
        amap_.reserve_at(p.id, p.address, p.total_size);
        rec.addrs.push_back({jseq, p.address});
    }
    if (!p.pool.nil()) {
        if (auto it = pools_.find(p.pool); it != pools_.end()) {
            it->second.puddles.push_back(p.id);
        }
    }
    puddles_[p.id] = std::move(rec);
}

void Registry::apply(std::uint64_t jseq, RecordType type, ByteSpan payload)
{
    Reader r(payload, Errc::corrupt_state);
    last_ = std::max(last_, jseq);
    switch (type) {
    case RecordType::puddle_new:
        add_puddle(jseq, NewPuddle::decode(r));
        break;
    case RecordType::puddle_free: {
        auto& p = must(get_id(r));
        if (amap_.reservation(p.id)) {
            amap_.release(p.id);
        }
        p.freed = jseq;
        if (auto it = pools_.find(p.pool); it != pools_.end()) {
            std::erase(it->second.puddles, p.id);
        }
        break;
    }
    case RecordType::address: {
        auto& p = must(get_id(r));
        auto addr = r.u64();
        if (!p.alive()) {
            p.addrs.push_back({jseq, addr}); // tombstone history from a snapshot
            break;
        }
        if (amap_.reservation(p.id)) {
            amap_.release(p.id);
        }
        if (addr != 0) {
            amap_.reserve_at(p.id, addr, p.total_size);
        }
        p.addrs.push_back({jseq, addr});
        break;
    }
    case RecordType::perm: {
        auto& p = must(get_id(r));
        p.perms.push_back({jseq, get_perm(r)});
        break;
    }
    case RecordType::pool_new: {
        PoolRecord pool;
        pool.id = get_id(r);
        pool.name = r.str();
        auto root = NewPuddle::decode(r);
        pool.root = root.id;
        pools_[pool.id] = pool;
        add_puddle(jseq, root);
        break;
    }
    case RecordType::log_space_reg: {
        LogSpaceRecord ls;
        ls.id = get_id(r);
        ls.uid = r.u32();
        ls.gid = r.u32();
        ls.registered = jseq;
        log_spaces_[ls.id] = ls;
        break;
    }
    case RecordType::log_space_end: {
        auto id = get_id(r);
        if (auto it = log_spaces_.find(id); it != log_spaces_.end()) {
            it->second.ended = jseq;
        }
        break;
    }
    case RecordType::log_space_drop:
        log_spaces_.erase(get_id(r));
        break;
    case RecordType::ref_map: {
        auto m = ReferenceMap::decode(r);
        maps_[m.type_id] = std::move(m);
        break;
    }
    case RecordType::import: {
        auto rec = ImportRecord::decode(payload);
        PoolRecord pool;
        pool.id = rec.pool;
        pool.name = rec.name;
        pool.root = rec.root;
        pools_[pool.id] = pool;
        for (const auto& it : rec.items) {
            add_puddle(jseq, it.puddle);
            auto& p = puddles_[it.puddle.id];
            p.group = rec.group;
            p.origin = it.origin;
            p.pending = rec.pending;
        }
        for (const auto& m : rec.maps) {
            maps_.emplace(m.type_id, m);
        }
        break;
    }
    case RecordType::relocated:
        must(get_id(r)).pending = false;
        break;
    case RecordType::quarantine: {
        auto id = get_id(r);
        if (auto it = pools_.find(id); it != pools_.end()) {
            it->second.quarantined = true;
        }
        break;
    }
    case RecordType::reloc_state: {
        auto& p = must(get_id(r));
        p.group = get_id(r);
        p.origin = r.u64();
        p.pending = r.u8() != 0;
        break;
    }
    case RecordType::pool_state: {
        PoolRecord pool;
        pool.id = get_id(r);
        pool.name = r.str();
        pool.root = get_id(r);
        pool.quarantined = r.u8() != 0;
        auto n = r.u32();
        for (std::uint32_t i = 0; i < n; ++i) {
            pool.puddles.push_back(get_id(r));
        }
        pools_[pool.id] = std::move(pool);
        break;
    }
    default:
        fail(Errc::corrupt_state, "unknown journal record type " + std::to_string(static_cast<int>(type)));
    }
}

std::vector<Record> Registry::snapshot() const
{
    std::vector<Record> out;
    bool keep_history = !log_spaces_.empty();
    for (const auto& [id, p] : puddles_) {
        if (!p.alive() && !keep_history) {
            continue;
        }
        NewPuddle np;
        np.id = p.id;
        np.kind = p.kind;
        np.total_size = p.total_size;
        np.heap_size = p.heap_size;
        np.pool = p.pool;
        np.perm = p.perms.front().second;
        std::size_t first_addr = 0;
        if (p.alive() && !p.addrs.empty() && p.addrs.front().first == p.created) {
            np.address = p.addrs.front().second;
            first_addr = 1;
        }
        Writer w;
        np.encode(w);
        out.push_back({p.created, RecordType::puddle_new, w.take()});
        // Tombstones are freed before their address history so they never
        // hold a reservation.
        if (!p.alive()) {
            out.push_back({p.freed, RecordType::puddle_free, id_payload(id)});
        }
        for (std::size_t i = first_addr; i < p.addrs.size(); ++i) {
            Writer a;
            put_id(a, id);
            a.u64(p.addrs[i].second);
            out.push_back({p.addrs[i].first, RecordType::address, a.take()});
        }
        for (std::size_t i = 1; i < p.perms.size(); ++i) {
            Writer a;
            put_id(a, id);
            put_perm(a, p.perms[i].second);
            out.push_back({p.perms[i].first, RecordType::perm, a.take()});
        }
        if (!p.group.nil()) {
            Writer a;
            put_id(a, id);
            put_id(a, p.group);
            a.u64(p.origin).u8(p.pending ? 1 : 0);
            out.push_back({p.created, RecordType::reloc_state, a.take()});
        }
    }
    for (const auto& [id, pool] : pools_) {
        Writer w;
        put_id(w, id);
        w.str(pool.name);
        put_id(w, pool.root);
        w.u8(pool.quarantined ? 1 : 0).u32(static_cast<std::uint32_t>(pool.puddles.size()));
        for (const auto& pid : pool.puddles) {
            put_id(w, pid);
        }
        out.push_back({last_, RecordType::pool_state, w.take()});
    }
    for (const auto& [id, ls] : log_spaces_) {
        Writer w;
        put_id(w, id);
        w.u32(ls.uid).u32(ls.gid);
        out.push_back({ls.registered, RecordType::log_space_reg, w.take()});
        if (ls.ended != kNever) {
            out.push_back({ls.ended, RecordType::log_space_end, id_payload(id)});
        }
    }
    for (const auto& [t, m] : maps_) {
        Writer w;
        m.encode(w);
        out.push_back({last_, RecordType::ref_map, w.take()});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Journal

namespace {

constexpr std::size_t kRecordHeader = 16;

fs::path generation_path(const fs::path& dir, std::uint64_t gen)
{
    return dir / ("puddled.journal." + std::to_string(gen));
}

std::size_t record_size(std::size_t payload)
{
    return align_up(kRecordHeader + payload + 4, 8);
}

Bytes encode_record(std::uint64_t jseq, RecordType type, ByteSpan payload)
{
    Writer w;
    w.u32(static_cast<std::uint32_t>(payload.size()))
        .u16(static_cast<std::uint16_t>(type))
        .u16(0)
        .u64(jseq)
        .raw(payload);
    auto crc = crc32c(w.bytes());
    w.u32(crc);
    auto out = w.take();
    out.resize(record_size(payload.size()));
    return out;
}

std::optional<std::uint64_t> parse_generation(const fs::path& p)
{
    auto name = p.filename().string();
    const std::string prefix = "puddled.journal.";
    if (name.rfind(prefix, 0) != 0) {
        return std::nullopt;
    }
    auto rest = name.substr(prefix.size());
    if (rest.empty() || rest.find_first_not_of("0123456789") != std::string::npos) {
        return std::nullopt;
    }
    return std::stoull(rest);
}

void remove_generation(const fs::path& p)
{
    std::error_code ec;
    fs::remove(p, ec);
    fs::remove(pmem::shadow_path(p), ec);
}

} // namespace

bool Journal::is_journal_file(const fs::path& p)
{
    auto name = p.filename().string();
    return name.rfind("puddled.journal.", 0) == 0 && p.extension() != ".durable";
}

Journal::Journal(const fs::path& dir, pmem::Platform* platform, std::uint64_t capacity,
                 const std::function<void(const Record&)>& sink)
    : dir_(dir), platform_(platform), capacity_(align_up(capacity, kPage))
{
    std::vector<std::uint64_t> gens;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (auto g = parse_generation(e.path())) {
            gens.push_back(*g);
        }
    }
    std::sort(gens.rbegin(), gens.rend());
    pmem::OpenOptions o;
    o.platform = platform_;
    o.create = false;
    for (auto g : gens) {
        auto path = generation_path(dir, g);
        std::unique_ptr<pmem::PersistentDomain> d;
        try {
            d = pmem::PersistentDomain::open(path, 0, o);
        } catch (const Error&) {
            remove_generation(path);
            continue;
        }
        if (d->capacity() < jhdr::size || load<std::uint64_t>(d->data() + jhdr::magic) != kJournalMagic ||
            load<std::uint64_t>(d->data() + jhdr::sealed) != 1) {
            d.reset();
            remove_generation(path);
            continue;
        }
        if (!d_) {
            d_ = std::move(d);
            generation_ = g;
        } else {
            d.reset();
            remove_generation(path);
        }
    }
    if (!d_) {
        generation_ = gens.empty() ? 1 : gens.front() + 1;
        // A directory that never held a journal starts out clean.
        d_ = create_generation(generation_, capacity_, {}, gens.empty());
    }

    auto tail = load<std::uint64_t>(d_->data() + jhdr::tail);
    if (tail > d_->capacity() - jhdr::size) {
        fail(Errc::corrupt_state, "journal tail beyond capacity");
    }
    next_jseq_ = std::max<std::uint64_t>(1, load<std::uint64_t>(d_->data() + jhdr::next_jseq));
    const std::byte* p = d_->data() + jhdr::size;
    std::uint64_t pos = 0;
    while (pos < tail) {
        if (tail - pos < kRecordHeader + 4) {
            fail(Errc::corrupt_state, "truncated journal record");
        }
        Reader r({p + pos, kRecordHeader}, Errc::corrupt_state);
        Record rec;
        auto len = r.u32();
        rec.type = static_cast<RecordType>(r.u16());
        r.u16();
        rec.jseq = r.u64();
        if (record_size(len) > tail - pos) {
            fail(Errc::corrupt_state, "journal record overruns tail");
        }
        auto stored = load<std::uint32_t>(p + pos + kRecordHeader + len);
        if (crc32c(ByteSpan(p + pos, kRecordHeader + len)) != stored) {
            fail(Errc::corrupt_state, "journal record checksum mismatch");
        }
        rec.payload.assign(p + pos + kRecordHeader, p + pos + kRecordHeader + len);
        sink(rec);
        next_jseq_ = std::max(next_jseq_, rec.jseq + 1);
        ++loaded_;
        pos += record_size(len);
    }
}

Journal::~Journal() = default;

std::unique_ptr<pmem::PersistentDomain> Journal::create_generation(std::uint64_t gen,
                                                                   std::uint64_t capacity,
                                                                   const std::vector<Record>& records,
                                                                   bool clean)
{
    auto path = generation_path(dir_, gen);
    remove_generation(path);
    pmem::OpenOptions o;
    o.platform = platform_;
    o.label = path.filename().string();
    auto d = pmem::PersistentDomain::open(path, capacity, o);
    Writer body;
    for (const auto& r : records) {
        body.raw(encode_record(r.jseq, r.type, r.payload));
    }
    const auto& b = body.bytes();
    if (!b.empty()) {
        d->store(jhdr::size, b);
    }
    Writer h;
    h.u64(kJournalMagic).u64(gen).u64(b.size()).u64(clean ? 1 : 0).u64(0).u64(next_jseq_);
    d->store(0, h.bytes());
    d->persist(0, jhdr::size + b.size());
    d->store_value<std::uint64_t>(jhdr::sealed, 1);
    d->persist(jhdr::sealed, 8);
    return d;
}

std::uint64_t Journal::bytes_used() const
{
    return load<std::uint64_t>(d_->data() + jhdr::tail);
}

void Journal::compact(std::size_t need)
{
    std::vector<Record> records;
    if (snapshot_) {
        records = snapshot_();
    }
    std::uint64_t size = 0;
    for (const auto& r : records) {
        size += record_size(r.payload.size());
    }
    auto cap = std::max<std::uint64_t>(capacity_, align_up(jhdr::size + 2 * (size + need), kPage));
    auto old = d_->path();
    auto fresh = create_generation(generation_ + 1, cap, records, clean());
    d_ = std::move(fresh);
    ++generation_;
    capacity_ = cap;
    if (!platform_->crashed()) {
        remove_generation(old);
    }
}

std::uint64_t Journal::append(RecordType type, ByteSpan payload)
{
    auto need = record_size(payload.size());
    if (jhdr::size + bytes_used() + need > d_->capacity()) {
        compact(need);
    }
    auto jseq = next_jseq_++;
    auto tail = bytes_used();
    auto rec = encode_record(jseq, type, payload);
    d_->store(jhdr::size + tail, rec);
    d_->persist(jhdr::size + tail, rec.size());
    d_->store_value<std::uint64_t>(jhdr::tail, tail + rec.size());
    d_->persist(jhdr::tail, 8);
    return jseq;
}

bool Journal::clean() const
{
    return load<std::uint64_t>(d_->data() + jhdr::clean) == 1;
}

void Journal::set_clean(bool clean)
{
    d_->store_value<std::uint64_t>(jhdr::clean, clean ? 1 : 0);
    d_->store_value<std::uint64_t>(jhdr::next_jseq, next_jseq_);
    d_->persist(jhdr::tail, 32);
}

} // namespace puddle::daemon
