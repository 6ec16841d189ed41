#include "puddle/runtime.hpp"

#include <unistd.h>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstring>

namespace puddle {

namespace {

std::mutex g_mu;
Runtime* g_current = nullptr;
std::atomic<Runtime*> g_fault_rt{nullptr};
std::uint64_t g_serial = 0;
struct sigaction g_prev_segv {};
struct sigaction g_prev_bus {};

constexpr std::uint64_t kLogSpaceHeap = 64 << 10;
constexpr std::size_t kRelocBatch = 256;

std::uint64_t addr_of(const void* p)
{
    return reinterpret_cast<std::uint64_t>(p);
}

} // namespace

/// Returns a thread's context to its runtime when the thread exits.
struct ThreadSlot {
    std::uint64_t serial = 0;
    TxContext* ctx = nullptr;

    ~ThreadSlot()
    {
        std::lock_guard lock(g_mu);
        if (g_current != nullptr && g_current->serial_ == serial && ctx != nullptr && ctx->depth() == 0) {
            std::lock_guard rl(g_current->mu_);
            g_current->idle_.push_back(ctx);
        }
    }
};

namespace {
thread_local ThreadSlot t_slot;
}

// ---------------------------------------------------------------------------
// TxContext

void TxContext::require_active() const
{
    if (depth_ == 0 || state_ != TxState::active) {
        fail(Errc::not_in_tx, "no active transaction on this thread");
    }
}

void TxContext::begin()
{
    if (depth_ > 0) {
        ++depth_;
        return;
    }
    if (!log_) {
        rt_.acquire_log(*this);
    }
    state_ = TxState::active;
    depth_ = 1;
}

void TxContext::arm()
{
    if (!armed_) {
        log_->set_range(0, 2);
        armed_ = true;
    }
}

void TxContext::add(const void* addr, std::size_t len)
{
    require_active();
    if (len == 0) {
        return;
    }
    auto a = addr_of(addr);
    rt_.writable_target(a, len);
    auto* p = static_cast<const std::byte*>(addr);
    Bytes old(p, p + len);
    arm();
    log_->append(a, old, logging::kUndoSeq, logging::kBackward);
    undo_.push_back({a, std::move(old), false});
}

void TxContext::add_volatile(void* addr, std::size_t len)
{
    require_active();
    if (len == 0) {
        return;
    }
    auto* p = static_cast<const std::byte*>(addr);
    Bytes old(p, p + len);
    arm();
    log_->append(addr_of(addr), old, logging::kUndoSeq, logging::kBackward | logging::kVolatileTarget);
    undo_.push_back({addr_of(addr), std::move(old), true});
}

void TxContext::redo_set(void* addr, ByteSpan payload)
{
    require_active();
    if (payload.empty()) {
        return;
    }
    auto a = addr_of(addr);
    rt_.writable_target(a, payload.size());
    arm();
    log_->append(a, payload, logging::kRedoSeq, 0);
    redo_.push_back({a, Bytes(payload.begin(), payload.end())});
}

void TxContext::before_write(void* addr, std::size_t len)
{
    if (meta_.insert({addr_of(addr), len}).second) {
        add(addr, len);
    }
}

void TxContext::fresh(void* addr, std::size_t len)
{
    fresh_.push_back({addr_of(addr), len});
}

void TxContext::lock_pool(Pool& p)
{
    if (std::find(locked_.begin(), locked_.end(), &p) == locked_.end()) {
        p.alloc_mu_.lock();
        locked_.push_back(&p);
    }
}

void TxContext::commit()
{
    require_active();
    if (depth_ > 1) {
        --depth_;
        return;
    }
    if (!armed_ && fresh_.empty()) {
        finish();
        return;
    }

    // Stage 1: every in-place update and fresh object reaches the
    // persistence domain, then the redo entries become the valid set.
    state_ = TxState::committing_stage1;
    std::set<pmem::PersistentDomain*> touched;
    auto flush = [&](std::uint64_t a, std::size_t len) {
        auto [m, d] = rt_.writable_target(a, len);
        d->flush(a - m->range.start, len);
        touched.insert(d);
    };
    for (const auto& u : undo_) {
        if (!u.is_volatile) {
            flush(u.addr, u.old.size());
        }
    }
    for (const auto& f : fresh_) {
        flush(f.start, f.length);
    }
    for (auto* d : touched) {
        d->fence();
    }
    log_->set_range(2, 4);

    // Stage 2: roll the redo entries forward.
    state_ = TxState::committing_stage2;
    touched.clear();
    for (const auto& r : redo_) {
        auto [m, d] = rt_.writable_target(r.addr, r.data.size());
        auto off = r.addr - m->range.start;
        d->store(off, r.data);
        d->flush(off, r.data.size());
        touched.insert(d);
    }
    for (auto* d : touched) {
        d->fence();
    }

    // Stage 3: nothing in the log is valid any more.
    log_->set_range(4, 4);
    log_->reset();
    state_ = TxState::committed;
    finish();
}

void TxContext::abort()
{
    if (depth_ == 0) {
        return;
    }
    std::set<pmem::PersistentDomain*> touched;
    for (auto it = undo_.rbegin(); it != undo_.rend(); ++it) {
        if (it->is_volatile) {
            std::memcpy(reinterpret_cast<void*>(it->addr), it->old.data(), it->old.size());
            continue;
        }
        auto [m, d] = rt_.writable_target(it->addr, it->old.size());
        auto off = it->addr - m->range.start;
        d->store(off, it->old);
        d->flush(off, it->old.size());
        touched.insert(d);
    }
    for (auto* d : touched) {
        d->fence();
    }
    if (armed_) {
        log_->set_range(4, 4);
        log_->reset();
    }
    {
        std::lock_guard lock(rt_.map_mu_);
        for (auto* p : locked_) {
            std::lock_guard ml(p->members_mu_);
            for (const auto& m : p->members_) {
                if (auto it = rt_.heaps_.find(m.id); it != rt_.heaps_.end()) {
                    it->second->invalidate_cache();
                }
            }
        }
    }
    finish();
}

void TxContext::finish()
{
    undo_.clear();
    redo_.clear();
    fresh_.clear();
    meta_.clear();
    armed_ = false;
    depth_ = 0;
    state_ = TxState::idle;
    for (auto* p : locked_) {
        p->alloc_mu_.unlock();
    }
    locked_.clear();
}

// ---------------------------------------------------------------------------
// Pool

std::vector<PuddleId> Pool::puddles() const
{
    std::lock_guard lock(members_mu_);
    std::vector<PuddleId> out;
    for (const auto& m : members_) {
        out.push_back(m.id);
    }
    return out;
}

alloc::PuddleHeap& Pool::heap_of(const PuddleId& id)
{
    return rt_.heap_at(rt_.map_puddle(id));
}

std::uint64_t Pool::pm_malloc(std::size_t size, alloc::TypeId type)
{
    auto& ctx = rt_.tx();
    ctx.require_active();
    if (size == 0) {
        fail(Errc::bad_size, "allocation size must be positive");
    }
    ctx.lock_pool(*this);

    auto try_in = [&](GlobalSpace::Mapping& m) -> std::optional<std::uint64_t> {
        if (m.domain->read_only()) {
            return std::nullopt;
        }
        auto& heap = rt_.heap_at(m);
        if (auto off = heap.alloc(size, type, ctx)) {
            return m.range.start + heap.heap_start() + *off;
        }
        return std::nullopt;
    };

    auto ids = puddles();
    for (const auto& id : ids) {
        if (auto* m = rt_.space_->get(id)) {
            if (auto a = try_in(*m)) {
                return *a;
            }
        }
    }
    for (const auto& id : ids) {
        if (!rt_.space_->mapped(id)) {
            if (auto a = try_in(rt_.map_puddle(id))) {
                return *a;
            }
        }
    }
    auto heap = std::max<std::uint64_t>(rt_.options_.pool_heap, std::bit_ceil<std::uint64_t>(size) * 2);
    heap = align_up(heap, kPage);
    auto cap = rt_.client_->new_puddle(heap, PuddleKind::data, id_);
    Member mem{cap.id, cap.assigned, cap.total_size};
    GlobalSpace::Mapping* m;
    {
        std::lock_guard lock(rt_.map_mu_);
        m = &rt_.space_->map(std::move(cap));
        ++rt_.stats_.puddles_mapped;
    }
    {
        std::lock_guard lock(members_mu_);
        members_.push_back(mem);
    }
    if (auto a = try_in(*m)) {
        return *a;
    }
    fail(Errc::out_of_space, "allocation does not fit a fresh puddle");
}

void Pool::pm_free(std::uint64_t addr)
{
    auto& ctx = rt_.tx();
    ctx.require_active();
    ctx.lock_pool(*this);
    std::optional<Member> owner;
    {
        std::lock_guard lock(members_mu_);
        for (const auto& m : members_) {
            if (addr >= m.assigned && addr - m.assigned < m.total_size) {
                owner = m;
            }
        }
    }
    if (!owner) {
        fail(Errc::invalid_address, "address is not inside this pool");
    }
    auto& m = rt_.map_puddle(owner->id);
    auto& heap = rt_.heap_at(m);
    auto heap_base = m.range.start + heap.heap_start();
    if (addr < heap_base) {
        fail(Errc::invalid_address, "address lies in the puddle header");
    }
    heap.free(addr - heap_base, ctx);
}

std::uint64_t Pool::root_address() const
{
    rt_.map_puddle(root_);
    return rt_.space_->root_address(root_);
}

void Pool::set_root(std::uint64_t addr)
{
    auto& m = rt_.map_puddle(root_);
    auto heap_base = m.range.start + HeaderView(m.domain->data()).header_size();
    auto end = m.range.start + m.domain->capacity();
    if (addr != 0 && (addr < heap_base || addr >= end)) {
        fail(Errc::not_in_root_puddle, "root must lie in the pool's root puddle");
    }
    std::uint64_t value = addr == 0 ? kNullOffset : addr - heap_base;
    auto& ctx = rt_.tx();
    if (ctx.depth() > 0) {
        ctx.add(m.domain->data() + hdr::root_offset, 8);
        put(m.domain->data() + hdr::root_offset, value);
        return;
    }
    m.domain->store_value(hdr::root_offset, value);
    m.domain->persist(hdr::root_offset, 8);
}

std::uint64_t Pool::get_root() const
{
    auto& m = rt_.map_puddle(root_);
    HeaderView h(m.domain->data());
    auto off = h.root_offset();
    return off == kNullOffset ? 0 : m.range.start + h.header_size() + off;
}

std::vector<alloc::ObjectDescriptor> Pool::objects()
{
    std::vector<alloc::ObjectDescriptor> out;
    for (const auto& id : puddles()) {
        auto& m = rt_.map_puddle(id);
        auto& heap = rt_.heap_at(m);
        auto objs = heap.objects();
        out.insert(out.end(), objs.begin(), objs.end());
    }
    return out;
}

alloc::HeapStats Pool::stats()
{
    alloc::HeapStats s;
    for (const auto& id : puddles()) {
        auto hs = heap_of(id).stats();
        s.heap += hs.heap;
        s.free += hs.free;
        s.allocated += hs.allocated;
        s.metadata += hs.metadata;
        s.slab_pages += hs.slab_pages;
    }
    return s;
}

// ---------------------------------------------------------------------------
// Runtime

Runtime::Runtime(std::unique_ptr<Client> client, RuntimeOptions options)
    : client_(std::move(client)),
      options_(options),
      platform_(options.platform ? options.platform : &pmem::Platform::global())
{
    auto st = client_->status();
    std::lock_guard lock(g_mu);
    if (g_current != nullptr) {
        fail(Errc::space_in_use, "a runtime is already active in this process");
    }
    space_ = std::make_unique<GlobalSpace>(GlobalSpaceConfig{st.space_base, st.space_length}, platform_);
    serial_ = ++g_serial;
    g_current = this;
    if (options_.fault_handler) {
        struct sigaction sa {};
        sa.sa_sigaction = &Runtime::on_fault;
        sa.sa_flags = SA_SIGINFO;
        sigemptyset(&sa.sa_mask);
        ::sigaction(SIGSEGV, &sa, &g_prev_segv);
        ::sigaction(SIGBUS, &sa, &g_prev_bus);
        g_fault_rt.store(this);
    }
}

Runtime::~Runtime()
{
    {
        std::lock_guard lock(g_mu);
        if (g_fault_rt.load() == this) {
            g_fault_rt.store(nullptr);
            ::sigaction(SIGSEGV, &g_prev_segv, nullptr);
            ::sigaction(SIGBUS, &g_prev_bus, nullptr);
        }
        g_current = nullptr;
    }
    const bool clean = !abandoned_ && !platform_->crashed();
    if (clean) {
        try {
            for (auto& c : contexts_) {
                c->abort();
            }
            if (!log_space_id_.nil()) {
                client_->unreg_log_space(log_space_id_);
                for (const auto& id : log_puddles_) {
                    client_->free_puddle(id);
                }
            }
        } catch (const Error&) {
            // The daemon recovers whatever is left.
        }
    }
    reloc_log_.reset();
    reloc_segments_.clear();
    reloc_dom_.reset();
    contexts_.clear();
    log_space_.reset();
    log_space_dom_.reset();
    if (clean && !log_space_id_.nil()) {
        try {
            client_->free_puddle(log_space_id_);
        } catch (const Error&) {
        }
    }
    heaps_.clear();
    pools_.clear();
    space_.reset();
}

Runtime* Runtime::current() noexcept
{
    std::lock_guard lock(g_mu);
    return g_current;
}

TxContext& Runtime::tx()
{
    if (t_slot.serial == serial_ && t_slot.ctx != nullptr) {
        return *t_slot.ctx;
    }
    std::lock_guard lock(mu_);
    TxContext* c;
    if (!idle_.empty()) {
        c = idle_.back();
        idle_.pop_back();
    } else {
        contexts_.push_back(std::unique_ptr<TxContext>(new TxContext(*this)));
        c = contexts_.back().get();
    }
    t_slot.serial = serial_;
    t_slot.ctx = c;
    return *c;
}

void Runtime::ensure_log_space_locked()
{
    if (log_space_) {
        return;
    }
    auto cap = client_->new_puddle(kLogSpaceHeap, PuddleKind::log_space);
    pmem::OpenOptions o;
    o.platform = platform_;
    o.label = "log-space";
    auto id = cap.id;
    auto dom = pmem::PersistentDomain::adopt(std::move(cap.backing), std::move(cap.shadow), cap.total_size, o);
    log_space_ = std::make_unique<logging::LogSpace>(*dom);
    log_space_dom_ = std::move(dom);
    log_space_id_ = id;
    client_->reg_log_space(id);
}

logging::ChainedSegment Runtime::new_segment(std::vector<std::unique_ptr<pmem::PersistentDomain>>& owner)
{
    auto cap = client_->new_puddle(options_.log_heap, PuddleKind::log);
    pmem::OpenOptions o;
    o.platform = platform_;
    o.label = "log-segment";
    auto id = cap.id;
    auto dom = pmem::PersistentDomain::adopt(std::move(cap.backing), std::move(cap.shadow), cap.total_size, o);
    {
        std::lock_guard lock(mu_);
        ensure_log_space_locked();
        log_space_->add(id, logging::LogRole::segment);
        log_puddles_.push_back(id);
    }
    owner.push_back(std::move(dom));
    return {id, owner.back().get()};
}

namespace {

logging::SegmentResolver resolver_over(std::vector<std::unique_ptr<pmem::PersistentDomain>>& segs)
{
    return [&segs](const PuddleId& id) -> pmem::PersistentDomain* {
        for (auto& d : segs) {
            if (HeaderView(d->data()).uuid() == id) {
                return d.get();
            }
        }
        return nullptr;
    };
}

} // namespace

void Runtime::acquire_log(TxContext& ctx)
{
    std::unique_ptr<pmem::PersistentDomain> dom;
    PuddleId id;
    {
        std::lock_guard lock(mu_);
        ensure_log_space_locked();
        auto cap = client_->new_puddle(options_.log_heap, PuddleKind::log);
        id = cap.id;
        pmem::OpenOptions o;
        o.platform = platform_;
        o.label = "log";
        dom = pmem::PersistentDomain::adopt(std::move(cap.backing), std::move(cap.shadow), cap.total_size, o);
        log_space_->add(id, logging::LogRole::head);
        log_puddles_.push_back(id);
    }
    ctx.head_ = std::move(dom);
    ctx.log_ = std::make_unique<logging::Log>(*ctx.head_, resolver_over(ctx.segments_));
    ctx.log_->set_supplier([this, &ctx]() -> std::optional<logging::ChainedSegment> {
        return new_segment(ctx.segments_);
    });
}

void Runtime::register_type(const ReferenceMap& map)
{
    client_->reg_ref_map(map);
    std::lock_guard lock(map_mu_);
    maps_[map.type_id] = map;
}

const ReferenceMap* Runtime::map_for(alloc::TypeId type)
{
    auto it = maps_.find(type);
    if (it == maps_.end()) {
        for (auto& m : client_->list_ref_maps()) {
            maps_[m.type_id] = std::move(m);
        }
        it = maps_.find(type);
    }
    return it == maps_.end() ? nullptr : &it->second;
}

alloc::PuddleHeap& Runtime::heap_at(GlobalSpace::Mapping& m)
{
    std::lock_guard lock(map_mu_);
    auto& h = heaps_[m.id];
    if (!h) {
        h = std::make_unique<alloc::PuddleHeap>(m.domain->data());
    }
    return *h;
}

std::pair<GlobalSpace::Mapping*, pmem::PersistentDomain*> Runtime::writable_target(std::uint64_t addr,
                                                                                  std::size_t len)
{
    auto* m = space_->find(addr);
    if (m == nullptr && space_->in_space(addr)) {
        try {
            resolve(addr);
        } catch (const Error&) {
        }
        m = space_->find(addr);
    }
    if (m == nullptr || m->domain->read_only() || addr + len > m->range.start + m->domain->capacity()) {
        fail(Errc::unwritable_range, "range is not inside a writable mapped puddle");
    }
    return {m, m->domain.get()};
}

Pool& Runtime::create_pool(const std::string& name, std::uint64_t heap)
{
    auto created = client_->create_pool(name, heap == 0 ? options_.pool_heap : heap, options_.mode);
    auto root = created.root.id;
    Pool::Member mem{root, created.root.assigned, created.root.total_size};
    {
        std::lock_guard lock(map_mu_);
        space_->map(std::move(created.root));
        ++stats_.puddles_mapped;
    }
    std::lock_guard lock(mu_);
    auto pool = std::unique_ptr<Pool>(new Pool(*this, created.pool, name, root));
    pool->members_.push_back(mem);
    auto& ref = *pool;
    pools_[created.pool] = std::move(pool);
    return ref;
}

Pool& Runtime::open_pool(const std::string& name)
{
    {
        std::lock_guard lock(mu_);
        for (auto& [id, p] : pools_) {
            if (p->name() == name) {
                return *p;
            }
        }
    }
    auto info = client_->open_pool(name);
    auto pool = std::unique_ptr<Pool>(new Pool(*this, info.pool, name, info.root));
    pool->quarantined_ = info.quarantined;
    {
        std::lock_guard lock(map_mu_);
        for (const auto& m : info.puddles) {
            pool->members_.push_back({m.id, m.assigned, m.total_size});
            if (m.pending) {
                registry_pending_.insert(m.id);
            }
        }
    }
    Pool* ref;
    {
        std::lock_guard lock(mu_);
        ref = pool.get();
        pools_[info.pool] = std::move(pool);
    }
    map_puddle(info.root);
    return *ref;
}

Pool* Runtime::find_pool(const PuddleId& id)
{
    std::lock_guard lock(mu_);
    auto it = pools_.find(id);
    return it == pools_.end() ? nullptr : it->second.get();
}

void* Runtime::resolve(std::uint64_t addr)
{
    if (space_->find(addr) != nullptr) {
        return reinterpret_cast<void*>(addr);
    }
    std::lock_guard lock(map_mu_);
    if (space_->find(addr) == nullptr) {
        auto info = client_->lookup_addr(addr);
        if (info.pending) {
            registry_pending_.insert(info.id);
        }
        map_puddle(info.id);
    }
    return reinterpret_cast<void*>(addr);
}

GlobalSpace::Mapping& Runtime::map_puddle(const PuddleId& id)
{
    if (auto* m = space_->get(id)) {
        return *m;
    }
    std::lock_guard lock(map_mu_);
    if (auto* m = space_->get(id)) {
        return *m;
    }
    auto cap = client_->exist_puddle(id, true);
    std::uint32_t flags = 0;
    if (::pread(cap.backing.get(), &flags, sizeof(flags), hdr::flags) != sizeof(flags)) {
        fail(Errc::io_failure, "cannot read puddle header");
    }
    if ((flags & kRelocPending) != 0) {
        auto info = client_->reloc_info(id);
        rewrite(cap, info);
    } else if (registry_pending_.erase(id) != 0) {
        // Rewritten before a crash that beat the daemon notification.
        client_->mark_relocated(id);
    }
    auto& m = space_->map(std::move(cap));
    ++stats_.puddles_mapped;
    return m;
}

// Rewrites the references of a relocated puddle in a private mapping under
// the relocation undo log, so a crash leaves either the original or the
// fully rewritten image.  Translation per group member Z:
//   new = assigned(Z) + (old - origin(Z))  for old in [origin(Z), origin(Z) + size(Z))
void Runtime::rewrite(Capability& cap, const RelocInfo& info)
{
    auto t0 = std::chrono::steady_clock::now();
    if (!cap.writable) {
        fail(Errc::permission_denied, "relocating a puddle needs write access");
    }
    std::map<std::uint64_t, const RelocInfo::Member*> by_origin;
    for (const auto& g : info.group) {
        by_origin[g.origin] = &g;
    }
    auto translate = [&](std::uint64_t v) -> std::optional<std::uint64_t> {
        auto it = by_origin.upper_bound(v);
        if (it == by_origin.begin()) {
            return std::nullopt;
        }
        --it;
        const auto& g = *it->second;
        if (v - g.origin >= g.total_size) {
            return std::nullopt;
        }
        return g.assigned + (v - g.origin);
    };

    pmem::OpenOptions o;
    o.platform = platform_;
    o.label = "relocate";
    auto tmp = pmem::PersistentDomain::adopt(cap.backing.dup(), cap.shadow.dup(), cap.total_size, o);
    alloc::PuddleHeap heap(tmp->data());
    const auto base = cap.assigned;
    auto objects = heap.objects();

    // Every typed object needs a map before anything is written.
    std::vector<const ReferenceMap*> maps(objects.size(), nullptr);
    for (std::size_t i = 0; i < objects.size(); ++i) {
        if (objects[i].type_id == alloc::kRawType) {
            continue;
        }
        maps[i] = map_for(objects[i].type_id);
        if (maps[i] == nullptr) {
            fail(Errc::unknown_type, "no reference map registered for an object's type");
        }
    }

    if (!reloc_log_) {
        std::lock_guard lock(mu_);
        ensure_log_space_locked();
        auto lc = client_->new_puddle(options_.log_heap, PuddleKind::log);
        auto lid = lc.id;
        pmem::OpenOptions lo;
        lo.platform = platform_;
        lo.label = "reloc-log";
        reloc_dom_ = pmem::PersistentDomain::adopt(std::move(lc.backing), std::move(lc.shadow), lc.total_size, lo);
        log_space_->add(lid, logging::LogRole::head);
        log_puddles_.push_back(lid);
        reloc_log_ = std::make_unique<logging::Log>(*reloc_dom_, resolver_over(reloc_segments_));
        reloc_log_->set_supplier([this]() -> std::optional<logging::ChainedSegment> {
            // Called with map_mu_ held; new_segment takes only mu_.
            return new_segment(reloc_segments_);
        });
    }
    auto& log = *reloc_log_;
    log.set_range(0, 2);

    struct Change {
        std::size_t off;
        std::uint64_t value;
    };
    std::vector<Change> changes;
    std::vector<Bytes> olds;
    std::vector<logging::Log::Pending> pending;
    std::uint64_t visited = 0;
    auto flush_batch = [&] {
        if (pending.empty()) {
            return;
        }
        log.append_batch(pending);
        stats_.slots_rewritten += changes.size();
        for (const auto& c : changes) {
            put(tmp->data() + c.off, c.value);
        }
        for (const auto& p : pending) {
            tmp->flush(p.target - base, p.payload.size());
        }
        changes.clear();
        pending.clear();
        olds.clear();
    };
    olds.reserve(kRelocBatch);
    for (std::size_t i = 0; i < objects.size(); ++i) {
        if (maps[i] == nullptr) {
            continue;
        }
        const auto& obj = objects[i];
        const auto obj_off = obj.addr - addr_of(tmp->data());
        std::size_t first = SIZE_MAX;
        std::size_t last = 0;
        for (const auto& slot : maps[i]->slots) {
            if (slot.offset + 8 > obj.size) {
                break;
            }
            ++visited;
            auto v = load<std::uint64_t>(tmp->data() + obj_off + slot.offset);
            auto nv = translate(v);
            if (nv && *nv != v) {
                changes.push_back({obj_off + slot.offset, *nv});
                first = std::min<std::size_t>(first, slot.offset);
                last = std::max<std::size_t>(last, slot.offset + 8);
            }
        }
        if (first != SIZE_MAX) {
            auto* p = tmp->data() + obj_off + first;
            olds.emplace_back(p, p + (last - first));
            pending.push_back({base + obj_off + first, olds.back(), logging::kUndoSeq, logging::kBackward});
            if (pending.size() == kRelocBatch) {
                flush_batch();
            }
        }
        ++stats_.objects_visited;
    }
    flush_batch();
    tmp->fence();

    // Leaving the frontier is part of the same undo scope.
    auto flags = HeaderView(tmp->data()).flags();
    Bytes old_flags(4);
    put(old_flags.data(), flags);
    log.append(base + hdr::flags, old_flags, logging::kUndoSeq, logging::kBackward);
    tmp->store_value<std::uint32_t>(hdr::flags, flags & ~std::uint32_t{kRelocPending});
    tmp->persist(hdr::flags, 4);
    log.set_range(4, 4);
    log.reset();
    tmp.reset();
    client_->mark_relocated(cap.id);
    registry_pending_.erase(cap.id);

    stats_.slots_visited += visited;
    ++stats_.puddles_rewritten;
    stats_.rewrite_ns += static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0).count());
}

RelocStats Runtime::reloc_stats() const
{
    auto& self = const_cast<Runtime&>(*this);
    std::lock_guard lock(self.map_mu_);
    auto s = stats_;
    s.faults = faults_.load();
    return s;
}

void Runtime::reset_reloc_stats()
{
    std::lock_guard lock(map_mu_);
    stats_ = {};
    faults_ = 0;
}

bool Runtime::handle_fault(std::uint64_t addr) noexcept
{
    try {
        resolve(addr);
        return space_->find(addr) != nullptr;
    } catch (...) {
        return false;
    }
}

// Synchronous fault on an unmapped part of the global range: map the owning
// puddle (relocating it first if needed) and retry the access.  Anything
// else is handed back to the previous disposition.
void Runtime::on_fault(int sig, siginfo_t* info, void* uctx)
{
    auto* rt = g_fault_rt.load();
    auto addr = addr_of(info->si_addr);
    if (rt != nullptr && rt->space_->in_space(addr) && rt->space_->find(addr) == nullptr &&
        rt->handle_fault(addr)) {
        rt->faults_.fetch_add(1, std::memory_order_relaxed);
        return;
    }
    auto& prev = sig == SIGBUS ? g_prev_bus : g_prev_segv;
    if ((prev.sa_flags & SA_SIGINFO) != 0 && prev.sa_sigaction != nullptr) {
        prev.sa_sigaction(sig, info, uctx);
        return;
    }
    ::sigaction(sig, &prev, nullptr);
}

// ---------------------------------------------------------------------------

namespace {

TxContext& current_tx()
{
    auto* rt = Runtime::current();
    if (rt == nullptr) {
        fail(Errc::not_in_tx, "no runtime in this process");
    }
    return rt->tx();
}

} // namespace

void tx_begin()
{
    current_tx().begin();
}

void tx_add(const void* addr, std::size_t len)
{
    current_tx().add(addr, len);
}

void tx_add_volatile(void* addr, std::size_t len)
{
    current_tx().add_volatile(addr, len);
}

void tx_redo_set(void* addr, ByteSpan payload)
{
    current_tx().redo_set(addr, payload);
}

void tx_commit()
{
    current_tx().commit();
}

void tx_abort()
{
    current_tx().abort();
}

} // namespace puddle
