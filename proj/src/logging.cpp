#include "puddle/logging.hpp"

#include <algorithm>
#include <cstring>
#include <set>

#include "puddle/crc32c.hpp"

namespace puddle::logging {

std::uint32_t entry_checksum(std::uint64_t target, std::uint32_t size, std::uint32_t seq,
                             std::uint32_t flags, ByteSpan payload) noexcept
{
    std::byte head[20];
    put(head + ent::target, target);
    put(head + ent::size, size);
    put(head + ent::seq, seq);
    put(head + ent::flags, flags);
    return crc32c({ByteSpan(head, sizeof head), payload});
}

bool LogEntry::checksum_ok() const noexcept
{
    return payload.size() == size &&
           entry_checksum(target, size, seq, flags, payload) == stored_checksum;
}

bool entry_valid(const LogEntry& entry, SeqRange range) noexcept
{
    return range.admits(entry.seq) && entry.checksum_ok();
}

namespace {

std::uint64_t entry_span(std::uint64_t payload) noexcept
{
    return kEntryHeader + align_up(payload, 8);
}

std::size_t heap_of(const pmem::PersistentDomain& d) noexcept
{
    return HeaderView(d.data()).header_size();
}

} // namespace

void format_segment(pmem::PersistentDomain& domain, std::uint32_t index)
{
    HeaderView h(domain.data());
    auto heap = h.header_size();
    if (h.heap_size() <= kSegmentHeader) {
        fail(Errc::bad_size, "log puddle too small");
    }
    std::byte s[kSegmentHeader] = {};
    put(s + seg::magic, kSegmentMagic);
    put(s + seg::seq_range, SeqRange{4, 4}.pack());
    put<std::uint64_t>(s + seg::next_free, 0);
    put(s + seg::last_entry, kNoEntry);
    put<std::uint64_t>(s + seg::max_size, h.heap_size() - kSegmentHeader);
    put(s + seg::index, index);
    domain.store(heap, ByteSpan(s, sizeof s));
    domain.persist(heap, sizeof s);
}

bool is_segment(const pmem::PersistentDomain& domain) noexcept
{
    HeaderView h(domain.data());
    if (!h.valid_magic() || h.total_size() != domain.capacity() ||
        h.header_size() + kSegmentHeader > domain.capacity()) {
        return false;
    }
    const auto* s = domain.data() + h.header_size();
    return load<std::uint64_t>(s + seg::magic) == kSegmentMagic &&
           load<std::uint64_t>(s + seg::max_size) == h.heap_size() - kSegmentHeader;
}

// ---------------------------------------------------------------------------
// Log

Log::Log(pmem::PersistentDomain& head, SegmentResolver resolve) : resolve_(std::move(resolve))
{
    segments_.push_back(&head);
    reload();
}

std::size_t Log::heap_offset(std::size_t i) const
{
    return heap_of(*segments_[i]);
}

std::byte* Log::seg_base(std::size_t i) const
{
    return segments_[i]->data() + heap_offset(i);
}

std::uint64_t Log::seg_u64(std::size_t i, std::size_t field) const
{
    return load<std::uint64_t>(seg_base(i) + field);
}

void Log::reload()
{
    segments_.resize(1);
    chain_ids_.clear();
    if (!is_segment(*segments_[0])) {
        fail(Errc::corrupt_log, "head is not a log segment");
    }
    std::set<PuddleId> seen{HeaderView(segments_[0]->data()).uuid()};
    for (;;) {
        PuddleId next;
        std::memcpy(next.bytes.data(), seg_base(segments_.size() - 1) + seg::continuation, 16);
        if (next.nil()) {
            break;
        }
        if (!seen.insert(next).second) {
            fail(Errc::corrupt_log, "log chain loops");
        }
        auto* d = resolve_ ? resolve_(next) : nullptr;
        if (d == nullptr || !is_segment(*d)) {
            fail(Errc::corrupt_log, "chained segment " + next.hex() + " is unavailable");
        }
        segments_.push_back(d);
        chain_ids_.push_back(next);
    }
    cur_ = 0;
    for (std::size_t i = 0; i < segments_.size(); ++i) {
        if (seg_u64(i, seg::next_free) > 0) {
            cur_ = i;
        }
    }
}

SeqRange Log::range() const noexcept
{
    return SeqRange::unpack(seg_u64(0, seg::seq_range));
}

void Log::set_range(SeqRange r)
{
    if (r.lo > r.hi) {
        fail(Errc::invalid_range, "sequence range lo > hi");
    }
    auto off = heap_offset(0) + seg::seq_range;
    segments_[0]->store_value(off, r.pack());
    segments_[0]->persist(off, 8);
}

bool Log::empty() const noexcept
{
    for (std::size_t i = 0; i < segments_.size(); ++i) {
        if (seg_u64(i, seg::next_free) != 0) {
            return false;
        }
    }
    return true;
}

void Log::reset()
{
    for (std::size_t i = 0; i < segments_.size(); ++i) {
        if (seg_u64(i, seg::next_free) == 0) {
            continue;
        }
        std::byte v[16];
        put<std::uint64_t>(v, 0);
        put(v + 8, kNoEntry);
        auto off = heap_offset(i) + seg::next_free;
        segments_[i]->store(off, ByteSpan(v, sizeof v));
        segments_[i]->persist(off, sizeof v);
    }
    cur_ = 0;
}

void Log::chain(const ChainedSegment& next)
{
    if (next.domain == nullptr) {
        fail(Errc::puddle_not_owned, "no segment to chain");
    }
    for (auto* d : segments_) {
        if (d == next.domain) {
            fail(Errc::invalid_range, "segment already in this chain");
        }
    }
    format_segment(*next.domain, static_cast<std::uint32_t>(segments_.size()));
    auto tail = segments_.size() - 1;
    auto off = heap_offset(tail) + seg::continuation;
    segments_[tail]->store(off, ByteSpan(reinterpret_cast<const std::byte*>(next.id.bytes.data()), 16));
    segments_[tail]->persist(off, 16);
    segments_.push_back(next.domain);
    chain_ids_.push_back(next.id);
}

void Log::ensure_room(std::size_t bytes)
{
    for (;;) {
        auto used = seg_u64(cur_, seg::next_free);
        auto max = seg_u64(cur_, seg::max_size);
        if (used + bytes <= max) {
            return;
        }
        if (bytes > max && used == 0) {
            fail(Errc::log_full, "entry larger than a log segment");
        }
        if (cur_ + 1 < segments_.size()) {
            ++cur_;
            continue;
        }
        std::optional<ChainedSegment> next;
        if (supply_) {
            next = supply_();
        }
        if (!next) {
            fail(Errc::log_full, "log is full and no segment could be chained");
        }
        chain(*next);
        ++cur_;
    }
}

EntryLocator Log::append(std::uint64_t target, ByteSpan payload, std::uint32_t seq,
                         std::uint32_t flags)
{
    Pending p{target, payload, seq, flags};
    append_batch(std::span(&p, 1));
    return {static_cast<std::uint32_t>(cur_), seg_u64(cur_, seg::last_entry)};
}

void Log::append_batch(std::span<const Pending> entries)
{
    for (const auto& e : entries) {
        if (e.payload.empty() || e.payload.size() > UINT32_MAX) {
            fail(Errc::bad_target, "log entry payload must be non-empty");
        }
    }
    std::size_t i = 0;
    while (i < entries.size()) {
        ensure_room(entry_span(entries[i].payload.size()));
        auto s = cur_;
        auto& d = *segments_[s];
        auto area = heap_offset(s) + kSegmentHeader;
        auto next_free = seg_u64(s, seg::next_free);
        auto max = seg_u64(s, seg::max_size);
        auto first = next_free;
        auto last = kNoEntry;
        Bytes buf;
        // Pack as many entries as fit into this segment, then persist once.
        while (i < entries.size() && next_free + entry_span(entries[i].payload.size()) <= max) {
            const auto& e = entries[i];
            auto size = static_cast<std::uint32_t>(e.payload.size());
            auto start = buf.size();
            buf.resize(start + entry_span(size));
            auto* h = buf.data() + start;
            put(h + ent::target, e.target);
            put(h + ent::size, size);
            put(h + ent::seq, e.seq);
            put(h + ent::flags, e.flags);
            put(h + ent::checksum, entry_checksum(e.target, size, e.seq, e.flags, e.payload));
            std::memcpy(h + kEntryHeader, e.payload.data(), size);
            last = next_free;
            next_free += entry_span(size);
            ++i;
        }
        d.store(area + first, buf);
        d.flush(area + first, buf.size());
        d.fence();

        std::byte v[16];
        put(v, next_free);
        put(v + 8, last);
        auto off = heap_offset(s) + seg::next_free;
        d.store(off, ByteSpan(v, sizeof v));
        d.persist(off, sizeof v);
    }
}

std::vector<LogEntry> Log::entries() const
{
    std::vector<LogEntry> out;
    for (std::size_t s = 0; s < segments_.size(); ++s) {
        auto next_free = seg_u64(s, seg::next_free);
        auto max = seg_u64(s, seg::max_size);
        if (next_free > max) {
            fail(Errc::corrupt_log, "next_free beyond segment end");
        }
        const auto* area = seg_base(s) + kSegmentHeader;
        std::uint64_t o = 0;
        while (o < next_free) {
            if (next_free - o < kEntryHeader) {
                fail(Errc::corrupt_log, "truncated entry header");
            }
            const auto* h = area + o;
            LogEntry e;
            e.at = {static_cast<std::uint32_t>(s), o};
            e.target = load<std::uint64_t>(h + ent::target);
            e.size = load<std::uint32_t>(h + ent::size);
            e.seq = load<std::uint32_t>(h + ent::seq);
            e.flags = load<std::uint32_t>(h + ent::flags);
            e.stored_checksum = load<std::uint32_t>(h + ent::checksum);
            if (entry_span(e.size) > next_free - o) {
                fail(Errc::corrupt_log, "entry runs past next_free");
            }
            e.payload = ByteSpan(h + kEntryHeader, e.size);
            out.push_back(e);
            o += entry_span(e.size);
        }
    }
    return out;
}

LogStats Log::stats() const
{
    LogStats st;
    st.segments = segments_.size();
    for (std::size_t s = 0; s < segments_.size(); ++s) {
        st.bytes += seg_u64(s, seg::next_free);
    }
    st.entries = entries().size();
    return st;
}

std::size_t replay_log(const Log& log, const TargetResolver& resolve, ReplayOptions options)
{
    auto range = log.range();
    auto all = log.entries();

    struct Apply {
        const LogEntry* entry;
        ReplayTarget target;
    };
    std::vector<Apply> backward;
    std::vector<Apply> forward;
    for (const auto& e : all) {
        bool ok = e.checksum_ok();
        if (!ok && options.strict) {
            fail(Errc::corrupt_log, "checksum mismatch below next_free");
        }
        if (!ok || !range.admits(e.seq)) {
            continue;
        }
        if (e.volatile_target() && options.skip_volatile) {
            continue;
        }
        auto t = resolve(e.target, e.size);
        if (!t || t->domain == nullptr) {
            fail(Errc::unwritable_range, "log targets a range the owner cannot write");
        }
        (e.backward() ? backward : forward).push_back({&e, *t});
    }

    std::vector<pmem::PersistentDomain*> touched;
    auto apply = [&](const Apply& a) {
        a.target.domain->store(a.target.offset, a.entry->payload);
        a.target.domain->flush(a.target.offset, a.entry->size);
        if (std::find(touched.begin(), touched.end(), a.target.domain) == touched.end()) {
            touched.push_back(a.target.domain);
        }
    };
    for (auto it = backward.rbegin(); it != backward.rend(); ++it) {
        apply(*it);
    }
    for (const auto& a : forward) {
        apply(a);
    }
    for (auto* d : touched) {
        d->fence();
    }
    return backward.size() + forward.size();
}

// ---------------------------------------------------------------------------
// LogSpace

namespace {
constexpr std::size_t kSpaceMagic = 0;
constexpr std::size_t kSpaceCount = 8;
constexpr std::size_t kSpaceEntries = 32;
constexpr std::size_t kSlotUuid = 0;
constexpr std::size_t kSlotStatus = 16;
constexpr std::size_t kSlotRole = 20;
} // namespace

LogSpace::LogSpace(pmem::PersistentDomain& domain) : d_(domain)
{
    if (!is_log_space(domain)) {
        fail(Errc::corrupt_log, "not a log space puddle");
    }
}

void LogSpace::format(pmem::PersistentDomain& domain)
{
    auto base = heap_of(domain);
    std::byte h[16] = {};
    put(h + kSpaceMagic, kLogSpaceMagic);
    domain.store(base, ByteSpan(h, sizeof h));
    domain.persist(base, sizeof h);
}

bool LogSpace::is_log_space(const pmem::PersistentDomain& domain) noexcept
{
    HeaderView h(domain.data());
    if (!h.valid_magic() || h.total_size() != domain.capacity()) {
        return false;
    }
    return load<std::uint64_t>(domain.data() + h.header_size() + kSpaceMagic) == kLogSpaceMagic;
}

std::size_t LogSpace::base() const
{
    return heap_of(d_);
}

std::size_t LogSpace::capacity() const noexcept
{
    return (HeaderView(d_.data()).heap_size() - kSpaceEntries) / kLogSpaceEntry;
}

std::vector<LogSpaceEntry> LogSpace::entries() const
{
    auto count = load<std::uint64_t>(d_.data() + base() + kSpaceCount);
    if (count > capacity()) {
        fail(Errc::corrupt_log, "log space count exceeds capacity");
    }
    std::vector<LogSpaceEntry> out;
    for (std::size_t i = 0; i < count; ++i) {
        const auto* p = d_.data() + base() + kSpaceEntries + i * kLogSpaceEntry;
        LogSpaceEntry e;
        e.slot = i;
        std::memcpy(e.id.bytes.data(), p + kSlotUuid, 16);
        e.status = static_cast<LogStatus>(load<std::uint32_t>(p + kSlotStatus));
        e.role = static_cast<LogRole>(load<std::uint32_t>(p + kSlotRole));
        out.push_back(e);
    }
    return out;
}

std::optional<LogSpaceEntry> LogSpace::find(const PuddleId& id) const
{
    for (const auto& e : entries()) {
        if (e.id == id && e.status != LogStatus::dropped) {
            return e;
        }
    }
    return std::nullopt;
}

std::size_t LogSpace::add(const PuddleId& id, LogRole role)
{
    auto all = entries();
    std::size_t slot = all.size();
    for (const auto& e : all) {
        if (e.status == LogStatus::dropped) {
            slot = e.slot;
            break;
        }
    }
    if (slot >= capacity()) {
        fail(Errc::log_full, "log space is full");
    }
    auto off = base() + kSpaceEntries + slot * kLogSpaceEntry;
    std::byte rec[kLogSpaceEntry] = {};
    std::memcpy(rec + kSlotUuid, id.bytes.data(), 16);
    put(rec + kSlotStatus, static_cast<std::uint32_t>(LogStatus::dropped));
    put(rec + kSlotRole, static_cast<std::uint32_t>(role));
    d_.store(off, ByteSpan(rec, sizeof rec));
    d_.persist(off, sizeof rec);
    if (slot == all.size()) {
        d_.store_value<std::uint64_t>(base() + kSpaceCount, slot + 1);
        d_.persist(base() + kSpaceCount, 8);
    }
    set_status(slot, LogStatus::active);
    return slot;
}

void LogSpace::set_status(std::size_t slot, LogStatus status)
{
    auto off = base() + kSpaceEntries + slot * kLogSpaceEntry + kSlotStatus;
    d_.store_value(off, static_cast<std::uint32_t>(status));
    d_.persist(off, 4);
}

void chain_log_puddle(Log& log, const LogSpace& space, const ChainedSegment& next)
{
    auto e = space.find(next.id);
    if (!e || e->status != LogStatus::active) {
        fail(Errc::puddle_not_owned, "segment " + next.id.hex() + " is not in the caller's log space");
    }
    log.chain(next);
}

} // namespace puddle::logging
