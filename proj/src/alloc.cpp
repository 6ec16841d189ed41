#include "puddle/alloc.hpp"

#include <bit>
#include <cstring>

namespace puddle::alloc {

HeapGeometry geometry_for(std::uint64_t heap_size)
{
    HeapGeometry g;
    auto data = heap_size * 16 / 17 / kUnit * kUnit;
    g.data_units = data / kUnit;
    g.table_offset = heap_size - g.data_units * kTableEntry;
    g.max_order = g.data_units == 0 ? 0 : static_cast<std::uint32_t>(std::bit_width(g.data_units) - 1);
    std::uint64_t off = hdr::fixed_end;
    for (std::uint32_t k = 0; k <= g.max_order; ++k) {
        auto blocks = (g.data_units + (1ull << k) - 1) >> k;
        g.bitmap_offset.push_back(off);
        off += (blocks + 63) / 64 * 8;
    }
    g.bitmap_bytes = off - hdr::fixed_end;
    return g;
}

std::optional<std::size_t> slab_class_for(std::size_t size) noexcept
{
    if (size == 0 || size >= kSlabThreshold) {
        return std::nullopt;
    }
    for (std::size_t i = 0; i < std::size(kSlabClasses); ++i) {
        if (size <= kSlabClasses[i]) {
            return i;
        }
    }
    return std::nullopt;
}

std::uint32_t order_for(std::size_t size) noexcept
{
    auto units = (size + kUnit - 1) / kUnit;
    return units <= 1 ? 0 : static_cast<std::uint32_t>(std::bit_width(units - 1));
}

PuddleHeap::PuddleHeap(std::byte* base) : base_(base)
{
    HeaderView h(base);
    header_ = h.header_size();
    geo_ = geometry_for(h.heap_size());
    if (load<std::uint32_t>(base + hdr::data_units) != geo_.data_units ||
        load<std::uint32_t>(base + hdr::max_order) != geo_.max_order) {
        fail(Errc::corrupt_metadata, "allocator geometry does not match the heap");
    }
}

void PuddleHeap::format(pmem::PersistentDomain& domain)
{
    HeaderView h(domain.data());
    auto g = geometry_for(h.heap_size());
    if (g.bitmap_bytes > h.header_size() - hdr::fixed_end) {
        fail(Errc::bad_size, "allocator bitmaps do not fit in the header");
    }
    if (g.data_units == 0) {
        fail(Errc::bad_size, "heap too small for the allocator");
    }
    Bytes meta(hdr::fixed_end + g.bitmap_bytes);
    std::memcpy(meta.data(), domain.data(), hdr::fixed_end);
    put<std::uint32_t>(meta.data() + hdr::data_units, static_cast<std::uint32_t>(g.data_units));
    put<std::uint32_t>(meta.data() + hdr::max_order, g.max_order);
    put<std::uint64_t>(meta.data() + hdr::allocated, 0);
    put<std::uint64_t>(meta.data() + hdrx::slab_bytes, 0);
    put<std::uint64_t>(meta.data() + hdrx::slab_live, 0);
    // Greedy decomposition of the data area into maximal aligned blocks.
    std::uint64_t pos = 0;
    while (pos < g.data_units) {
        std::uint32_t k = g.max_order;
        while (k > 0 && (pos % (1ull << k) != 0 || pos + (1ull << k) > g.data_units)) {
            --k;
        }
        auto bit = pos >> k;
        auto* word = meta.data() + g.bitmap_offset[k] + bit / 64 * 8;
        put<std::uint64_t>(word, load<std::uint64_t>(word) | (1ull << (bit % 64)));
        pos += 1ull << k;
    }
    domain.store(0, meta);
    domain.persist(0, meta.size());
}

std::byte* PuddleHeap::table(std::uint64_t unit) const noexcept
{
    return base_ + header_ + geo_.table_offset + unit * kTableEntry;
}

PuddleHeap::Entry PuddleHeap::entry(std::uint64_t unit) const noexcept
{
    return load<Entry>(table(unit));
}

void PuddleHeap::set_entry(std::uint64_t unit, const Entry& e, MutationSink& sink)
{
    sink.before_write(table(unit), kTableEntry);
    put(table(unit), e);
}

std::uint64_t* PuddleHeap::bitmap_word(std::uint32_t order, std::uint64_t block) const noexcept
{
    return reinterpret_cast<std::uint64_t*>(base_ + geo_.bitmap_offset[order] + block / 64 * 8);
}

bool PuddleHeap::is_free(std::uint32_t order, std::uint64_t unit) const noexcept
{
    auto block = unit >> order;
    return (*bitmap_word(order, block) >> (block % 64) & 1) != 0;
}

void PuddleHeap::set_free(std::uint32_t order, std::uint64_t unit, bool free, MutationSink& sink)
{
    auto block = unit >> order;
    auto* w = bitmap_word(order, block);
    sink.before_write(w, 8);
    if (free) {
        *w |= 1ull << (block % 64);
    } else {
        *w &= ~(1ull << (block % 64));
    }
}

std::uint64_t PuddleHeap::counter(std::size_t field) const noexcept
{
    return load<std::uint64_t>(base_ + field);
}

void PuddleHeap::add_counter(std::size_t field, std::int64_t delta, MutationSink& sink)
{
    sink.before_write(base_ + field, 8);
    put<std::uint64_t>(base_ + field, counter(field) + static_cast<std::uint64_t>(delta));
}

std::optional<std::uint64_t> PuddleHeap::buddy_alloc(std::uint32_t order, MutationSink& sink)
{
    // Address-ordered: the lowest free block of any sufficient order.
    std::optional<std::uint64_t> best;
    std::uint32_t best_order = 0;
    for (auto k = order; k <= geo_.max_order; ++k) {
        auto blocks = (geo_.data_units + (1ull << k) - 1) >> k;
        auto words = (blocks + 63) / 64;
        const auto* bm = reinterpret_cast<const std::uint64_t*>(base_ + geo_.bitmap_offset[k]);
        for (std::uint64_t w = 0; w < words; ++w) {
            if (bm[w] == 0) {
                continue;
            }
            auto unit = (w * 64 + static_cast<std::uint64_t>(std::countr_zero(bm[w]))) << k;
            if (!best || unit < *best) {
                best = unit;
                best_order = k;
            }
            break;
        }
    }
    if (!best) {
        return std::nullopt;
    }
    auto unit = *best;
    auto k = best_order;
    set_free(k, unit, false, sink);
    // Split, keeping the low half.
    while (k > order) {
        --k;
        set_free(k, unit + (1ull << k), true, sink);
    }
    return unit;
}

void PuddleHeap::buddy_free(std::uint64_t unit, std::uint32_t order, MutationSink& sink)
{
    while (order < geo_.max_order) {
        auto buddy = unit ^ (1ull << order);
        if (buddy + (1ull << order) > geo_.data_units || !is_free(order, buddy)) {
            break;
        }
        set_free(order, buddy, false, sink);
        unit = std::min<std::uint64_t>(unit, buddy);
        ++order;
    }
    set_free(order, unit, true, sink);
}

bool PuddleHeap::inside_free_block(std::uint64_t unit) const noexcept
{
    for (std::uint32_t k = 0; k <= geo_.max_order; ++k) {
        auto start = unit >> k << k;
        if (start + (1ull << k) <= geo_.data_units && is_free(k, start)) {
            return true;
        }
    }
    return false;
}

std::byte* PuddleHeap::slab_bitmap(std::uint64_t page_unit) const noexcept
{
    return table(page_unit + 1);
}

void PuddleHeap::rebuild_cache() const
{
    partial_.clear();
    for (std::uint64_t u = 0; u < geo_.data_units;) {
        auto e = entry(u);
        if (e.state == UnitState::slab) {
            const auto* bm = slab_bitmap(u);
            auto slots = slab_slots(e.slab_class);
            for (std::size_t s = 0; s < slots; ++s) {
                if ((static_cast<std::uint8_t>(bm[s / 8]) >> (s % 8) & 1) == 0) {
                    partial_[{e.type_id, e.slab_class}].insert(u);
                    break;
                }
            }
            u += 1ull << kSlabOrder;
        } else if (e.state == UnitState::alloc) {
            u += 1ull << e.order;
        } else {
            ++u;
        }
    }
    cache_valid_ = true;
}

std::optional<std::uint64_t> PuddleHeap::alloc(std::size_t size, TypeId type, MutationSink& sink)
{
    if (size == 0) {
        fail(Errc::bad_size, "allocation size must be positive");
    }
    if (auto cls = slab_class_for(size)) {
        if (!cache_valid_) {
            rebuild_cache();
        }
        auto& pages = partial_[{type, *cls}];
        std::uint64_t page;
        if (pages.empty()) {
            auto fresh = buddy_alloc(kSlabOrder, sink);
            if (!fresh) {
                return std::nullopt;
            }
            page = *fresh;
            set_entry(page, {UnitState::slab, static_cast<std::uint8_t>(kSlabOrder),
                             static_cast<std::uint16_t>(*cls), 0, type},
                      sink);
            add_counter(hdrx::slab_bytes, kSlabPage, sink);
            pages.insert(page);
        } else {
            page = *pages.begin();
        }
        auto* bm = slab_bitmap(page);
        auto slots = slab_slots(*cls);
        std::size_t slot = slots;
        for (std::size_t s = 0; s < slots; ++s) {
            if ((static_cast<std::uint8_t>(bm[s / 8]) >> (s % 8) & 1) == 0) {
                slot = s;
                break;
            }
        }
        if (slot == slots) {
            fail(Errc::corrupt_metadata, "cached slab page has no free slot");
        }
        auto* word = bm + slot / 64 * 8;
        sink.before_write(word, 8);
        bm[slot / 8] |= std::byte(1u << (slot % 8));
        bool full = true;
        for (std::size_t s = slot + 1; s < slots && full; ++s) {
            full = (static_cast<std::uint8_t>(bm[s / 8]) >> (s % 8) & 1) != 0;
        }
        if (full) {
            pages.erase(page);
        }
        auto cls_size = kSlabClasses[*cls];
        add_counter(hdr::allocated, static_cast<std::int64_t>(cls_size), sink);
        add_counter(hdrx::slab_live, static_cast<std::int64_t>(cls_size), sink);
        auto off = page * kUnit + slot * cls_size;
        auto* obj = base_ + header_ + off;
        std::memset(obj, 0, cls_size);
        sink.fresh(obj, cls_size);
        return off;
    }

    auto order = order_for(size);
    if (order > geo_.max_order) {
        return std::nullopt;
    }
    auto unit = buddy_alloc(order, sink);
    if (!unit) {
        return std::nullopt;
    }
    set_entry(*unit, {UnitState::alloc, static_cast<std::uint8_t>(order), 0, 0, type}, sink);
    auto bytes = kUnit << order;
    add_counter(hdr::allocated, static_cast<std::int64_t>(bytes), sink);
    auto* obj = base_ + header_ + *unit * kUnit;
    std::memset(obj, 0, bytes);
    sink.fresh(obj, bytes);
    return *unit * kUnit;
}

void PuddleHeap::free(std::uint64_t off, MutationSink& sink)
{
    if (off >= data_bytes()) {
        fail(Errc::invalid_address, "address is outside the heap's data area");
    }
    auto unit = off / kUnit;
    auto page = unit >> kSlabOrder << kSlabOrder;
    auto pe = entry(page);
    if (pe.state == UnitState::slab) {
        auto cls_size = kSlabClasses[pe.slab_class];
        auto within = off - page * kUnit;
        if (within % cls_size != 0) {
            fail(Errc::invalid_address, "address is not the start of a slab object");
        }
        auto slot = within / cls_size;
        auto* bm = slab_bitmap(page);
        if ((static_cast<std::uint8_t>(bm[slot / 8]) >> (slot % 8) & 1) == 0) {
            fail(Errc::double_free, "slab object is already free");
        }
        sink.before_write(bm + slot / 64 * 8, 8);
        bm[slot / 8] &= ~std::byte(1u << (slot % 8));
        add_counter(hdr::allocated, -static_cast<std::int64_t>(cls_size), sink);
        add_counter(hdrx::slab_live, -static_cast<std::int64_t>(cls_size), sink);
        bool empty = true;
        for (std::size_t s = 0; s < slab_slots(pe.slab_class) / 8 && empty; ++s) {
            empty = bm[s] == std::byte{0};
        }
        if (cache_valid_) {
            auto& pages = partial_[{pe.type_id, pe.slab_class}];
            if (empty) {
                pages.erase(page);
            } else {
                pages.insert(page);
            }
        }
        if (empty) {
            set_entry(page, {}, sink);
            add_counter(hdrx::slab_bytes, -static_cast<std::int64_t>(kSlabPage), sink);
            buddy_free(page, kSlabOrder, sink);
        }
        return;
    }
    if (off % kUnit == 0) {
        auto e = entry(unit);
        if (e.state == UnitState::alloc) {
            set_entry(unit, {}, sink);
            add_counter(hdr::allocated, -static_cast<std::int64_t>(kUnit << e.order), sink);
            buddy_free(unit, e.order, sink);
            return;
        }
        if (e.state == UnitState::none && inside_free_block(unit)) {
            fail(Errc::double_free, "block is already free");
        }
    }
    fail(Errc::invalid_address, "address does not name a live object");
}

bool PuddleHeap::owns(const void* p) const noexcept
{
    auto* b = static_cast<const std::byte*>(p);
    return b >= base_ + header_ && b < base_ + header_ + data_bytes();
}

std::vector<ObjectDescriptor> PuddleHeap::objects() const
{
    std::vector<ObjectDescriptor> out;
    auto base = reinterpret_cast<std::uint64_t>(base_) + header_;
    for (std::uint64_t u = 0; u < geo_.data_units;) {
        auto e = entry(u);
        switch (e.state) {
        case UnitState::none:
            ++u;
            break;
        case UnitState::alloc: {
            if (e.order > geo_.max_order || u % (1ull << e.order) != 0 ||
                u + (1ull << e.order) > geo_.data_units) {
                fail(Errc::corrupt_metadata, "bad buddy block in side table");
            }
            out.push_back({base + u * kUnit, kUnit << e.order, e.type_id});
            u += 1ull << e.order;
            break;
        }
        case UnitState::slab: {
            if (e.order != kSlabOrder || e.slab_class >= std::size(kSlabClasses) ||
                u % (1ull << kSlabOrder) != 0 || u + (1ull << kSlabOrder) > geo_.data_units) {
                fail(Errc::corrupt_metadata, "bad slab page in side table");
            }
            const auto* bm = slab_bitmap(u);
            auto cls_size = kSlabClasses[e.slab_class];
            for (std::size_t s = 0; s < slab_slots(e.slab_class); ++s) {
                if ((static_cast<std::uint8_t>(bm[s / 8]) >> (s % 8) & 1) != 0) {
                    out.push_back({base + u * kUnit + s * cls_size, cls_size, e.type_id});
                }
            }
            u += 1ull << kSlabOrder;
            break;
        }
        default:
            fail(Errc::corrupt_metadata, "unknown unit state in side table");
        }
    }
    return out;
}

std::optional<ObjectDescriptor> PuddleHeap::object_at(std::uint64_t off) const
{
    if (off >= data_bytes()) {
        return std::nullopt;
    }
    auto base = reinterpret_cast<std::uint64_t>(base_) + header_;
    auto unit = off / kUnit;
    auto page = unit >> kSlabOrder << kSlabOrder;
    auto pe = entry(page);
    if (pe.state == UnitState::slab) {
        auto cls_size = kSlabClasses[pe.slab_class];
        auto within = off - page * kUnit;
        auto slot = within / cls_size;
        if (within % cls_size != 0 ||
            (static_cast<std::uint8_t>(slab_bitmap(page)[slot / 8]) >> (slot % 8) & 1) == 0) {
            return std::nullopt;
        }
        return ObjectDescriptor{base + off, cls_size, pe.type_id};
    }
    auto e = entry(unit);
    if (off % kUnit == 0 && e.state == UnitState::alloc) {
        return ObjectDescriptor{base + off, kUnit << e.order, e.type_id};
    }
    return std::nullopt;
}

HeapStats PuddleHeap::stats() const
{
    HeapStats s;
    s.heap = HeaderView(base_).heap_size();
    std::uint64_t buddy_free_units = 0;
    for (std::uint32_t k = 0; k <= geo_.max_order; ++k) {
        auto blocks = (geo_.data_units + (1ull << k) - 1) >> k;
        const auto* bm = reinterpret_cast<const std::uint64_t*>(base_ + geo_.bitmap_offset[k]);
        for (std::uint64_t w = 0; w < (blocks + 63) / 64; ++w) {
            buddy_free_units += static_cast<std::uint64_t>(std::popcount(bm[w])) << k;
        }
    }
    s.slab_pages = counter(hdrx::slab_bytes) / kSlabPage;
    s.free = buddy_free_units * kUnit + counter(hdrx::slab_bytes) - counter(hdrx::slab_live);
    s.allocated = counter(hdr::allocated);
    s.metadata = s.heap - data_bytes();
    return s;
}

std::vector<std::vector<std::uint64_t>> PuddleHeap::free_blocks() const
{
    std::vector<std::vector<std::uint64_t>> out(geo_.max_order + 1);
    for (std::uint32_t k = 0; k <= geo_.max_order; ++k) {
        auto blocks = (geo_.data_units + (1ull << k) - 1) >> k;
        for (std::uint64_t b = 0; b < blocks; ++b) {
            if (is_free(k, b << k)) {
                out[k].push_back(b << k);
            }
        }
    }
    return out;
}

} // namespace puddle::alloc
