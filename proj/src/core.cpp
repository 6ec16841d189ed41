#include "puddle/core.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <sys/statvfs.h>

#include <boost/uuid/random_generator.hpp>
#include <boost/uuid/uuid.hpp>

#include <cerrno>
#include <cstring>
#include <mutex>

namespace puddle {

namespace fs = std::filesystem;

PuddleId PuddleId::random()
{
    thread_local boost::uuids::random_generator gen;
    auto u = gen();
    PuddleId id;
    std::copy(u.begin(), u.end(), id.bytes.begin());
    return id;
}

PuddleId PuddleId::parse(std::string_view hex)
{
    PuddleId id;
    std::string clean;
    for (char c : hex) {
        if (c != '-') {
            clean.push_back(c);
        }
    }
    if (clean.size() != 32) {
        fail(Errc::unknown_uuid, "malformed uuid: " + std::string(hex));
    }
    auto nibble = [&](char c) -> std::uint8_t {
        if (c >= '0' && c <= '9') return static_cast<std::uint8_t>(c - '0');
        if (c >= 'a' && c <= 'f') return static_cast<std::uint8_t>(c - 'a' + 10);
        if (c >= 'A' && c <= 'F') return static_cast<std::uint8_t>(c - 'A' + 10);
        fail(Errc::unknown_uuid, "malformed uuid: " + std::string(hex));
    };
    for (std::size_t i = 0; i < 16; ++i) {
        id.bytes[i] = static_cast<std::uint8_t>(nibble(clean[2 * i]) << 4 | nibble(clean[2 * i + 1]));
    }
    return id;
}

std::string PuddleId::hex() const
{
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    out.reserve(32);
    for (auto b : bytes) {
        out.push_back(digits[b >> 4]);
        out.push_back(digits[b & 15]);
    }
    return out;
}

bool PuddleId::nil() const noexcept
{
    return std::all_of(bytes.begin(), bytes.end(), [](auto b) { return b == 0; });
}

std::uint64_t header_size_for(std::uint64_t heap_size) noexcept
{
    auto pages = (heap_size + kHeapPerHeaderPage - 1) / kHeapPerHeaderPage;
    return std::max<std::uint64_t>(1, pages) * kPage;
}

bool HeaderView::valid_magic() const noexcept
{
    return std::memcmp(p_ + hdr::magic, kHeaderMagic.data(), kHeaderMagic.size()) == 0;
}

PuddleId HeaderView::uuid() const noexcept
{
    PuddleId id;
    std::memcpy(id.bytes.data(), p_ + hdr::uuid, 16);
    return id;
}

void HeaderView::validate(std::uint64_t file_size) const
{
    if (!valid_magic()) {
        fail(Errc::corrupt_metadata, "bad puddle magic");
    }
    if (version() != kFormatVersion) {
        fail(Errc::version_mismatch, "unsupported puddle format version");
    }
    if (total_size() != file_size || header_size() + heap_size() != total_size() ||
        header_size() != header_size_for(heap_size())) {
        fail(Errc::corrupt_metadata, "puddle size fields are inconsistent");
    }
}

fs::path puddle_file(const fs::path& dir, const PuddleId& id)
{
    return dir / (id.hex() + ".pud");
}

void remove_puddle_file(const fs::path& path)
{
    std::error_code ec;
    fs::remove(pmem::shadow_path(path), ec);
    fs::remove(path, ec);
}

CreatedPuddle create_puddle(const fs::path& dir, std::uint64_t heap_size, PuddleKind kind,
                            pmem::Platform* platform, std::optional<PuddleId> id)
{
    if (heap_size == 0 || heap_size % kPage != 0) {
        fail(Errc::bad_size, "puddle heap size must be a non-zero multiple of 4096");
    }
    auto header = header_size_for(heap_size);
    auto total = header + heap_size;

    struct statvfs vfs {};
    if (::statvfs(dir.c_str(), &vfs) == 0 &&
        static_cast<unsigned __int128>(vfs.f_bavail) * vfs.f_frsize < 2 * static_cast<unsigned __int128>(total)) {
        fail(Errc::out_of_storage, "not enough storage for a new puddle");
    }

    CreatedPuddle out;
    out.id = id ? *id : PuddleId::random();
    out.path = puddle_file(dir, out.id);
    pmem::OpenOptions opts;
    opts.platform = platform;
    try {
        out.domain = pmem::PersistentDomain::open(out.path, total, opts);
    } catch (const Error& e) {
        remove_puddle_file(out.path);
        if (errno == ENOSPC) {
            fail(Errc::out_of_storage, e.what());
        }
        throw;
    }

    std::byte h[hdr::fixed_end] = {};
    std::memcpy(h + hdr::magic, kHeaderMagic.data(), kHeaderMagic.size());
    put<std::uint32_t>(h + hdr::version, kFormatVersion);
    std::memcpy(h + hdr::uuid, out.id.bytes.data(), 16);
    put<std::uint64_t>(h + hdr::total_size, total);
    put<std::uint64_t>(h + hdr::header_size, header);
    put<std::uint64_t>(h + hdr::heap_size, heap_size);
    put<std::uint64_t>(h + hdr::root_offset, kNullOffset);
    put<std::uint64_t>(h + hdr::meta_offset, hdr::fixed_end);
    put<std::uint64_t>(h + hdr::meta_size, header - hdr::fixed_end);
    put<std::uint32_t>(h + hdr::kind, static_cast<std::uint32_t>(kind));
    out.domain->store(0, ByteSpan(h, sizeof h));
    out.domain->persist(0, sizeof h);
    return out;
}

Capability open_capability(const fs::path& path, bool writable)
{
    int flags = (writable ? O_RDWR : O_RDONLY) | O_CLOEXEC;
    UniqueFd backing(::open(path.c_str(), flags));
    UniqueFd shadow(::open(pmem::shadow_path(path).c_str(), flags));
    if (!backing || !shadow) {
        fail(Errc::io_failure, "cannot open puddle " + path.string());
    }
    std::byte h[hdr::fixed_end];
    if (::pread(backing.get(), h, sizeof h, 0) != static_cast<ssize_t>(sizeof h)) {
        fail(Errc::corrupt_metadata, "short puddle header in " + path.string());
    }
    HeaderView view(h);
    struct stat st {};
    ::fstat(backing.get(), &st);
    view.validate(static_cast<std::uint64_t>(st.st_size));
    Capability cap;
    cap.id = view.uuid();
    cap.kind = view.kind();
    cap.total_size = view.total_size();
    cap.assigned = view.assigned_base();
    cap.writable = writable;
    cap.backing = std::move(backing);
    cap.shadow = std::move(shadow);
    return cap;
}

// ---------------------------------------------------------------------------
// AddressMap

AddressMap::AddressMap(std::uint64_t base, std::uint64_t length) : base_(base), length_(length)
{
    if (base % kPage != 0 || length % kPage != 0 || length == 0) {
        fail(Errc::bad_size, "address space must be page aligned");
    }
    free_[base] = length;
}

bool AddressMap::range_free(std::uint64_t start, std::uint64_t size) const
{
    if (start < base_ || start % kPage != 0 || size > length_ || start - base_ > length_ - size) {
        return false;
    }
    auto it = free_.upper_bound(start);
    if (it == free_.begin()) {
        return false;
    }
    --it;
    return it->first <= start && start + size <= it->first + it->second;
}

void AddressMap::take(std::uint64_t start, std::uint64_t size)
{
    auto it = std::prev(free_.upper_bound(start));
    auto ext_start = it->first;
    auto ext_len = it->second;
    free_.erase(it);
    if (start > ext_start) {
        free_[ext_start] = start - ext_start;
    }
    if (start + size < ext_start + ext_len) {
        free_[start + size] = ext_start + ext_len - (start + size);
    }
}

std::uint64_t AddressMap::assign(const PuddleId& id, std::uint64_t size,
                                 std::optional<std::uint64_t> hint)
{
    if (by_id_.contains(id)) {
        fail(Errc::already_assigned, "puddle " + id.hex() + " already has an address");
    }
    size = align_up(size, kPage);
    std::optional<std::uint64_t> chosen;
    if (hint && range_free(*hint, size)) {
        chosen = *hint;
    } else {
        for (auto& [start, len] : free_) {
            if (len >= size) {
                chosen = start;
                break;
            }
        }
    }
    if (!chosen) {
        fail(Errc::space_exhausted, "global address space exhausted");
    }
    take(*chosen, size);
    by_id_[id] = {*chosen, size};
    by_start_[*chosen] = id;
    return *chosen;
}

void AddressMap::reserve_at(const PuddleId& id, std::uint64_t start, std::uint64_t size)
{
    if (by_id_.contains(id)) {
        fail(Errc::already_assigned, "puddle " + id.hex() + " already has an address");
    }
    size = align_up(size, kPage);
    if (!range_free(start, size)) {
        fail(Errc::space_exhausted, "requested address range is not free");
    }
    take(start, size);
    by_id_[id] = {start, size};
    by_start_[start] = id;
}

void AddressMap::release(const PuddleId& id)
{
    auto it = by_id_.find(id);
    if (it == by_id_.end()) {
        fail(Errc::not_assigned, "puddle " + id.hex() + " has no address");
    }
    auto [start, size] = it->second;
    by_start_.erase(start);
    by_id_.erase(it);

    auto next = free_.lower_bound(start);
    if (next != free_.end() && next->first == start + size) {
        size += next->second;
        next = free_.erase(next);
    }
    if (next != free_.begin()) {
        auto prev = std::prev(next);
        if (prev->first + prev->second == start) {
            prev->second += size;
            return;
        }
    }
    free_[start] = size;
}

std::optional<AddressRange> AddressMap::reservation(const PuddleId& id) const
{
    auto it = by_id_.find(id);
    if (it == by_id_.end()) {
        return std::nullopt;
    }
    return it->second;
}

std::optional<PuddleId> AddressMap::owner_of(std::uint64_t addr) const
{
    auto it = by_start_.upper_bound(addr);
    if (it == by_start_.begin()) {
        return std::nullopt;
    }
    --it;
    if (by_id_.at(it->second).contains(addr)) {
        return it->second;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// GlobalSpace

GlobalSpace::GlobalSpace(GlobalSpaceConfig config, pmem::Platform* platform)
    : config_(config), platform_(platform ? platform : &pmem::Platform::global())
{
    if (config_.base % kPage != 0 || config_.length % kPage != 0 || config_.length == 0) {
        fail(Errc::bad_size, "global space must be page aligned");
    }
    void* want = reinterpret_cast<void*>(config_.base);
    void* got = ::mmap(want, config_.length, PROT_NONE,
                       MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE | MAP_FIXED_NOREPLACE, -1, 0);
    if (got == MAP_FAILED || got != want) {
        if (got != MAP_FAILED) {
            ::munmap(got, config_.length);
        }
        fail(Errc::space_exhausted, "cannot reserve the global persistent range at the configured base");
    }
    reservation_ = got;
}

GlobalSpace::~GlobalSpace()
{
    {
        std::unique_lock lock(mu_);
        by_start_.clear();
        by_id_.clear();
    }
    if (reservation_) {
        ::munmap(reservation_, config_.length);
    }
}

GlobalSpace::Mapping& GlobalSpace::map(Capability cap)
{
    if (!cap.backing || !cap.shadow) {
        fail(Errc::no_capability, "no capability for puddle " + cap.id.hex());
    }
    if (cap.assigned == 0) {
        fail(Errc::not_assigned, "puddle " + cap.id.hex() + " has no assigned address");
    }
    AddressRange range{cap.assigned, align_up(cap.total_size, kPage)};
    if (!in_space(range.start) || range.length > config_.length ||
        range.start - config_.base > config_.length - range.length) {
        fail(Errc::out_of_bounds, "assigned range lies outside the global space");
    }

    std::unique_lock lock(mu_);
    if (by_id_.contains(cap.id)) {
        return by_start_.at(by_id_.at(cap.id));
    }
    auto next = by_start_.lower_bound(range.start);
    if ((next != by_start_.end() && next->second.range.overlaps(range)) ||
        (next != by_start_.begin() && std::prev(next)->second.range.overlaps(range))) {
        fail(Errc::conflicting_map, "assigned range overlaps a mapped puddle");
    }

    pmem::OpenOptions opts;
    opts.platform = platform_;
    opts.fixed_address = reinterpret_cast<void*>(range.start);
    opts.read_only = !cap.writable;
    opts.label = cap.id.hex();
    auto domain = pmem::PersistentDomain::adopt(std::move(cap.backing), std::move(cap.shadow),
                                                cap.total_size, opts);
    HeaderView(domain->data()).validate(cap.total_size);
    if (HeaderView(domain->data()).uuid() != cap.id) {
        fail(Errc::corrupt_metadata, "puddle header uuid does not match capability");
    }
    auto& m = by_start_[range.start];
    m.id = cap.id;
    m.range = range;
    m.domain = std::move(domain);
    by_id_[cap.id] = range.start;
    return m;
}

void GlobalSpace::unmap(const PuddleId& id)
{
    std::unique_lock lock(mu_);
    auto it = by_id_.find(id);
    if (it == by_id_.end()) {
        fail(Errc::not_mapped, "puddle " + id.hex() + " is not mapped");
    }
    by_start_.erase(it->second);
    by_id_.erase(it);
}

bool GlobalSpace::mapped(const PuddleId& id) const
{
    std::shared_lock lock(mu_);
    return by_id_.contains(id);
}

GlobalSpace::Mapping* GlobalSpace::find(std::uint64_t addr)
{
    std::shared_lock lock(mu_);
    auto it = by_start_.upper_bound(addr);
    if (it == by_start_.begin()) {
        return nullptr;
    }
    --it;
    return it->second.range.contains(addr) ? &it->second : nullptr;
}

GlobalSpace::Mapping* GlobalSpace::get(const PuddleId& id)
{
    std::shared_lock lock(mu_);
    auto it = by_id_.find(id);
    return it == by_id_.end() ? nullptr : &by_start_.at(it->second);
}

std::vector<PuddleId> GlobalSpace::mapped_ids() const
{
    std::shared_lock lock(mu_);
    std::vector<PuddleId> out;
    for (auto& [id, start] : by_id_) {
        out.push_back(id);
    }
    return out;
}

std::uint64_t GlobalSpace::root_address(const PuddleId& id) const
{
    std::shared_lock lock(mu_);
    auto it = by_id_.find(id);
    if (it == by_id_.end()) {
        fail(Errc::not_mapped, "puddle " + id.hex() + " is not mapped");
    }
    const auto& m = by_start_.at(it->second);
    return m.range.start + HeaderView(m.domain->data()).header_size() + kRootOffset;
}

} // namespace puddle
