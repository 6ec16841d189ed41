#include "puddle/pmem.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cstring>

namespace puddle::pmem {

namespace fs = std::filesystem;

const char* to_string(EventKind kind) noexcept
{
    switch (kind) {
    case EventKind::store: return "store";
    case EventKind::flush: return "flush";
    case EventKind::fence: return "fence";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Platform

Platform::~Platform() = default;

Platform& Platform::global()
{
    static Platform platform;
    return platform;
}

std::optional<std::uint64_t> Platform::armed() const noexcept
{
    auto at = armed_.load(std::memory_order_acquire);
    if (at == CrashPlan::kNow) {
        return std::nullopt;
    }
    return at;
}

void Platform::record_events(bool on)
{
    std::lock_guard lock(mu_);
    recording_.store(on);
}

std::vector<Event> Platform::recorded_events() const
{
    std::lock_guard lock(mu_);
    return recorded_;
}

void Platform::clear_recorded_events()
{
    std::lock_guard lock(mu_);
    recorded_.clear();
}

void Platform::begin_traces()
{
    std::vector<PersistentDomain*> live;
    {
        std::lock_guard lock(mu_);
        tracing_ = true;
        live = live_;
    }
    for (auto* d : live) {
        d->begin_trace();
    }
}

void Platform::end_traces()
{
    std::vector<PersistentDomain*> live;
    {
        std::lock_guard lock(mu_);
        tracing_ = false;
        live = live_;
    }
    for (auto* d : live) {
        d->end_trace();
    }
}

std::vector<CrashImage> Platform::capture_crash(const CrashPlan& plan) const
{
    std::lock_guard lock(mu_);
    std::vector<CrashImage> images;
    images.reserve(live_.size());
    for (auto* d : live_) {
        if (d->read_only()) {
            continue;
        }
        CrashImage img;
        img.backing = d->dup_backing();
        img.shadow = d->dup_shadow();
        img.image = d->simulate_crash(plan);
        img.label = d->label();
        images.push_back(std::move(img));
    }
    return images;
}

std::size_t Platform::live_domains() const
{
    std::lock_guard lock(mu_);
    return live_.size();
}

std::uint64_t Platform::next_event(std::uint32_t domain, EventKind kind, std::uint64_t offset,
                                   std::uint64_t length)
{
    if (!recording_.load(std::memory_order_relaxed)) {
        return counter_.fetch_add(1, std::memory_order_acq_rel);
    }
    std::lock_guard lock(mu_);
    auto index = counter_.fetch_add(1, std::memory_order_acq_rel);
    recorded_.push_back({index, domain, kind, offset, length});
    return index;
}

std::uint32_t Platform::attach(PersistentDomain* domain)
{
    bool trace = false;
    std::uint32_t id = 0;
    {
        std::lock_guard lock(mu_);
        live_.push_back(domain);
        id = next_id_++;
        trace = tracing_;
    }
    if (trace) {
        domain->begin_trace();
    }
    return id;
}

void Platform::detach(PersistentDomain* domain)
{
    std::lock_guard lock(mu_);
    std::erase(live_, domain);
}

// ---------------------------------------------------------------------------
// File helpers

namespace {

UniqueFd open_fd(const fs::path& path, int flags)
{
    int fd = ::open(path.c_str(), flags | O_CLOEXEC, 0600);
    if (fd < 0) {
        fail(Errc::io_failure, "cannot open " + path.string() + ": " + std::strerror(errno));
    }
    return UniqueFd(fd);
}

std::size_t file_size(int fd)
{
    struct stat st {};
    if (::fstat(fd, &st) != 0) {
        fail(Errc::io_failure, "fstat failed");
    }
    return static_cast<std::size_t>(st.st_size);
}

void copy_contents(int from, int to, std::size_t size)
{
    if (::ftruncate(to, static_cast<off_t>(size)) != 0) {
        fail(Errc::io_failure, "ftruncate failed");
    }
    std::vector<char> buf(1 << 20);
    std::size_t done = 0;
    while (done < size) {
        auto n = ::pread(from, buf.data(), std::min(buf.size(), size - done),
                         static_cast<off_t>(done));
        if (n <= 0) {
            fail(Errc::io_failure, "read failed while copying");
        }
        if (::pwrite(to, buf.data(), static_cast<std::size_t>(n), static_cast<off_t>(done)) != n) {
            fail(Errc::io_failure, "write failed while copying");
        }
        done += static_cast<std::size_t>(n);
    }
}

void write_all(int fd, ByteSpan bytes)
{
    std::size_t done = 0;
    while (done < bytes.size()) {
        auto n = ::pwrite(fd, bytes.data() + done, bytes.size() - done, static_cast<off_t>(done));
        if (n <= 0) {
            fail(Errc::io_failure, "write failed");
        }
        done += static_cast<std::size_t>(n);
    }
}

} // namespace

fs::path shadow_path(const fs::path& backing)
{
    return fs::path(backing.string() + ".durable");
}

// ---------------------------------------------------------------------------
// PersistentDomain

std::unique_ptr<PersistentDomain> PersistentDomain::open(const fs::path& path,
                                                         std::size_t capacity,
                                                         OpenOptions options)
{
    if (capacity % kPageSize != 0) {
        fail(Errc::capacity_not_aligned, "capacity must be a multiple of 4096");
    }
    int mode = options.read_only ? O_RDONLY : O_RDWR;
    if (options.create && !options.read_only) {
        mode |= O_CREAT;
    }
    auto backing = open_fd(path, mode);
    auto existing = file_size(backing.get());
    if (capacity == 0) {
        capacity = existing;
    }
    if (capacity == 0 || capacity % kPageSize != 0) {
        fail(Errc::capacity_not_aligned, "capacity must be a non-zero multiple of 4096");
    }
    if (existing == 0 && !options.read_only) {
        if (::ftruncate(backing.get(), static_cast<off_t>(capacity)) != 0) {
            fail(Errc::io_failure, "cannot size " + path.string());
        }
    } else if (existing != capacity) {
        fail(Errc::bad_size, path.string() + " has a different size than requested");
    }

    auto sp = shadow_path(path);
    UniqueFd shadow;
    bool fresh_shadow = !fs::exists(sp);
    if (fresh_shadow && options.read_only) {
        fail(Errc::io_failure, "missing durable shadow for " + path.string());
    }
    shadow = open_fd(sp, options.read_only ? O_RDONLY : (O_RDWR | O_CREAT));
    if (!options.read_only && (fresh_shadow || file_size(shadow.get()) != capacity)) {
        copy_contents(backing.get(), shadow.get(), capacity);
    }
    if (options.label.empty()) {
        options.label = path.filename().string();
    }
    auto domain = adopt(std::move(backing), std::move(shadow), capacity, std::move(options));
    domain->path_ = path;
    return domain;
}

std::unique_ptr<PersistentDomain> PersistentDomain::adopt(UniqueFd backing, UniqueFd shadow,
                                                          std::size_t capacity,
                                                          OpenOptions options)
{
    if (capacity == 0 || capacity % kPageSize != 0) {
        fail(Errc::capacity_not_aligned, "capacity must be a non-zero multiple of 4096");
    }
    std::unique_ptr<PersistentDomain> d(new PersistentDomain());
    d->platform_ = options.platform ? options.platform : &Platform::global();
    d->label_ = std::move(options.label);
    d->read_only_ = options.read_only;
    d->capacity_ = capacity;
    d->fixed_ = options.fixed_address != nullptr;

    int prot = PROT_READ | (options.read_only ? 0 : PROT_WRITE);
    int flags = MAP_SHARED | (d->fixed_ ? MAP_FIXED : 0);
    void* work = ::mmap(options.fixed_address, capacity, prot, flags, backing.get(), 0);
    if (work == MAP_FAILED) {
        fail(Errc::io_failure, std::string("cannot map working image: ") + std::strerror(errno));
    }
    void* dur = ::mmap(nullptr, capacity, prot, MAP_SHARED, shadow.get(), 0);
    if (dur == MAP_FAILED) {
        if (d->fixed_) {
            ::mmap(work, capacity, PROT_NONE, MAP_PRIVATE | MAP_ANONYMOUS | MAP_FIXED | MAP_NORESERVE,
                   -1, 0);
        } else {
            ::munmap(work, capacity);
        }
        fail(Errc::io_failure, std::string("cannot map durable image: ") + std::strerror(errno));
    }
    d->working_ = static_cast<std::byte*>(work);
    d->durable_ = static_cast<std::byte*>(dur);
    d->backing_fd_ = std::move(backing);
    d->shadow_fd_ = std::move(shadow);
    d->state_.assign(capacity / kLineSize, LineState::clean);
    d->id_ = d->platform_->attach(d.get());
    return d;
}

PersistentDomain::~PersistentDomain()
{
    platform_->detach(this);
    if (working_) {
        if (fixed_) {
            ::mmap(working_, capacity_, PROT_NONE,
                   MAP_PRIVATE | MAP_ANONYMOUS | MAP_FIXED | MAP_NORESERVE, -1, 0);
        } else {
            ::munmap(working_, capacity_);
        }
    }
    if (durable_) {
        ::munmap(durable_, capacity_);
    }
}

bool PersistentDomain::contains(const void* p, std::size_t length) const noexcept
{
    auto* b = static_cast<const std::byte*>(p);
    return b >= working_ && length <= capacity_ && b - working_ <= static_cast<std::ptrdiff_t>(capacity_ - length);
}

void PersistentDomain::check_range(std::size_t offset, std::size_t length) const
{
    if (offset > capacity_ || length > capacity_ - offset) {
        fail(Errc::out_of_bounds, "range outside persistent domain");
    }
}

void PersistentDomain::check_writable() const
{
    if (read_only_) {
        fail(Errc::read_only, "domain is mapped read-only");
    }
}

void PersistentDomain::log_event(std::uint64_t index, EventKind kind, std::uint64_t offset,
                                 std::uint64_t length)
{
    if (trace_log_) {
        *trace_log_ << index << ' ' << to_string(kind) << ' ' << offset << ' ' << length << '\n';
    }
}

void PersistentDomain::store(std::size_t offset, ByteSpan payload)
{
    check_range(offset, payload.size());
    check_writable();
    std::lock_guard lock(mu_);
    auto index = platform_->next_event(id_, EventKind::store, offset, payload.size());
    std::memcpy(working_ + offset, payload.data(), payload.size());
    if (!payload.empty()) {
        for (auto line = offset / kLineSize; line <= (offset + payload.size() - 1) / kLineSize; ++line) {
            state_[line] = LineState::dirty;
        }
    }
    log_event(index, EventKind::store, offset, payload.size());
}

void PersistentDomain::flush(std::size_t offset, std::size_t length)
{
    check_range(offset, length);
    check_writable();
    std::lock_guard lock(mu_);
    auto index = platform_->next_event(id_, EventKind::flush, offset, length);
    log_event(index, EventKind::flush, offset, length);
    if (!platform_->applies(index)) {
        return;
    }
    last_applied_ = index;
    any_applied_ = true;
    TraceRecord* rec = nullptr;
    if (trace_) {
        rec = &trace_->records.emplace_back(TraceRecord{index, EventKind::flush, {}});
    }
    if (length == 0) {
        return;
    }
    for (auto line = offset / kLineSize; line <= (offset + length - 1) / kLineSize; ++line) {
        auto* work = working_ + line * kLineSize;
        auto st = state_[line];
        bool differs = std::memcmp(work, durable_ + line * kLineSize, kLineSize) != 0;
        if (st == LineState::dirty || st == LineState::flushed_pending || differs) {
            Line snap;
            std::memcpy(snap.data(), work, kLineSize);
            pending_[line] = snap;
            state_[line] = LineState::flushed_pending;
            if (rec) {
                rec->snapshots.emplace_back(line, snap);
            }
        }
    }
}

void PersistentDomain::fence()
{
    check_writable();
    std::lock_guard lock(mu_);
    auto index = platform_->next_event(id_, EventKind::fence, 0, 0);
    log_event(index, EventKind::fence, 0, 0);
    if (!platform_->applies(index)) {
        return;
    }
    last_applied_ = index;
    any_applied_ = true;
    if (trace_) {
        trace_->records.push_back(TraceRecord{index, EventKind::fence, {}});
    }
    for (auto& [line, snap] : pending_) {
        std::memcpy(durable_ + line * kLineSize, snap.data(), kLineSize);
        if (state_[line] == LineState::flushed_pending) {
            state_[line] = LineState::durable;
        }
    }
    pending_.clear();
}

LineState PersistentDomain::line_state(std::size_t line) const
{
    if (line >= state_.size()) {
        fail(Errc::out_of_bounds, "line index outside domain");
    }
    std::lock_guard lock(mu_);
    return state_[line];
}

std::vector<std::size_t> PersistentDomain::pending_lines() const
{
    std::lock_guard lock(mu_);
    std::vector<std::size_t> out;
    out.reserve(pending_.size());
    for (auto& [line, snap] : pending_) {
        out.push_back(line);
    }
    return out;
}

Bytes PersistentDomain::compose(ByteSpan durable, const std::map<std::size_t, Line>& pending,
                                const CrashPlan& plan)
{
    Bytes image(durable.begin(), durable.end());
    if (plan.pending_policy == PendingPolicy::subset) {
        std::size_t i = 0;
        for (auto& [line, snap] : pending) {
            if (i < 64 && (plan.subset_mask >> i & 1U) != 0) {
                std::memcpy(image.data() + line * kLineSize, snap.data(), kLineSize);
            }
            ++i;
        }
    }
    return image;
}

Bytes PersistentDomain::simulate_crash(const CrashPlan& plan) const
{
    std::lock_guard lock(mu_);
    auto now = platform_->events();
    auto at = plan.crash_event == CrashPlan::kNow ? now : plan.crash_event;
    if (at > now) {
        fail(Errc::invalid_range, "crash event lies in the future");
    }
    if (!any_applied_ || last_applied_ < at) {
        return compose(durable_bytes(), pending_, plan);
    }
    if (!trace_ || at < trace_->start_event) {
        fail(Errc::invalid_range, "crash point predates the replay trace");
    }
    // Replay the trace up to (excluding) event `at`.
    Bytes durable = trace_->base_durable;
    auto pending = trace_->base_pending;
    for (const auto& rec : trace_->records) {
        if (rec.index >= at) {
            break;
        }
        if (rec.kind == EventKind::flush) {
            for (const auto& [line, snap] : rec.snapshots) {
                pending[line] = snap;
            }
        } else if (rec.kind == EventKind::fence) {
            for (const auto& [line, snap] : pending) {
                std::memcpy(durable.data() + line * kLineSize, snap.data(), kLineSize);
            }
            pending.clear();
        }
    }
    return compose(durable, pending, plan);
}

void PersistentDomain::begin_trace()
{
    std::lock_guard lock(mu_);
    auto t = std::make_unique<Trace>();
    t->start_event = platform_->events();
    t->base_durable.assign(durable_, durable_ + capacity_);
    t->base_pending = pending_;
    trace_ = std::move(t);
}

void PersistentDomain::end_trace()
{
    std::lock_guard lock(mu_);
    trace_.reset();
}

bool PersistentDomain::tracing() const noexcept
{
    std::lock_guard lock(mu_);
    return trace_ != nullptr;
}

void PersistentDomain::set_trace_log(const fs::path& path)
{
    std::lock_guard lock(mu_);
    trace_log_ = std::make_unique<std::ofstream>(path, std::ios::app);
}

// ---------------------------------------------------------------------------

void materialize(std::span<const CrashImage> images)
{
    for (const auto& img : images) {
        write_all(img.backing.get(), img.image);
        write_all(img.shadow.get(), img.image);
    }
}

void power_cycle(const fs::path& backing)
{
    auto sp = shadow_path(backing);
    if (!fs::exists(sp) || !fs::exists(backing)) {
        return;
    }
    auto from = open_fd(sp, O_RDONLY);
    auto to = open_fd(backing, O_RDWR);
    copy_contents(from.get(), to.get(), file_size(from.get()));
}

void power_cycle_tree(const fs::path& dir)
{
    std::vector<fs::path> targets;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (entry.is_regular_file() && fs::exists(shadow_path(entry.path()))) {
            targets.push_back(entry.path());
        }
    }
    for (const auto& p : targets) {
        power_cycle(p);
    }
}

} // namespace puddle::pmem
