#include <gtest/gtest.h>

#include <map>
#include <random>

#include "puddle/crc32c.hpp"
#include "puddle/logging.hpp"
#include "support.hpp"

using namespace puddle;
using namespace puddle::logging;
using puddle::testing::errc_of;
using puddle::testing::load_image;
using puddle::testing::TempDir;

namespace {

// Bitwise CRC-32C, independent of the table-driven library implementation.
std::uint32_t crc32c_bitwise(ByteSpan bytes)
{
    std::uint32_t crc = 0xFFFFFFFFu;
    for (auto b : bytes) {
        crc ^= static_cast<std::uint8_t>(b);
        for (int k = 0; k < 8; ++k) {
            crc = (crc >> 1) ^ (0x82F63B78u & (0u - (crc & 1u)));
        }
    }
    return ~crc;
}

Bytes bytes_of(std::uint64_t v)
{
    Bytes b(8);
    put(b.data(), v);
    return b;
}

class LogFixture : public ::testing::Test {
protected:
    std::unique_ptr<pmem::PersistentDomain> make_log(std::uint64_t heap = 64 << 10)
    {
        auto c = create_puddle(dir.path(), heap, PuddleKind::log, &platform);
        format_segment(*c.domain, 0);
        ids.push_back(c.id);
        return std::move(c.domain);
    }

    // A data puddle whose heap is addressed as [kTarget, kTarget + heap).
    std::unique_ptr<pmem::PersistentDomain> make_target(std::uint64_t heap = 1 << 20)
    {
        auto c = create_puddle(dir.path(), heap, PuddleKind::data, &platform);
        return std::move(c.domain);
    }

    TargetResolver resolver_for(pmem::PersistentDomain& d)
    {
        return [&d](std::uint64_t addr, std::size_t len) -> std::optional<ReplayTarget> {
            auto heap = HeaderView(d.data()).header_size();
            if (addr < kTarget || addr + len > kTarget + d.capacity() - heap) {
                return std::nullopt;
            }
            return ReplayTarget{&d, heap + (addr - kTarget)};
        };
    }

    static constexpr std::uint64_t kTarget = 0x400000000000ull;
    TempDir dir;
    pmem::Platform platform;
    std::vector<PuddleId> ids;
};

} // namespace

TEST(Crc32cTest, CheckValues)
{
    std::string s = "123456789";
    auto span = std::as_bytes(std::span(s.data(), s.size()));
    EXPECT_EQ(crc32c(span), 0xE3069283u);
    EXPECT_EQ(crc32c_bitwise(span), 0xE3069283u);
    std::mt19937 rng(3);
    for (int i = 0; i < 100; ++i) {
        Bytes b(rng() % 300);
        for (auto& x : b) {
            x = std::byte(rng());
        }
        EXPECT_EQ(crc32c(b), crc32c_bitwise(b));
        auto cut = b.size() / 3;
        EXPECT_EQ(crc32c({ByteSpan(b).first(cut), ByteSpan(b).subspan(cut)}), crc32c(b));
    }
}

TEST_F(LogFixture, AppendUndoEntry)
{
    auto d = make_log();
    Log log(*d);
    auto payload = bytes_of(0x1122334455667788ull);
    log.append(kTarget + 64, payload, kUndoSeq, kBackward);
    auto all = log.entries();
    ASSERT_EQ(all.size(), 1u);
    EXPECT_EQ(all[0].target, kTarget + 64);
    EXPECT_EQ(all[0].seq, 1u);
    EXPECT_TRUE(all[0].backward());
    EXPECT_TRUE(all[0].checksum_ok());
    EXPECT_TRUE(std::equal(payload.begin(), payload.end(), all[0].payload.begin()));

    // Stored checksum against the bitwise oracle over header prefix + payload.
    const auto* raw = d->data() + HeaderView(d->data()).header_size() + kSegmentHeader;
    Bytes covered(raw, raw + 20);
    covered.insert(covered.end(), payload.begin(), payload.end());
    EXPECT_EQ(all[0].stored_checksum, crc32c_bitwise(covered));
    // Durable, not just written.
    EXPECT_TRUE(std::equal(d->bytes().begin(), d->bytes().end(), d->durable_bytes().begin()));
}

TEST_F(LogFixture, EmptyPayloadRejected)
{
    auto d = make_log();
    Log log(*d);
    EXPECT_EQ(errc_of([&] { log.append(kTarget, {}, 1, kBackward); }), Errc::bad_target);
}

TEST_F(LogFixture, CrashBetweenEntryAndNextFree)
{
    auto d = make_log();
    Log log(*d);
    platform.begin_traces();
    platform.record_events(true);
    auto start = platform.events();
    log.append(kTarget, bytes_of(42), kUndoSeq, kBackward);
    auto end = platform.events();
    auto events = platform.recorded_events();
    platform.record_events(false);

    // The entry counts once the fence after the next_free store has happened.
    auto header = HeaderView(d->data()).header_size();
    std::uint64_t visible_from = end;
    bool saw_next_free = false;
    for (const auto& e : events) {
        if (e.kind == pmem::EventKind::store && e.offset == header + seg::next_free) {
            saw_next_free = true;
        }
        if (saw_next_free && e.kind == pmem::EventKind::fence) {
            visible_from = e.index + 1;
            break;
        }
    }
    ASSERT_TRUE(saw_next_free);
    for (auto k = start; k <= end; ++k) {
        pmem::CrashPlan plan;
        plan.crash_event = k;
        auto img = d->simulate_crash(plan);
        pmem::Platform other;
        auto reopened = load_image(dir / ("crash" + std::to_string(k)), img, other);
        Log after(*reopened);
        auto n = after.entries().size();
        EXPECT_EQ(n, k >= visible_from ? 1u : 0u) << "crash at " << k;
        for (const auto& e : after.entries()) {
            EXPECT_TRUE(e.checksum_ok());
        }
    }
}

TEST_F(LogFixture, SequenceRangeExamples)
{
    auto d = make_log();
    Log log(*d);
    log.append(kTarget, bytes_of(1), kUndoSeq, kBackward);
    log.append(kTarget + 8, bytes_of(3), kRedoSeq, 0);
    auto all = log.entries();

    log.set_range(0, 2);
    EXPECT_TRUE(entry_valid(all[0], log.range()));
    EXPECT_FALSE(entry_valid(all[1], log.range()));
    log.set_range(2, 4);
    EXPECT_FALSE(entry_valid(all[0], log.range()));
    EXPECT_TRUE(entry_valid(all[1], log.range()));
    log.set_range(4, 4);
    EXPECT_FALSE(entry_valid(all[0], log.range()));
    EXPECT_FALSE(entry_valid(all[1], log.range()));
    EXPECT_EQ(errc_of([&] { log.set_range(3, 2); }), Errc::invalid_range);
}

TEST_F(LogFixture, BoundsAreExclusive)
{
    LogEntry e;
    e.seq = 2;
    Bytes payload = bytes_of(5);
    e.size = 8;
    e.payload = payload;
    e.stored_checksum = entry_checksum(e.target, e.size, e.seq, e.flags, e.payload);
    EXPECT_FALSE(entry_valid(e, {2, 4}));
    EXPECT_FALSE(entry_valid(e, {0, 2}));
    EXPECT_TRUE(entry_valid(e, {1, 3}));
}

TEST_F(LogFixture, FlippedPayloadBitInvalidates)
{
    auto d = make_log();
    Log log(*d);
    log.append(kTarget, bytes_of(0xFFFF), kUndoSeq, kBackward);
    log.set_range(0, 2);
    auto loc = log.entries()[0].at;
    auto off = HeaderView(d->data()).header_size() + kSegmentHeader + loc.offset + kEntryHeader + 3;
    d->data()[off] ^= std::byte{0x10};
    auto e = log.entries()[0];
    Bytes covered(d->data() + off - 3 - kEntryHeader, d->data() + off - 3 - kEntryHeader + 20);
    covered.insert(covered.end(), e.payload.begin(), e.payload.end());
    EXPECT_NE(crc32c_bitwise(covered), e.stored_checksum);
    EXPECT_FALSE(entry_valid(e, log.range()));
}

TEST_F(LogFixture, UndoEntriesReplayInReverse)
{
    auto d = make_log();
    auto t = make_target();
    Log log(*d);
    log.append(kTarget, bytes_of(1), kUndoSeq, kBackward);
    log.append(kTarget, bytes_of(2), kUndoSeq, kBackward);
    log.append(kTarget, bytes_of(3), kUndoSeq, kBackward);
    log.set_range(0, 2);

    platform.record_events(true);
    EXPECT_EQ(replay_log(log, resolver_for(*t)), 3u);
    platform.record_events(false);

    std::vector<std::uint64_t> order;
    auto heap = HeaderView(t->data()).header_size();
    for (const auto& ev : platform.recorded_events()) {
        if (ev.kind == pmem::EventKind::store && ev.domain == t->id() && ev.offset == heap) {
            order.push_back(ev.index);
        }
    }
    ASSERT_EQ(order.size(), 3u);
    // Last writer is the first-appended entry.
    EXPECT_EQ(load<std::uint64_t>(t->durable_bytes().data() + heap), 1u);
}

TEST_F(LogFixture, ClosedRangeReplaysNothing)
{
    auto d = make_log();
    auto t = make_target();
    Log log(*d);
    log.append(kTarget, bytes_of(1), kUndoSeq, kBackward);
    log.append(kTarget, bytes_of(3), kRedoSeq, 0);
    log.set_range(4, 4);
    EXPECT_EQ(replay_log(log, resolver_for(*t)), 0u);
}

TEST_F(LogFixture, VolatileTargetsSkipped)
{
    auto d = make_log();
    auto t = make_target();
    Log log(*d);
    log.append(0x7fff0000, bytes_of(9), kUndoSeq, kBackward | kVolatileTarget);
    log.append(kTarget, bytes_of(1), kUndoSeq, kBackward);
    log.set_range(0, 2);
    EXPECT_EQ(replay_log(log, resolver_for(*t), {.skip_volatile = true}), 1u);
}

TEST_F(LogFixture, UnwritableTargetRejectsWholeLog)
{
    auto d = make_log();
    auto t = make_target();
    Log log(*d);
    log.append(kTarget, bytes_of(1), kUndoSeq, kBackward);
    log.append(0x1000, bytes_of(2), kUndoSeq, kBackward);
    log.set_range(0, 2);
    EXPECT_EQ(errc_of([&] { replay_log(log, resolver_for(*t)); }), Errc::unwritable_range);
    EXPECT_EQ(load<std::uint64_t>(t->data() + 4096), 0u);
}

TEST_F(LogFixture, StrictReplayRejectsCorruption)
{
    auto d = make_log();
    auto t = make_target();
    Log log(*d);
    log.append(kTarget, bytes_of(1), kUndoSeq, kBackward);
    log.append(kTarget + 8, bytes_of(2), kUndoSeq, kBackward);
    log.set_range(0, 2);
    d->data()[HeaderView(d->data()).header_size() + kSegmentHeader + kEntryHeader] ^= std::byte{1};
    EXPECT_EQ(errc_of([&] { replay_log(log, resolver_for(*t)); }), Errc::corrupt_log);
    EXPECT_EQ(load<std::uint64_t>(t->data() + 4096 + 8), 0u);
    EXPECT_EQ(replay_log(log, resolver_for(*t), {.strict = false}), 1u);
}

TEST_F(LogFixture, ReplayIsIdempotent)
{
    auto d = make_log();
    auto t = make_target();
    Log log(*d);
    std::mt19937_64 rng(8);
    for (int i = 0; i < 50; ++i) {
        log.append(kTarget + (rng() % 64) * 8, bytes_of(rng()), kRedoSeq, 0);
    }
    log.set_range(2, 4);
    replay_log(log, resolver_for(*t));
    Bytes once(t->bytes().begin(), t->bytes().end());
    replay_log(log, resolver_for(*t));
    EXPECT_TRUE(std::equal(once.begin(), once.end(), t->bytes().begin()));
}

TEST_F(LogFixture, ChainedLogMatchesSingleLog)
{
    auto head = make_log(4096);
    auto big = make_log(1 << 20);
    auto space_c = create_puddle(dir.path(), 4096, PuddleKind::log_space, &platform);
    LogSpace::format(*space_c.domain);
    LogSpace space(*space_c.domain);
    space.add(ids[0], LogRole::head);

    std::map<PuddleId, std::unique_ptr<pmem::PersistentDomain>> extra;
    Log log(*head, [&](const PuddleId& id) -> pmem::PersistentDomain* {
        auto it = extra.find(id);
        return it == extra.end() ? nullptr : it->second.get();
    });
    log.set_supplier([&]() -> std::optional<ChainedSegment> {
        auto c = create_puddle(dir.path(), 4096, PuddleKind::log, &platform);
        space.add(c.id, LogRole::segment);
        auto* raw = c.domain.get();
        extra[c.id] = std::move(c.domain);
        return ChainedSegment{c.id, raw};
    });
    Log oracle(*big);

    std::mt19937_64 rng(21);
    for (int i = 0; i < 300; ++i) {
        Bytes payload(8 * (1 + rng() % 12));
        for (auto& b : payload) {
            b = std::byte(rng());
        }
        auto seq = rng() % 2 ? kUndoSeq : kRedoSeq;
        auto target = kTarget + (rng() % 1000) * 8;
        log.append(target, payload, seq, seq == kUndoSeq ? kBackward : 0);
        oracle.append(target, payload, seq, seq == kUndoSeq ? kBackward : 0);
    }
    EXPECT_GT(log.segment_count(), 3u);
    auto a = log.entries();
    auto b = oracle.entries();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].target, b[i].target);
        EXPECT_EQ(a[i].seq, b[i].seq);
        EXPECT_TRUE(std::equal(a[i].payload.begin(), a[i].payload.end(), b[i].payload.begin(),
                               b[i].payload.end()));
    }

    // The chain survives a reload from media.
    Log reread(*head, [&](const PuddleId& id) { return extra.at(id).get(); });
    EXPECT_EQ(reread.segment_count(), log.segment_count());
    EXPECT_EQ(reread.entries().size(), a.size());

    // Reset empties every segment; new appends start at the head again.
    log.reset();
    EXPECT_TRUE(log.empty());
    log.append(kTarget, bytes_of(1), kUndoSeq, kBackward);
    EXPECT_EQ(log.entries().size(), 1u);
    EXPECT_EQ(log.entries()[0].at.segment, 0u);
}

TEST_F(LogFixture, ChainRequiresOwnership)
{
    auto head = make_log(4096);
    auto space_c = create_puddle(dir.path(), 4096, PuddleKind::log_space, &platform);
    LogSpace::format(*space_c.domain);
    LogSpace space(*space_c.domain);
    auto stranger = create_puddle(dir.path(), 4096, PuddleKind::log, &platform);
    Log log(*head);
    EXPECT_EQ(errc_of([&] {
                  chain_log_puddle(log, space, {stranger.id, stranger.domain.get()});
              }),
              Errc::puddle_not_owned);
    space.add(stranger.id, LogRole::segment);
    EXPECT_NO_THROW(chain_log_puddle(log, space, {stranger.id, stranger.domain.get()}));
    EXPECT_EQ(log.segment_count(), 2u);
}

TEST_F(LogFixture, CrashBetweenLinkAndFirstEntry)
{
    auto head = make_log(4096);
    auto t = make_target();
    auto second = create_puddle(dir.path(), 4096, PuddleKind::log, &platform);
    auto second_path = second.path;
    Log log(*head);
    // Fill the head with redo entries.
    while (true) {
        auto st = log.stats();
        if (st.bytes + 40 > 4096 - kSegmentHeader) {
            break;
        }
        log.append(kTarget, bytes_of(st.entries), kRedoSeq, 0);
    }
    log.set_range(2, 4);
    auto before_entries = log.entries().size();
    platform.begin_traces();
    auto start = platform.events();
    log.chain({second.id, second.domain.get()});
    auto linked = platform.events();
    log.append(kTarget + 8, bytes_of(777), kRedoSeq, 0);
    auto end = platform.events();

    for (auto k = start; k <= end; ++k) {
        pmem::CrashPlan plan;
        plan.crash_event = k;
        pmem::Platform other;
        auto h2 = load_image(dir / ("h" + std::to_string(k)), head->simulate_crash(plan), other);
        auto s2 = load_image(dir / ("s" + std::to_string(k)), second.domain->simulate_crash(plan), other);
        auto t2 = load_image(dir / ("t" + std::to_string(k)), t->simulate_crash(plan), other);
        std::unique_ptr<Log> after;
        try {
            after = std::make_unique<Log>(*h2, [&](const PuddleId& id) {
                return id == second.id ? s2.get() : nullptr;
            });
        } catch (const Error& e) {
            FAIL() << "crash at " << k << ": " << e.what();
        }
        auto n = after->entries().size();
        if (k <= linked) {
            EXPECT_EQ(n, before_entries) << "crash at " << k;
        }
        EXPECT_TRUE(n == before_entries || n == before_entries + 1);
        replay_log(*after, [&](std::uint64_t addr, std::size_t) -> std::optional<ReplayTarget> {
            return ReplayTarget{t2.get(), 4096 + (addr - kTarget)};
        });
        auto second_slot = load<std::uint64_t>(t2->data() + 4096 + 8);
        EXPECT_EQ(second_slot, n == before_entries ? 0u : 777u);
    }
}

TEST_F(LogFixture, SetRangeIsAtomicUnderCrash)
{
    auto d = make_log();
    Log log(*d);
    log.set_range(0, 2);
    platform.begin_traces();
    auto start = platform.events();
    log.set_range(2, 4);
    auto end = platform.events();
    for (auto k = start; k <= end; ++k) {
        pmem::CrashPlan plan;
        plan.crash_event = k;
        for (std::uint64_t mask = 0; mask < 2; ++mask) {
            plan.pending_policy = pmem::PendingPolicy::subset;
            plan.subset_mask = mask;
            auto img = d->simulate_crash(plan);
            auto r = SeqRange::unpack(load<std::uint64_t>(img.data() + 4096 + seg::seq_range));
            EXPECT_TRUE(r == (SeqRange{0, 2}) || r == (SeqRange{2, 4}));
        }
    }
}

// Gate soundness against a brute-force filter.  Every entry writes a marker
// into its own slot, so the applied set is readable from the target.
TEST_F(LogFixture, GateMatchesBruteForceFilter)
{
    constexpr std::size_t n = 20000;
    auto d = make_log(2 << 20);
    std::mt19937_64 rng(77);
    Log log(*d);
    std::vector<Log::Pending> batch;
    std::vector<Bytes> payloads(n);
    std::vector<std::uint32_t> seqs(n);
    for (std::size_t i = 0; i < n; ++i) {
        seqs[i] = static_cast<std::uint32_t>(rng() % 6);
        payloads[i] = bytes_of(i + 1);
        batch.push_back({kTarget + i * 8, payloads[i], seqs[i], rng() % 2 ? kBackward : 0u});
    }
    log.append_batch(batch);
    // Corrupt ~1% of entries.
    auto all = log.entries();
    std::vector<bool> corrupt(n);
    auto area = HeaderView(d->data()).header_size() + kSegmentHeader;
    for (std::size_t i = 0; i < n; ++i) {
        if (rng() % 100 == 0) {
            corrupt[i] = true;
            d->data()[area + all[i].at.offset + kEntryHeader + rng() % 8] ^= std::byte{0x40};
        }
    }
    for (auto range : {SeqRange{0, 2}, SeqRange{2, 4}, SeqRange{4, 4}, SeqRange{0, 6}, SeqRange{1, 5}}) {
        auto tc = create_puddle(dir.path(), align_up(n * 8, 4096), PuddleKind::data, &platform);
        log.set_range(range);
        auto applied = replay_log(log, resolver_for(*tc.domain), {.strict = false});
        std::size_t expected = 0;
        for (std::size_t i = 0; i < n; ++i) {
            bool want = range.lo < seqs[i] && seqs[i] < range.hi && !corrupt[i];
            expected += want;
            auto got = load<std::uint64_t>(tc.domain->data() + 4096 + i * 8);
            ASSERT_EQ(got != 0, want) << "entry " << i;
        }
        EXPECT_EQ(applied, expected);
    }
}

TEST_F(LogFixture, LogSpaceSlots)
{
    auto c = create_puddle(dir.path(), 4096, PuddleKind::log_space, &platform);
    LogSpace::format(*c.domain);
    LogSpace space(*c.domain);
    EXPECT_EQ(space.capacity(), (4096u - 32) / 32);
    auto a = PuddleId::random();
    auto b = PuddleId::random();
    auto sa = space.add(a, LogRole::head);
    space.add(b, LogRole::segment);
    EXPECT_EQ(space.entries().size(), 2u);
    space.set_status(sa, LogStatus::dropped);
    EXPECT_FALSE(space.find(a));
    auto cc = PuddleId::random();
    EXPECT_EQ(space.add(cc, LogRole::head), sa);
    EXPECT_EQ(space.find(cc)->status, LogStatus::active);
    EXPECT_EQ(space.find(b)->role, LogRole::segment);
}
