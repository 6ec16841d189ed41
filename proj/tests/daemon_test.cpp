#include <gtest/gtest.h>

#include <fcntl.h>

#include <atomic>
#include <chrono>
#include <random>
#include <thread>

#include "puddle/alloc.hpp"
#include "puddle/client.hpp"
#include "puddle/daemon.hpp"
#include "puddle/logging.hpp"
#include "support.hpp"

using namespace puddle;
using namespace puddle::daemon;
using puddle::testing::errc_of;
using puddle::testing::TempDir;

namespace {

constexpr Credentials kAlice{1000, 100, 1};
constexpr Credentials kBob{1001, 100, 2};
constexpr Credentials kEve{2000, 200, 3};

class DaemonFixture : public ::testing::Test {
protected:
    DaemonOptions options(bool power_cycle = false)
    {
        DaemonOptions o;
        o.data_dir = dir.path();
        o.platform = &platform;
        o.power_cycle = power_cycle;
        return o;
    }

    void start(bool power_cycle = false) { d = std::make_unique<Daemon>(options(power_cycle)); }

    /// Simulates power loss of the whole machine and a daemon restart.
    void crash_restart()
    {
        clients.clear();
        d->abandon();
        d.reset();
        platform.disarm();
        start(true);
    }

    Client& client(const Credentials& c)
    {
        clients.push_back(Client::local(*d, c));
        return *clients.back();
    }

    std::unique_ptr<pmem::PersistentDomain> adopt(Capability& cap)
    {
        pmem::OpenOptions o;
        o.platform = &platform;
        o.read_only = !cap.writable;
        return pmem::PersistentDomain::adopt(std::move(cap.backing), std::move(cap.shadow), cap.total_size, o);
    }

    std::size_t pud_files() const
    {
        std::size_t n = 0;
        for (const auto& e : std::filesystem::directory_iterator(dir.path())) {
            n += e.path().extension() == ".pud";
        }
        return n;
    }

    TempDir dir;
    pmem::Platform platform;
    std::unique_ptr<Daemon> d;
    std::vector<std::unique_ptr<Client>> clients;
};

Bytes u64_bytes(std::uint64_t v)
{
    Bytes b(8);
    put(b.data(), v);
    return b;
}

} // namespace

TEST_F(DaemonFixture, PingEchoesPayloadAndId)
{
    start();
    auto s = d->open_session(kAlice);
    for (std::uint64_t id = 1; id <= 100; ++id) {
        wire::Frame f;
        f.code = wire::Code::ping;
        f.id = id * 7;
        f.payload = u64_bytes(id);
        auto r = d->handle(s, std::move(f));
        EXPECT_EQ(r.status, 0);
        EXPECT_EQ(r.id, id * 7);
        EXPECT_EQ(r.payload, u64_bytes(id));
    }
    d->close_session(s);
}

TEST_F(DaemonFixture, CleanStartHasEmptyRegistries)
{
    start();
    auto st = client(kAlice).status();
    EXPECT_EQ(st.puddles, 0u);
    EXPECT_EQ(st.pools, 0u);
    EXPECT_EQ(st.log_spaces, 0u);
    EXPECT_FALSE(st.recovery_ran);
}

TEST_F(DaemonFixture, SecondDaemonOnSameDirIsLockHeld)
{
    start();
    EXPECT_EQ(errc_of([&] { Daemon other(options()); }), Errc::lock_held);
}

TEST_F(DaemonFixture, NewPuddleMapsHeapPlusHeader)
{
    start();
    auto cap = client(kAlice).new_puddle(2 << 20, PuddleKind::data);
    EXPECT_EQ(cap.total_size, (2u << 20) + 4096);
    EXPECT_TRUE(cap.writable);
    EXPECT_NE(cap.assigned, 0u);
    auto dom = adopt(cap);
    HeaderView h(dom->data());
    EXPECT_TRUE(h.valid_magic());
    EXPECT_EQ(h.uuid(), cap.id);
    EXPECT_EQ(h.assigned_base(), cap.assigned);
    EXPECT_EQ(h.heap_size(), 2u << 20);
}

TEST_F(DaemonFixture, RejectsBadSizes)
{
    start();
    auto& c = client(kAlice);
    EXPECT_EQ(errc_of([&] { c.new_puddle(0, PuddleKind::data); }), Errc::bad_size);
    EXPECT_EQ(errc_of([&] { c.new_puddle(1000, PuddleKind::data); }), Errc::bad_size);
}

TEST_F(DaemonFixture, ExistPuddlePermissions)
{
    start();
    auto& alice = client(kAlice);
    auto& bob = client(kBob);
    auto& eve = client(kEve);
    auto cap = alice.new_puddle(64 << 10, PuddleKind::data, {}, 0640);
    auto id = cap.id;

    EXPECT_TRUE(alice.exist_puddle(id, true).writable);
    auto ro = bob.exist_puddle(id, true);
    EXPECT_FALSE(ro.writable);
    EXPECT_EQ(errc_of([&] { eve.exist_puddle(id, false); }), Errc::permission_denied);
    EXPECT_EQ(errc_of([&] { eve.exist_puddle(PuddleId::random(), false); }), Errc::unknown_uuid);

    // The read-only capability refuses stores.
    auto dom = adopt(ro);
    EXPECT_EQ(errc_of([&] { dom->store_value<std::uint64_t>(4096, 1); }), Errc::read_only);

    // Group write once granted; only the owner may change permissions.
    EXPECT_EQ(errc_of([&] { bob.chmod(id, kBob.uid, kBob.gid, 0600); }), Errc::not_owner);
    alice.chmod(id, kAlice.uid, kAlice.gid, 0660);
    EXPECT_TRUE(bob.exist_puddle(id, true).writable);
}

TEST_F(DaemonFixture, ReadOnlyCapabilityFaultsOnRawStore)
{
    start();
    auto id = client(kAlice).new_puddle(64 << 10, PuddleKind::data, {}, 0644).id;
    auto ro = client(kBob).exist_puddle(id, true);
    auto dom = adopt(ro);
    auto* p = dom->data() + 4096;
    EXPECT_DEATH({ *reinterpret_cast<volatile std::uint64_t*>(p) = 42; }, "");
}

TEST_F(DaemonFixture, FreeRequiresOwner)
{
    start();
    auto& alice = client(kAlice);
    auto id = alice.new_puddle(64 << 10, PuddleKind::data, {}, 0666).id;
    EXPECT_EQ(errc_of([&] { client(kBob).free_puddle(id); }), Errc::not_owner);
    EXPECT_EQ(pud_files(), 1u);
    alice.free_puddle(id);
    EXPECT_EQ(pud_files(), 0u);
    EXPECT_EQ(errc_of([&] { alice.exist_puddle(id, false); }), Errc::unknown_uuid);
}

TEST_F(DaemonFixture, RegLogSpaceOnce)
{
    start();
    auto& alice = client(kAlice);
    auto space = alice.new_puddle(64 << 10, PuddleKind::log_space).id;
    auto data = alice.new_puddle(64 << 10, PuddleKind::data).id;
    EXPECT_EQ(errc_of([&] { client(kBob).reg_log_space(space); }), Errc::not_owner);
    EXPECT_EQ(errc_of([&] { alice.reg_log_space(data); }), Errc::not_owner);
    alice.reg_log_space(space);
    EXPECT_EQ(errc_of([&] { alice.reg_log_space(space); }), Errc::already_registered);
    EXPECT_EQ(d->requests(wire::Code::reg_log_space), 4u);
    EXPECT_EQ(alice.calls(wire::Code::reg_log_space), 3u);
}

TEST_F(DaemonFixture, PoolsAndRefMaps)
{
    start();
    auto& alice = client(kAlice);
    auto created = alice.create_pool("sensors", 1 << 20);
    EXPECT_EQ(errc_of([&] { alice.create_pool("sensors", 1 << 20); }), Errc::pool_exists);
    auto extra = alice.new_puddle(1 << 20, PuddleKind::data, created.pool);
    auto info = alice.open_pool("sensors");
    EXPECT_EQ(info.pool, created.pool);
    EXPECT_EQ(info.root, created.root.id);
    ASSERT_EQ(info.puddles.size(), 2u);
    EXPECT_EQ(errc_of([&] { client(kEve).open_pool("sensors"); }), Errc::permission_denied);
    EXPECT_EQ(errc_of([&] { alice.open_pool("nope"); }), Errc::unknown_pool);
    EXPECT_EQ(errc_of([&] { alice.free_puddle(created.root.id); }), Errc::permission_denied);
    alice.free_puddle(extra.id);
    EXPECT_EQ(alice.open_pool("sensors").puddles.size(), 1u);

    auto map = make_reference_map("node", {{8, alloc::type_id_of("node")}});
    EXPECT_TRUE(alice.reg_ref_map(map));
    EXPECT_FALSE(alice.reg_ref_map(map));
    auto other = make_reference_map("node", {{16, kOpaqueTarget}});
    EXPECT_EQ(errc_of([&] { alice.reg_ref_map(other); }), Errc::conflicting_map);
    EXPECT_EQ(alice.list_ref_maps().size(), 1u);
}

TEST_F(DaemonFixture, RegistrySurvivesRestart)
{
    start();
    PuddleId a, b;
    {
        auto& alice = client(kAlice);
        a = alice.new_puddle(64 << 10, PuddleKind::data, {}, 0644).id;
        b = alice.create_pool("p", 64 << 10, 0644).root.id;
        alice.chmod(a, kAlice.uid, kAlice.gid, 0600);
        alice.reg_ref_map(make_reference_map("t", {{0, kOpaqueTarget}}));
    }
    clients.clear();
    d.reset();
    start();
    EXPECT_FALSE(d->recovery().dirty);
    auto& bob = client(kBob);
    EXPECT_EQ(errc_of([&] { bob.exist_puddle(a, false); }), Errc::permission_denied);
    EXPECT_EQ(bob.open_pool("p").root, b);
    EXPECT_EQ(bob.list_ref_maps().size(), 1u);
    EXPECT_EQ(bob.status().puddles, 2u);
}

TEST_F(DaemonFixture, JournalCompactionKeepsState)
{
    auto o = options();
    o.journal_capacity = 16 << 10;
    d = std::make_unique<Daemon>(o);
    auto& alice = client(kAlice);
    std::vector<PuddleId> ids;
    for (int i = 0; i < 8; ++i) {
        ids.push_back(alice.new_puddle(4096, PuddleKind::data).id);
    }
    std::mt19937 rng(5);
    for (int i = 0; i < 600; ++i) {
        alice.chmod(ids[rng() % ids.size()], kAlice.uid, kAlice.gid, (rng() & 1) ? 0644 : 0600);
    }
    alice.chmod(ids[0], kAlice.uid, kAlice.gid, 0644);
    alice.chmod(ids[1], kAlice.uid, kAlice.gid, 0600);
    alice.free_puddle(ids[2]);
    auto gen = alice.status().journal_generation;
    EXPECT_GT(gen, 1u);
    clients.clear();
    d.reset();
    d = std::make_unique<Daemon>(o);
    auto& bob = client(kBob);
    EXPECT_NO_THROW(bob.exist_puddle(ids[0], false));
    EXPECT_EQ(errc_of([&] { bob.exist_puddle(ids[1], false); }), Errc::permission_denied);
    EXPECT_EQ(errc_of([&] { bob.exist_puddle(ids[2], false); }), Errc::unknown_uuid);
    EXPECT_EQ(bob.status().puddles, 7u);
    std::size_t journals = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir.path())) {
        journals += Journal::is_journal_file(e.path());
    }
    EXPECT_EQ(journals, 1u);
}

TEST_F(DaemonFixture, OrphanFilesCollected)
{
    start();
    auto keep = client(kAlice).new_puddle(4096, PuddleKind::data).id;
    clients.clear();
    d.reset();
    create_puddle(dir.path(), 4096, PuddleKind::data, &platform);
    EXPECT_EQ(pud_files(), 2u);
    start();
    EXPECT_EQ(d->recovery().orphans_removed, 1u);
    EXPECT_EQ(d->recovery().lost_puddles, 0u);
    EXPECT_EQ(pud_files(), 1u);
    EXPECT_TRUE(std::filesystem::exists(puddle_file(dir.path(), keep)));
}

TEST_F(DaemonFixture, MalformedFrameClosesConnection)
{
    start();
    auto sock = dir / "d.sock";
    Server server(sock);
    std::thread t([&] { server.run(*d); });
    {
        SocketLink link(sock);
        Bytes junk(16);
        put<std::uint32_t>(junk.data(), 16);
        put<std::uint16_t>(junk.data() + 4, 999);
        ASSERT_EQ(::write(link.fd(), junk.data(), junk.size()), 16);
        wire::Frame resp;
        ASSERT_TRUE(wire::recv_frame(link.fd(), resp));
        EXPECT_EQ(resp.errc(), Errc::protocol_error);
        EXPECT_FALSE(wire::recv_frame(link.fd(), resp));
    }
    {
        auto c = Client::connect(sock);
        for (int i = 0; i < 10000; ++i) {
            auto b = u64_bytes(i);
            ASSERT_EQ(c->ping(b), b);
        }
        c->shutdown();
    }
    t.join();
}

TEST_F(DaemonFixture, CapabilitiesCrossTheSocket)
{
    start();
    auto sock = dir / "d.sock";
    Server server(sock);
    std::thread t([&] { server.run(*d); });
    {
        auto c = Client::connect(sock);
        auto created = c->create_pool("over-socket", 64 << 10);
        auto dom = adopt(created.root);
        dom->store_value<std::uint64_t>(4096, 0xfeed);
        dom->persist(4096, 8);
        auto again = c->exist_puddle(created.root.id, false);
        auto ro = adopt(again);
        EXPECT_EQ(load<std::uint64_t>(ro->data() + 4096), 0xfeedu);
        EXPECT_EQ(c->status().pools, 1u);
    }
    server.stop();
    t.join();
}

TEST_F(DaemonFixture, NoFrameAnsweredBeforeRecovery)
{
    // Leave a dirty shutdown behind so the next start runs recovery.
    start();
    client(kAlice).new_puddle(4096, PuddleKind::data);
    clients.clear();
    d->abandon();
    d.reset();

    auto sock = dir / "d.sock";
    Server server(sock);
    std::atomic<bool> recovered{false};
    std::atomic<bool> answered_early{false};
    std::atomic<bool> answered{false};
    std::thread client_thread([&] {
        auto c = Client::connect(sock);
        c->ping();
        answered_early = !recovered.load();
        answered = true;
    });
    auto o = options();
    o.recovery_hook = [&] { std::this_thread::sleep_for(std::chrono::milliseconds(200)); };
    auto daemon = std::make_unique<Daemon>(o);
    recovered = true;
    EXPECT_TRUE(daemon->recovery().ran);
    std::thread serve([&] { server.run(*daemon); });
    client_thread.join();
    server.stop();
    serve.join();
    EXPECT_TRUE(answered);
    EXPECT_FALSE(answered_early);
}

// Crash at every persistence event of a scripted session; after restart no
// puddle is lost, no orphan file remains, and every capability handed out
// before the crash is still registered.
TEST_F(DaemonFixture, DaemonCrashSweepLeavesNoOrphans)
{
    auto script = [&](std::vector<PuddleId>& granted) {
        auto& alice = client(kAlice);
        auto pool = alice.create_pool("p", 64 << 10);
        if (!platform.crashed()) {
            granted.push_back(pool.root.id);
        }
        for (int i = 0; i < 3; ++i) {
            auto cap = alice.new_puddle(8192, PuddleKind::data, pool.pool);
            if (!platform.crashed()) {
                granted.push_back(cap.id);
            }
        }
        auto tmp = alice.new_puddle(4096, PuddleKind::data);
        alice.chmod(tmp.id, kAlice.uid, kAlice.gid, 0644);
        alice.free_puddle(tmp.id);
        auto ls = alice.new_puddle(8192, PuddleKind::log_space);
        // A registered log space of a dead client is released by recovery,
        // so it is not part of the granted set.
        alice.reg_log_space(ls.id);
    };

    // Count the events of a full run.
    std::uint64_t total = 0;
    {
        start();
        auto before = platform.events();
        std::vector<PuddleId> g;
        script(g);
        total = platform.events() - before;
        clients.clear();
        d.reset();
        std::filesystem::remove_all(dir.path());
        std::filesystem::create_directories(dir.path());
    }
    ASSERT_GT(total, 20u);

    for (std::uint64_t k = 0; k <= total; ++k) {
        start();
        platform.arm_crash(platform.events() + k);
        std::vector<PuddleId> granted;
        script(granted);
        crash_restart();
        const auto& rep = d->recovery();
        ASSERT_EQ(rep.lost_puddles, 0u) << "crash at event " << k;
        d->inspect([&](const Registry& reg) {
            for (const auto& id : granted) {
                auto* p = reg.puddle(id);
                EXPECT_TRUE(p != nullptr && p->alive()) << "crash at event " << k;
            }
            std::size_t alive = 0;
            for (const auto& [id, p] : reg.puddles()) {
                alive += p.alive();
            }
            EXPECT_EQ(alive, pud_files()) << "crash at event " << k;
            return 0;
        });
        clients.clear();
        d.reset();
        std::filesystem::remove_all(dir.path());
        std::filesystem::create_directories(dir.path());
    }
}

// ---------------------------------------------------------------------------
// Recovery

namespace {

struct LogWriter {
    std::unique_ptr<pmem::PersistentDomain> space_dom;
    std::unique_ptr<pmem::PersistentDomain> log_dom;
    std::unique_ptr<logging::Log> log;
    PuddleId space;
    PuddleId log_id;
};

} // namespace

class RecoveryFixture : public DaemonFixture {
protected:
    LogWriter make_writer(Client& c)
    {
        LogWriter w;
        auto s = c.new_puddle(4096, PuddleKind::log_space);
        auto l = c.new_puddle(64 << 10, PuddleKind::log);
        w.space = s.id;
        w.log_id = l.id;
        w.space_dom = adopt(s);
        w.log_dom = adopt(l);
        logging::LogSpace(*w.space_dom).add(l.id, logging::LogRole::head);
        c.reg_log_space(s.id);
        w.log = std::make_unique<logging::Log>(*w.log_dom);
        return w;
    }

    /// Pool with one data puddle; returns its mapping and assigned base.
    std::pair<std::unique_ptr<pmem::PersistentDomain>, std::uint64_t> make_pool(Client& c, const std::string& name,
                                                                                std::uint16_t mode = 0600)
    {
        auto created = c.create_pool(name, 64 << 10, mode);
        auto base = created.root.assigned;
        return {adopt(created.root), base};
    }

    static constexpr std::size_t kSlot = 8192; // inside the heap, clear of the allocator
};

TEST_F(RecoveryFixture, UndoRolledBackAfterStage1Crash)
{
    start();
    auto& alice = client(kAlice);
    auto [data, base] = make_pool(alice, "p");
    data->store_value<std::uint64_t>(kSlot, 111);
    data->persist(kSlot, 8);
    auto w = make_writer(alice);
    w.log->set_range(0, 2);
    w.log->append(base + kSlot, u64_bytes(111), logging::kUndoSeq, logging::kBackward);
    data->store_value<std::uint64_t>(kSlot, 222);
    data->persist(kSlot, 8);
    w = {};
    data.reset();
    crash_restart();

    const auto& rep = d->recovery();
    EXPECT_TRUE(rep.dirty);
    EXPECT_EQ(rep.logs_replayed, 1u);
    EXPECT_EQ(rep.entries_applied, 1u);
    auto cap = client(kAlice).open_pool("p");
    auto root = client(kAlice).exist_puddle(cap.root, false);
    auto ro = adopt(root);
    EXPECT_EQ(load<std::uint64_t>(ro->data() + kSlot), 111u);
    // The dead client's log space and logs are released.
    EXPECT_EQ(client(kAlice).status().log_spaces, 0u);
    EXPECT_EQ(pud_files(), 1u);
}

TEST_F(RecoveryFixture, RedoRolledForwardAfterStage2Crash)
{
    start();
    auto& alice = client(kAlice);
    auto [data, base] = make_pool(alice, "p");
    auto w = make_writer(alice);
    w.log->set_range(0, 2);
    w.log->append(base + kSlot, u64_bytes(0), logging::kUndoSeq, logging::kBackward);
    w.log->append(base + kSlot + 8, u64_bytes(7), logging::kRedoSeq, 0);
    data->store_value<std::uint64_t>(kSlot, 5);
    data->persist(kSlot, 8);
    w.log->set_range(2, 4);
    w = {};
    data.reset();
    crash_restart();

    auto root = client(kAlice).exist_puddle(client(kAlice).open_pool("p").root, false);
    auto ro = adopt(root);
    EXPECT_EQ(load<std::uint64_t>(ro->data() + kSlot), 5u);
    EXPECT_EQ(load<std::uint64_t>(ro->data() + kSlot + 8), 7u);
}

TEST_F(RecoveryFixture, PermissionLostAfterCrashStillRecovers)
{
    start();
    auto& alice = client(kAlice);
    auto [data, base] = make_pool(alice, "p", 0644);
    auto w = make_writer(alice);
    w.log->set_range(0, 2);
    w.log->append(base + kSlot, u64_bytes(0), logging::kUndoSeq, logging::kBackward);
    data->store_value<std::uint64_t>(kSlot, 99);
    data->persist(kSlot, 8);
    w = {};
    data.reset();
    // The writer dies; afterwards its write access is revoked.
    clients.clear();
    auto pool = client(kBob).open_pool("p");
    client(kAlice).chmod(pool.root, kAlice.uid, kAlice.gid, 0444);
    crash_restart();
    EXPECT_EQ(d->recovery().logs_replayed, 1u);
    EXPECT_TRUE(d->recovery().quarantined.empty());
    auto cap = client(kBob).exist_puddle(pool.root, false);
    auto ro = adopt(cap);
    EXPECT_EQ(load<std::uint64_t>(ro->data() + kSlot), 0u);
}

TEST_F(RecoveryFixture, ForeignTargetQuarantinesLog)
{
    start();
    auto& alice = client(kAlice);
    auto& bob = client(kBob);
    auto [victim, vbase] = make_pool(bob, "bobs", 0644);
    victim->store_value<std::uint64_t>(kSlot, 1234);
    victim->persist(kSlot, 8);
    auto w = make_writer(alice);
    w.log->set_range(0, 2);
    w.log->append(vbase + kSlot, u64_bytes(6666), logging::kUndoSeq, logging::kBackward);
    w = {};
    victim.reset();
    crash_restart();

    const auto& rep = d->recovery();
    ASSERT_EQ(rep.quarantined.size(), 1u);
    EXPECT_EQ(rep.logs_replayed, 0u);
    ASSERT_EQ(rep.quarantined_pools.size(), 1u);
    auto info = client(kBob).open_pool("bobs");
    EXPECT_TRUE(info.quarantined);
    auto cap = client(kBob).exist_puddle(info.root, false);
    auto ro = adopt(cap);
    EXPECT_EQ(load<std::uint64_t>(ro->data() + kSlot), 1234u);
    EXPECT_EQ(client(kBob).status().quarantined_pools, std::vector<std::string>{"bobs"});
}

TEST_F(RecoveryFixture, CorruptLogIsNeverApplied)
{
    start();
    auto& alice = client(kAlice);
    auto [data, base] = make_pool(alice, "p");
    data->store_value<std::uint64_t>(kSlot, 5);
    data->persist(kSlot, 8);
    auto w = make_writer(alice);
    w.log->set_range(0, 2);
    auto at = w.log->append(base + kSlot, u64_bytes(1), logging::kUndoSeq, logging::kBackward);
    w.log->append(base + kSlot + 8, u64_bytes(2), logging::kUndoSeq, logging::kBackward);
    // Flip a payload bit of the first entry.
    auto heap = HeaderView(w.log_dom->data()).header_size();
    auto off = heap + logging::kSegmentHeader + at.offset + logging::kEntryHeader;
    auto byte = w.log_dom->data()[off] ^ std::byte{1};
    w.log_dom->store(off, ByteSpan(&byte, 1));
    w.log_dom->persist(off, 1);
    w = {};
    data.reset();
    crash_restart();

    EXPECT_EQ(d->recovery().quarantined.size(), 1u);
    auto root = client(kAlice).exist_puddle(client(kAlice).open_pool("p").root, false);
    auto ro = adopt(root);
    EXPECT_EQ(load<std::uint64_t>(ro->data() + kSlot), 5u);
    EXPECT_EQ(load<std::uint64_t>(ro->data() + kSlot + 8), 0u);
    // The log space stays registered so the evidence survives.
    EXPECT_EQ(client(kAlice).status().log_spaces, 1u);
}

TEST_F(RecoveryFixture, FreedAndReassignedTargetIsQuarantined)
{
    start();
    auto& alice = client(kAlice);
    auto created = alice.create_pool("a", 64 << 10);
    auto extra = alice.new_puddle(64 << 10, PuddleKind::data, created.pool);
    auto target = extra.assigned + kSlot;
    auto w = make_writer(alice);
    w.log->set_range(0, 2);
    w.log->append(target, u64_bytes(1), logging::kUndoSeq, logging::kBackward);
    w.log.reset();
    // Freed by its owner, then the range is handed to someone else.
    alice.free_puddle(extra.id);
    auto bobs = client(kBob).new_puddle(64 << 10, PuddleKind::data);
    ASSERT_EQ(bobs.assigned, extra.assigned);
    auto bd = adopt(bobs);
    bd->store_value<std::uint64_t>(kSlot, 77);
    bd->persist(kSlot, 8);
    bd.reset();
    w = {};
    crash_restart();
    EXPECT_EQ(d->recovery().quarantined.size(), 1u);
    auto cap = client(kBob).exist_puddle(bobs.id, false);
    auto ro = adopt(cap);
    EXPECT_EQ(load<std::uint64_t>(ro->data() + kSlot), 77u);
}
