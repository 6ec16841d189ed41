#include <gtest/gtest.h>

#include <deque>
#include <random>
#include <set>
#include <thread>

#include "runtime_fixture.hpp"

using namespace puddle;
using puddle::testing::errc_of;
using puddle::testing::RuntimeFixture;

namespace {

struct Rec {
    std::uint64_t a, b, c, d;
};

struct ListRoot {
    std::uint64_t head;
    std::uint64_t count;
};

struct Node {
    std::uint64_t next;
    std::uint64_t value;
};

class TxnFixture : public RuntimeFixture {
protected:
    /// Pool "p" whose root object is a zeroed Rec.
    std::uint64_t make_rec_pool()
    {
        auto& p = rt->create_pool("p");
        std::uint64_t r = 0;
        transaction([&] {
            r = p.pm_malloc(sizeof(Rec));
            p.set_root(r);
        });
        return r;
    }

    std::uint64_t reopen_root(const std::string& name = "p") { return rt->open_pool(name).get_root(); }

    void warm_up()
    {
        tx_begin();
        tx_commit();
    }
};

} // namespace

TEST_F(TxnFixture, EmptyTransactionWritesNothing)
{
    make_rec_pool();
    warm_up();
    auto e = platform.events();
    auto calls = daemon_calls();
    tx_begin();
    tx_commit();
    EXPECT_EQ(platform.events(), e);
    EXPECT_EQ(daemon_calls(), calls);
}

TEST_F(TxnFixture, FirstTransactionRegistersLogSpaceOnce)
{
    auto r = make_rec_pool();
    EXPECT_EQ(rt->client().calls(wire::Code::reg_log_space), 1u);
    auto calls = daemon_calls();
    transaction([&] {
        auto& rec = at<Rec>(r);
        tx_add(&rec.a, 8);
        rec.a = 7;
    });
    EXPECT_EQ(daemon_calls(), calls);

    // A second thread needs its own log but not a second log space.
    std::thread([&] {
        transaction([&] {
            auto& rec = at<Rec>(r);
            tx_add(&rec.b, 8);
            rec.b = 8;
        });
    }).join();
    EXPECT_EQ(rt->client().calls(wire::Code::reg_log_space), 1u);
    EXPECT_EQ(daemon_calls(), calls + 1);
}

TEST_F(TxnFixture, IdleContextIsReusedByTheNextThread)
{
    auto r = make_rec_pool();
    auto body = [&] {
        transaction([&] {
            auto& rec = at<Rec>(r);
            tx_add(&rec.c, 8);
            ++rec.c;
        });
    };
    std::thread(body).join();
    auto calls = daemon_calls();
    std::thread(body).join();
    EXPECT_EQ(daemon_calls(), calls);
    EXPECT_EQ(at<Rec>(r).c, 2u);
}

TEST_F(TxnFixture, OperationsOutsideTransactionFail)
{
    auto r = make_rec_pool();
    auto& p = rt->open_pool("p");
    EXPECT_EQ(errc_of([&] { tx_add(rt->ptr<Rec>(r), 8); }), Errc::not_in_tx);
    EXPECT_EQ(errc_of([&] { p.pm_malloc(16); }), Errc::not_in_tx);
    EXPECT_EQ(errc_of([&] { p.pm_free(r); }), Errc::not_in_tx);
    EXPECT_EQ(errc_of([&] { tx_commit(); }), Errc::not_in_tx);
    tx_abort(); // no-op when idle
}

TEST_F(TxnFixture, UnwritableTargetsRejected)
{
    make_rec_pool();
    std::uint64_t local = 0;
    tx_begin();
    EXPECT_EQ(errc_of([&] { tx_add(&local, 8); }), Errc::unwritable_range);
    EXPECT_EQ(errc_of([&] { tx_redo_set(&local, std::uint64_t{1}); }), Errc::unwritable_range);
    tx_abort();
}

TEST_F(TxnFixture, AbortRestoresPersistentAndVolatile)
{
    auto r = make_rec_pool();
    auto& rec = at<Rec>(r);
    rec = {};
    int local = 1;
    tx_begin();
    tx_add(&rec, sizeof(rec));
    rec.a = 11;
    rec.d = 44;
    tx_add_volatile(&local, sizeof(local));
    local = 2;
    tx_add(&rec.a, 8);
    rec.a = 12;
    tx_redo_set(&rec.b, std::uint64_t{99});
    tx_abort();
    EXPECT_EQ(local, 1);
    EXPECT_EQ(rec.a, 0u);
    EXPECT_EQ(rec.b, 0u);
    EXPECT_EQ(rec.d, 0u);
    EXPECT_EQ(rt->tx().state(), TxState::idle);
    EXPECT_TRUE(rt->tx().log()->empty());
}

TEST_F(TxnFixture, TransactionHelperAbortsOnException)
{
    auto r = make_rec_pool();
    EXPECT_THROW(transaction([&] {
                     auto& rec = at<Rec>(r);
                     tx_add(&rec.a, 8);
                     rec.a = 5;
                     throw std::runtime_error("boom");
                 }),
                 std::runtime_error);
    EXPECT_EQ(at<Rec>(r).a, 0u);
}

TEST_F(TxnFixture, RedoIsInvisibleUntilCommit)
{
    auto r = make_rec_pool();
    auto& rec = at<Rec>(r);
    tx_begin();
    tx_redo_set(&rec.c, std::uint64_t{9});
    EXPECT_EQ(rec.c, 0u);
    EXPECT_EQ(rt->tx().entries(), 1u);
    tx_commit();
    EXPECT_EQ(rec.c, 9u);
}

TEST_F(TxnFixture, NestingFlattensIntoOuterTransaction)
{
    auto r = make_rec_pool();
    auto& rec = at<Rec>(r);
    tx_begin();
    tx_add(&rec.a, 8);
    rec.a = 5;
    tx_begin();
    tx_add(&rec.b, 8);
    rec.b = 6;
    tx_commit();
    EXPECT_EQ(rt->tx().depth(), 1);
    EXPECT_FALSE(rt->tx().log()->empty());
    tx_abort();
    EXPECT_EQ(rec.a, 0u);
    EXPECT_EQ(rec.b, 0u);

    tx_begin();
    tx_begin();
    tx_add(&rec.b, 8);
    rec.b = 6;
    tx_commit();
    tx_commit();
    EXPECT_EQ(rt->tx().depth(), 0);
    crash_restart();
    EXPECT_EQ(at<Rec>(reopen_root()).b, 6u);
}

TEST_F(TxnFixture, CommittedStateSurvivesPowerLoss)
{
    auto r = make_rec_pool();
    transaction([&] {
        auto& rec = at<Rec>(r);
        tx_add(&rec, sizeof(rec));
        rec.a = 1;
        rec.b = 2;
        tx_redo_set(&rec.c, std::uint64_t{3});
    });
    crash_restart();
    auto& rec = at<Rec>(reopen_root());
    EXPECT_EQ(rec.a, 1u);
    EXPECT_EQ(rec.b, 2u);
    EXPECT_EQ(rec.c, 3u);
}

// Three writes mixing undo and redo; every crash point must leave all old or
// all new values, and a crash after commit returned must leave the new ones.
TEST_F(TxnFixture, HybridTransactionAtomicAtEveryCrashPoint)
{
    auto r = make_rec_pool();
    auto run = [&](std::uint64_t root, std::uint64_t v) {
        tx_begin();
        auto& rec = at<Rec>(root);
        tx_add(&rec.a, 8);
        rec.a = v;
        tx_redo_set(&rec.c, v);
        tx_add(&rec.b, 8);
        rec.b = v;
        tx_commit();
    };
    warm_up();
    auto e0 = platform.events();
    run(r, 1);
    const auto n = platform.events() - e0;
    ASSERT_GT(n, 10u);

    std::uint64_t v = 1;
    std::size_t rolled_back = 0;
    std::size_t rolled_forward = 0;
    for (std::uint64_t k = 0; k <= n + 1; ++k) {
        auto root = reopen_root();
        warm_up();
        auto start = platform.events();
        platform.arm_crash(start + k);
        run(root, v + 1);
        bool crashed = platform.crashed();
        if (crashed) {
            crash_restart();
            root = reopen_root();
        } else {
            platform.disarm();
        }
        const auto& rec = at<Rec>(root);
        SCOPED_TRACE(k);
        ASSERT_EQ(rec.a, rec.b);
        ASSERT_EQ(rec.a, rec.c);
        ASSERT_TRUE(rec.a == v || rec.a == v + 1);
        if (k >= n) {
            ASSERT_EQ(rec.a, v + 1);
        }
        (rec.a == v ? rolled_back : rolled_forward) += 1;
        v = rec.a;
    }
    EXPECT_GT(rolled_back, 0u);
    EXPECT_GT(rolled_forward, 1u);
}

TEST_F(TxnFixture, CommitStagesAreOrdered)
{
    auto r = make_rec_pool();
    warm_up();
    auto& rec = at<Rec>(r);
    const auto data = rt->space().find(r)->domain->id();
    const auto head = rt->tx().log()->head().id();
    const auto off_a = r - rt->space().find(r)->range.start;
    const auto off_c = off_a + 16;

    platform.record_events(true);
    tx_begin();
    tx_add(&rec.a, 8);
    rec.a = 3;
    tx_redo_set(&rec.c, std::uint64_t{3});
    tx_commit();
    platform.record_events(false);
    auto ev = platform.recorded_events();

    auto covers = [](const pmem::Event& e, std::uint64_t off) {
        return e.offset <= off && off < e.offset + e.length;
    };
    std::ptrdiff_t undo_flush = -1, data_fence = -1, stage1 = -1, redo_store = -1, redo_fence = -1, stage3 = -1;
    for (std::size_t i = 0; i < ev.size(); ++i) {
        const auto& e = ev[i];
        auto at_i = static_cast<std::ptrdiff_t>(i);
        if (e.domain == data && e.kind == pmem::EventKind::flush && covers(e, off_a) && undo_flush < 0) {
            undo_flush = at_i;
        } else if (e.domain == data && e.kind == pmem::EventKind::fence && undo_flush >= 0 && data_fence < 0) {
            data_fence = at_i;
        } else if (e.domain == head && e.kind == pmem::EventKind::store && data_fence >= 0 && stage1 < 0) {
            stage1 = at_i;
        } else if (e.domain == data && e.kind == pmem::EventKind::store && covers(e, off_c)) {
            redo_store = at_i;
        } else if (e.domain == data && e.kind == pmem::EventKind::fence && redo_store >= 0 && redo_fence < 0) {
            redo_fence = at_i;
        } else if (e.domain == head && e.kind == pmem::EventKind::store && redo_fence >= 0 && stage3 < 0) {
            stage3 = at_i;
        }
    }
    ASSERT_GE(undo_flush, 0);
    EXPECT_LT(undo_flush, data_fence);
    EXPECT_LT(data_fence, stage1);
    EXPECT_LT(stage1, redo_store);
    EXPECT_LT(redo_store, redo_fence);
    EXPECT_LT(redo_fence, stage3);
}

// Linked list against a deque oracle under random crashes.  After recovery
// the list equals the oracle before or after the interrupted operation, and
// the pool holds exactly the live nodes plus the root.
TEST_F(TxnFixture, LinkedListMatchesOracleUnderCrashes)
{
    {
        auto& p = rt->create_pool("list");
        transaction([&] { p.set_root(p.pm_malloc(sizeof(ListRoot))); });
    }
    std::deque<std::uint64_t> oracle;
    std::mt19937_64 rng(42);
    int crashes = 0;
    int interrupted = 0;

    auto walk = [&](Pool& p) {
        std::deque<std::uint64_t> out;
        const auto& root = at<ListRoot>(p.get_root());
        for (auto n = root.head; n != 0; n = at<Node>(n).next) {
            out.push_back(at<Node>(n).value);
        }
        EXPECT_EQ(root.count, out.size());
        EXPECT_EQ(p.objects().size(), out.size() + 1);
        return out;
    };

    for (int step = 0; step < 120; ++step) {
        auto& p = rt->open_pool("list");
        warm_up();
        const bool push = oracle.empty() || rng() % 3 != 0;
        const auto value = rng();
        auto next = oracle;
        if (push) {
            next.push_front(value);
        } else {
            next.pop_front();
        }
        const bool crash = rng() % 2 == 0;
        if (crash) {
            platform.arm_crash(platform.events() + rng() % 50);
        }
        transaction([&] {
            auto& root = at<ListRoot>(p.get_root());
            tx_add(&root, sizeof(root));
            if (push) {
                auto n = p.pm_malloc(sizeof(Node));
                at<Node>(n) = {root.head, value};
                root.head = n;
                ++root.count;
            } else {
                auto n = root.head;
                root.head = at<Node>(n).next;
                --root.count;
                p.pm_free(n);
            }
        });
        const bool crashed = platform.crashed();
        if (crashed) {
            ++crashes;
            crash_restart();
        } else {
            platform.disarm();
        }
        auto got = walk(rt->open_pool("list"));
        SCOPED_TRACE(step);
        ASSERT_TRUE(got == oracle || got == next);
        interrupted += crashed && got == oracle;
        oracle = got;
    }
    EXPECT_GT(crashes, 40);
    EXPECT_GT(interrupted, 5);
}

TEST_F(TxnFixture, AbortedAllocationsLeaveNoObjects)
{
    auto& p = rt->create_pool("a");
    transaction([&] { p.set_root(p.pm_malloc(64)); });
    tx_begin();
    for (int i = 0; i < 50; ++i) {
        p.pm_malloc(static_cast<std::size_t>(8 << (i % 10)));
    }
    tx_abort();
    EXPECT_EQ(p.objects().size(), 1u);
    // The allocator stays usable after the rollback.
    transaction([&] {
        for (int i = 0; i < 50; ++i) {
            p.pm_malloc(static_cast<std::size_t>(8 << (i % 10)));
        }
    });
    EXPECT_EQ(p.objects().size(), 51u);
}

TEST_F(TxnFixture, LargeAllocationGrowsPool)
{
    auto& p = rt->create_pool("big");
    std::uint64_t a = 0;
    transaction([&] { a = p.pm_malloc(1 << 20); });
    EXPECT_EQ(p.puddles().size(), 2u);
    auto* m = rt->space().find(a);
    ASSERT_NE(m, nullptr);
    EXPECT_NE(m->id, p.root_puddle());
    EXPECT_EQ(errc_of([&] { transaction([&] { p.pm_free(a + 8); }); }), Errc::invalid_address);
    EXPECT_EQ(errc_of([&] { transaction([&] { p.pm_free(12345); }); }), Errc::invalid_address);
    transaction([&] { p.pm_free(a); });
    EXPECT_EQ(p.objects().size(), 0u);
}

TEST_F(TxnFixture, RootSemantics)
{
    auto& p = rt->create_pool("r");
    EXPECT_EQ(p.get_root(), 0u);
    std::uint64_t first = 0;
    std::uint64_t other = 0;
    transaction([&] {
        first = p.pm_malloc(48);
        other = p.pm_malloc(1 << 20);
    });
    EXPECT_EQ(first, p.root_address());
    std::uint64_t local = 0;
    EXPECT_EQ(errc_of([&] { p.set_root(reinterpret_cast<std::uint64_t>(&local)); }), Errc::not_in_root_puddle);
    EXPECT_EQ(errc_of([&] { p.set_root(other); }), Errc::not_in_root_puddle);
    p.set_root(first);
    EXPECT_EQ(p.get_root(), first);
    crash_restart();
    EXPECT_EQ(rt->open_pool("r").get_root(), first);
    rt->open_pool("r").set_root(0);
    EXPECT_EQ(rt->open_pool("r").get_root(), 0u);
}

TEST_F(TxnFixture, ConcurrentTransactionsOnOnePool)
{
    auto& p = rt->create_pool("mt");
    constexpr int kThreads = 4;
    constexpr int kIters = 200;
    std::uint64_t counters = 0;
    transaction([&] { counters = p.pm_malloc(sizeof(std::uint64_t) * kThreads); });
    std::vector<std::thread> ts;
    for (int t = 0; t < kThreads; ++t) {
        ts.emplace_back([&, t] {
            for (int i = 0; i < kIters; ++i) {
                transaction([&] {
                    auto* c = rt->ptr<std::uint64_t>(counters) + t;
                    tx_add(c, 8);
                    ++*c;
                    if (i % 10 == 0) {
                        p.pm_malloc(32);
                    }
                });
            }
        });
    }
    for (auto& t : ts) {
        t.join();
    }
    crash_restart();
    auto& q = rt->open_pool("mt");
    for (int t = 0; t < kThreads; ++t) {
        EXPECT_EQ(rt->ptr<std::uint64_t>(counters)[t], static_cast<std::uint64_t>(kIters));
    }
    EXPECT_EQ(q.objects().size(), 1u + kThreads * kIters / 10);
}
