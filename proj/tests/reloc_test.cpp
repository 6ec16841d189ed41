#include <gtest/gtest.h>

#include <map>
#include <random>
#include <set>

#include "runtime_fixture.hpp"

using namespace puddle;
using puddle::testing::errc_of;
using puddle::testing::RuntimeFixture;

namespace {

struct GNode {
    std::uint64_t next;
    std::uint64_t peer;
    std::uint64_t id;
    std::uint64_t raw; // holds an address but is not a reference slot
    std::byte pad[2016];
};
static_assert(sizeof(GNode) == 2048);

constexpr alloc::TypeId kGNode = alloc::type_id_of("GNode");
constexpr std::size_t kNodes = 300;

struct Shape {
    std::uint64_t next = 0;
    std::uint64_t peer = 0;
    std::uint64_t raw = 0;
    auto operator<=>(const Shape&) const = default;
};

class RelocFixture : public RuntimeFixture {
protected:
    void register_types()
    {
        ReferenceMap m;
        m.type_id = kGNode;
        m.name = "GNode";
        m.slots = {{0, kGNode}, {8, kGNode}};
        rt->register_type(m);
    }

    /// Ring of nodes with random peers spread over several puddles.  The
    /// root node has id 0.
    void build(const std::string& name)
    {
        register_types();
        auto& p = rt->create_pool(name);
        std::vector<std::uint64_t> addrs;
        transaction([&] {
            for (std::size_t i = 0; i < kNodes; ++i) {
                addrs.push_back(p.pm_malloc(sizeof(GNode), kGNode));
            }
            p.set_root(addrs[0]);
        });
        std::mt19937_64 rng(7);
        transaction([&] {
            for (std::size_t i = 0; i < kNodes; ++i) {
                auto& n = at<GNode>(addrs[i]);
                tx_add(&n, 32);
                n.id = i;
                n.next = addrs[(i + 1) % kNodes];
                n.peer = rng() % 4 == 0 ? 0 : addrs[rng() % kNodes];
                n.raw = addrs[rng() % kNodes];
            }
        });
        ASSERT_GT(p.puddles().size(), 2u);
    }

    /// id -> (next id, peer id or ~0, raw value), following references only.
    /// Checks that every reference lands on a node of `pool`.
    std::map<std::uint64_t, Shape> shape(const std::string& name)
    {
        auto& p = rt->open_pool(name);
        auto ids = p.puddles();
        std::set<PuddleId> mine(ids.begin(), ids.end());
        auto id_of = [&](std::uint64_t a) -> std::uint64_t {
            if (a == 0) {
                return ~0ull;
            }
            auto* n = rt->ptr<GNode>(a);
            auto* m = rt->space().find(a);
            EXPECT_TRUE(m != nullptr && mine.count(m->id) == 1);
            return n->id;
        };
        std::map<std::uint64_t, Shape> out;
        std::vector<std::uint64_t> todo{p.get_root()};
        std::set<std::uint64_t> seen;
        while (!todo.empty()) {
            auto a = todo.back();
            todo.pop_back();
            if (a == 0 || !seen.insert(a).second) {
                continue;
            }
            auto& n = *rt->ptr<GNode>(a);
            out[n.id] = {id_of(n.next), id_of(n.peer), n.raw};
            todo.push_back(n.next);
            todo.push_back(n.peer);
        }
        return out;
    }

    std::filesystem::path bundle_path() const { return dir.path() / "g.pexp"; }

    void export_original()
    {
        export_pool_to(rt->client(), "g", bundle_path());
    }

    /// Imports while the original still holds its addresses, so the copy moves.
    ImportResult import_copy(const std::string& name)
    {
        auto r = import_bundle_from(rt->client(), bundle_path(), name);
        EXPECT_TRUE(r.relocated);
        return r;
    }
};

class FaultFixture : public RelocFixture {
protected:
    void SetUp() override
    {
        fault_handler = true;
        RelocFixture::SetUp();
    }
};

} // namespace

TEST_F(RelocFixture, RelocatedCopyIsIsomorphic)
{
    build("g");
    auto before = shape("g");
    ASSERT_EQ(before.size(), kNodes);
    export_original();
    import_copy("g2");
    restart();
    EXPECT_EQ(shape("g2"), before);
    EXPECT_EQ(shape("g"), before);
    EXPECT_EQ(rt->client().status().frontier, 0u);
}

TEST_F(RelocFixture, RewriteIsLazyPerPuddle)
{
    build("g");
    export_original();
    auto imported = import_copy("g2");
    restart();
    EXPECT_EQ(rt->client().status().frontier, imported.puddles);
    auto& p = rt->open_pool("g2");
    auto st = rt->reloc_stats();
    EXPECT_EQ(st.puddles_mapped, 1u);
    EXPECT_EQ(st.puddles_rewritten, 1u);
    EXPECT_EQ(rt->client().status().frontier, imported.puddles - 1);

    // Following one reference maps at most one more puddle.
    auto next = rt->ptr<GNode>(p.get_root())->next;
    rt->resolve(next);
    EXPECT_LE(rt->reloc_stats().puddles_rewritten, 2u);

    shape("g2");
    st = rt->reloc_stats();
    EXPECT_EQ(st.puddles_rewritten, imported.puddles);
    EXPECT_EQ(st.objects_visited, kNodes);
    EXPECT_EQ(st.slots_visited, 2 * kNodes);
    EXPECT_GT(st.slots_rewritten, kNodes);
    EXPECT_EQ(rt->client().status().frontier, 0u);
}

TEST_F(RelocFixture, UnmovedImportNeedsNoRewrite)
{
    build("g");
    auto before = shape("g");
    export_original();
    // A second data directory has the whole range free, so every puddle
    // keeps its origin.
    puddle::testing::TempDir other;
    rt.reset();
    d.reset();
    {
        daemon::DaemonOptions o;
        o.data_dir = other.path();
        o.platform = &platform;
        d = std::make_unique<daemon::Daemon>(o);
        rt = std::make_unique<Runtime>(Client::local(*d, puddle::testing::kOwner), runtime_options());
    }
    auto r = import_bundle_from(rt->client(), bundle_path(), "g");
    EXPECT_FALSE(r.relocated);
    EXPECT_EQ(shape("g"), before);
    EXPECT_EQ(rt->reloc_stats().puddles_rewritten, 0u);
    rt.reset();
    d.reset();
}

TEST_F(RelocFixture, CrashDuringCascadeResumes)
{
    build("g");
    auto before = shape("g");
    export_original();

    // Event budget of a full cascade.
    import_copy("dry");
    restart();
    auto e0 = platform.events();
    shape("dry");
    const auto n = platform.events() - e0;
    ASSERT_GT(n, 50u);

    std::mt19937_64 rng(3);
    int crashes = 0;
    for (int round = 0; round < 12; ++round) {
        auto name = "c" + std::to_string(round);
        import_copy(name);
        restart();
        platform.arm_crash(platform.events() + rng() % n);
        shape(name);
        if (platform.crashed()) {
            ++crashes;
            crash_restart();
        } else {
            platform.disarm();
        }
        SCOPED_TRACE(round);
        ASSERT_EQ(shape(name), before);
        // Resumed rewrites finish the frontier for this copy.
        for (const auto& id : rt->open_pool(name).puddles()) {
            EXPECT_FALSE(rt->client().lookup_addr(rt->space().get(id)->range.start).pending);
        }
    }
    EXPECT_GT(crashes, 6);
}

TEST_F(RelocFixture, CrashInsideOnePuddleRewriteRollsBack)
{
    build("g");
    auto before = shape("g");
    export_original();
    import_copy("dry");
    restart();
    auto e0 = platform.events();
    rt->open_pool("dry");
    const auto n = platform.events() - e0;

    // Every crash point while the root puddle is rewritten.
    for (std::uint64_t k = 0; k < n; k += std::max<std::uint64_t>(1, n / 40)) {
        auto name = "k" + std::to_string(k);
        import_copy(name);
        restart();
        platform.arm_crash(platform.events() + k);
        rt->open_pool(name);
        ASSERT_TRUE(platform.crashed());
        crash_restart();
        SCOPED_TRACE(k);
        ASSERT_EQ(shape(name), before);
    }
}

TEST_F(RelocFixture, WildAddressRejected)
{
    build("g");
    auto wild = rt->space().base() + rt->space().length() - kPage;
    EXPECT_EQ(errc_of([&] { rt->resolve(wild); }), Errc::wild_address);
}

TEST_F(FaultFixture, DereferenceMapsOnFault)
{
    build("g");
    auto before = shape("g");
    export_original();
    import_copy("g2");
    restart();
    auto& p = rt->open_pool("g2");
    std::map<std::uint64_t, std::uint64_t> next_of;
    auto* n = reinterpret_cast<GNode*>(p.get_root());
    for (std::size_t i = 0; i < kNodes; ++i) {
        auto* nx = reinterpret_cast<GNode*>(n->next);
        next_of[n->id] = nx->id; // plain loads, no resolve
        n = nx;
    }
    for (const auto& [id, s] : before) {
        EXPECT_EQ(next_of[id], s.next);
    }
    auto st = rt->reloc_stats();
    EXPECT_GT(st.faults, 0u);
    EXPECT_EQ(st.faults + 1, st.puddles_mapped);
}

TEST_F(FaultFixture, WildDereferenceStillCrashes)
{
    build("g");
    auto wild = rt->space().base() + rt->space().length() - kPage;
    EXPECT_DEATH({ *reinterpret_cast<volatile std::uint64_t*>(wild) = 1; }, "");
}
