#include <gtest/gtest.h>

#include <map>
#include <random>

#include "buddy_oracle.hpp"
#include "puddle/alloc.hpp"
#include "support.hpp"

using namespace puddle;
using namespace puddle::alloc;
using puddle::testing::BuddyOracle;
using puddle::testing::errc_of;
using puddle::testing::TempDir;

namespace {

class HeapFixture : public ::testing::Test {
protected:
    PuddleHeap& make(std::uint64_t heap)
    {
        created = create_puddle(dir.path(), heap, PuddleKind::data, &platform);
        PuddleHeap::format(*created.domain);
        h = std::make_unique<PuddleHeap>(created.domain->data());
        return *h;
    }

    void expect_conserved() const
    {
        auto s = h->stats();
        ASSERT_EQ(s.free + s.allocated + s.metadata, s.heap);
    }

    TempDir dir;
    pmem::Platform platform;
    CreatedPuddle created;
    std::unique_ptr<PuddleHeap> h;
    NullSink sink;
};

constexpr TypeId kA = type_id_of("test::A");
constexpr TypeId kB = type_id_of("test::B");

} // namespace

TEST(TypeIdTest, StableFnv1a)
{
    // Published FNV-1a 64 test vectors.
    EXPECT_EQ(type_id_of(""), 0xcbf29ce484222325ull);
    EXPECT_EQ(type_id_of("a"), 0xaf63dc4c8601ec8cull);
    EXPECT_EQ(type_id_of("foobar"), 0x85944171f73967e8ull);
    static_assert(type_id_of("x") == type_id_of("x"));
}

TEST(GeometryTest, TableFitsAfterData)
{
    for (std::uint64_t heap : {4096ull, 8192ull, 65536ull, 2ull << 20, 64ull << 20}) {
        auto g = geometry_for(heap);
        EXPECT_LE(g.data_units * kUnit, g.table_offset);
        EXPECT_EQ(g.table_offset + g.data_units * kTableEntry, heap);
        EXPECT_LE(g.bitmap_bytes + hdr::fixed_end, header_size_for(heap));
        EXPECT_LE(1ull << g.max_order, g.data_units);
        EXPECT_GT(2ull << g.max_order, g.data_units);
    }
    EXPECT_EQ(slab_class_for(8), 0u);
    EXPECT_EQ(slab_class_for(9), 1u);
    EXPECT_EQ(slab_class_for(255), 5u);
    EXPECT_EQ(slab_class_for(256), std::nullopt);
    EXPECT_EQ(order_for(256), 0u);
    EXPECT_EQ(order_for(257), 1u);
    EXPECT_EQ(order_for(4096), 4u);
}

TEST_F(HeapFixture, SmallGoesToSlabLargeToBuddy)
{
    auto& heap = make(2 << 20);
    auto small = heap.alloc(8, kA, sink);
    ASSERT_TRUE(small);
    EXPECT_EQ(*small, 0u); // first object lands on the root offset
    EXPECT_EQ(heap.object_at(*small)->size, 8u);
    auto big = heap.alloc(4096, kA, sink);
    ASSERT_TRUE(big);
    EXPECT_EQ(heap.object_at(*big)->size, 4096u);
    EXPECT_EQ(*big % 4096, 0u);
    expect_conserved();
}

TEST_F(HeapFixture, FirstObjectAtRootOffset)
{
    auto& heap = make(2 << 20);
    auto off = heap.alloc(1000, kA, sink);
    EXPECT_EQ(*off, kRootOffset);
    EXPECT_EQ(reinterpret_cast<std::uint64_t>(created.domain->data()) + 4096 + *off,
              heap.objects()[0].addr);
}

TEST_F(HeapFixture, FreedHalvesCoalesce)
{
    auto& heap = make(2 << 20);
    BuddyOracle oracle(heap.geometry().data_units);
    auto a = heap.alloc(256, kA, sink);
    auto b = heap.alloc(256, kA, sink);
    oracle.alloc(256, kA);
    oracle.alloc(256, kA);
    EXPECT_EQ(*b, *a + 256);
    EXPECT_EQ(heap.free_blocks(), oracle.free_lists());
    heap.free(*a, sink);
    heap.free(*b, sink);
    oracle.free(*a);
    oracle.free(*b);
    EXPECT_EQ(heap.free_blocks(), oracle.free_lists());
    // Fully coalesced back to the initial decomposition.
    EXPECT_EQ(heap.free_blocks(), BuddyOracle(heap.geometry().data_units).free_lists());
    expect_conserved();
}

TEST_F(HeapFixture, DoubleFreeAndInvalidAddress)
{
    auto& heap = make(2 << 20);
    auto big = *heap.alloc(1024, kA, sink);
    auto small = *heap.alloc(24, kA, sink);
    auto small2 = *heap.alloc(24, kA, sink);
    heap.free(big, sink);
    EXPECT_EQ(errc_of([&] { heap.free(big, sink); }), Errc::double_free);
    heap.free(small, sink);
    EXPECT_EQ(errc_of([&] { heap.free(small, sink); }), Errc::double_free);
    EXPECT_EQ(errc_of([&] { heap.free(small2 + 4, sink); }), Errc::invalid_address);
    EXPECT_EQ(errc_of([&] { heap.free(heap.data_bytes() + 8, sink); }), Errc::invalid_address);
    EXPECT_EQ(errc_of([&] { heap.free(big + 8, sink); }), Errc::invalid_address);
    EXPECT_EQ(errc_of([&] { heap.alloc(0, kA, sink); }), Errc::bad_size);
}

TEST_F(HeapFixture, ObjectsCarryTypes)
{
    auto& heap = make(2 << 20);
    EXPECT_TRUE(heap.objects().empty());
    heap.alloc(16, kA, sink);
    heap.alloc(16, kB, sink);
    heap.alloc(600, kB, sink);
    auto objs = heap.objects();
    ASSERT_EQ(objs.size(), 3u);
    std::multiset<TypeId> types;
    for (auto& o : objs) {
        types.insert(o.type_id);
    }
    EXPECT_EQ(types, (std::multiset<TypeId>{kA, kB, kB}));
    // Per-type slabs: the two 16 B objects sit on different pages.
    EXPECT_NE(objs[0].addr / 4096, objs[1].addr / 4096);
}

TEST_F(HeapFixture, AllocatedObjectsAreZeroed)
{
    auto& heap = make(1 << 20);
    auto off = *heap.alloc(64, kA, sink);
    std::memset(created.domain->data() + 4096 + off, 0xAB, 64);
    heap.free(off, sink);
    auto again = *heap.alloc(64, kA, sink);
    EXPECT_EQ(again, off);
    for (int i = 0; i < 64; ++i) {
        EXPECT_EQ(created.domain->data()[4096 + again + i], std::byte{0});
    }
}

TEST_F(HeapFixture, OutOfSpace)
{
    auto& heap = make(64 << 10);
    std::vector<std::uint64_t> got;
    while (auto off = heap.alloc(4096, kA, sink)) {
        got.push_back(*off);
    }
    EXPECT_FALSE(heap.alloc(4096, kA, sink));
    EXPECT_EQ(got.size(), heap.data_bytes() / 4096);
    expect_conserved();
}

TEST_F(HeapFixture, SurvivesReopen)
{
    auto& heap = make(1 << 20);
    heap.alloc(100, kA, sink);
    heap.alloc(5000, kB, sink);
    created.domain->persist(0, created.domain->capacity());
    auto objs = heap.objects();
    auto old_base = reinterpret_cast<std::uint64_t>(heap.base());
    auto path = created.path;
    h.reset();
    created.domain.reset();
    pmem::OpenOptions o;
    o.platform = &platform;
    auto d = pmem::PersistentDomain::open(path, 0, o);
    PuddleHeap again(d->data());
    auto after = again.objects();
    ASSERT_EQ(after.size(), objs.size());
    for (std::size_t i = 0; i < objs.size(); ++i) {
        EXPECT_EQ(after[i].size, objs[i].size);
        EXPECT_EQ(after[i].type_id, objs[i].type_id);
        EXPECT_EQ(after[i].addr - reinterpret_cast<std::uint64_t>(d->data()),
                  objs[i].addr - old_base);
    }
}

TEST_F(HeapFixture, CorruptTableDetected)
{
    auto& heap = make(1 << 20);
    heap.alloc(1000, kA, sink);
    auto* table = created.domain->data() + 4096 + heap.geometry().table_offset;
    table[0] = std::byte{7};
    EXPECT_EQ(errc_of([&] { heap.objects(); }), Errc::corrupt_metadata);
}

// Randomized trace against the shadow live set and the reference simulator.
TEST_F(HeapFixture, RandomTraceMatchesOracles)
{
    auto& heap = make(16 << 20);
    BuddyOracle oracle(heap.geometry().data_units);
    std::mt19937_64 rng(2024);
    std::map<std::uint64_t, std::pair<std::uint64_t, TypeId>> live; // off -> (size, type)
    auto base = reinterpret_cast<std::uint64_t>(heap.base()) + heap.heap_start();
    for (int op = 0; op < 10000; ++op) {
        if (live.empty() || rng() % 100 < 55) {
            std::uint64_t size = rng() % 4 == 0 ? 1 + rng() % (64 << 10) : 1 + rng() % 300;
            TypeId type = rng() % 2 ? kA : kB;
            auto got = heap.alloc(size, type, sink);
            auto want = oracle.alloc(size, type);
            ASSERT_EQ(got, want) << "op " << op;
            if (got) {
                live[*got] = {size, type};
            }
        } else {
            auto it = std::next(live.begin(), static_cast<long>(rng() % live.size()));
            heap.free(it->first, sink);
            oracle.free(it->first);
            live.erase(it);
        }
        expect_conserved();
        ASSERT_EQ(heap.stats().allocated, oracle.live_bytes());
        if (op % 500 == 0) {
            ASSERT_EQ(heap.free_blocks(), oracle.free_lists());
            auto objs = heap.objects();
            ASSERT_EQ(objs.size(), live.size());
            auto it = live.begin();
            for (const auto& o : objs) {
                ASSERT_EQ(o.addr - base, it->first);
                ASSERT_EQ(o.type_id, it->second.second);
                ASSERT_GE(o.size, it->second.first);
                ++it;
            }
        }
    }
    EXPECT_EQ(heap.free_blocks(), oracle.free_lists());
}
