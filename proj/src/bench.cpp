#include "puddle/bench.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <map>
#include <numbers>
#include <ostream>
#include <set>
#include <thread>
#include <unordered_map>

#include "puddle/logging.hpp"

namespace puddle::bench {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

// ---------------------------------------------------------------------------
// Machine

std::unique_ptr<Machine> Machine::local(fs::path data_dir, RuntimeOptions options)
{
    std::unique_ptr<Machine> m(new Machine);
    fs::create_directories(data_dir);
    m->dir_ = std::move(data_dir);
    m->owned_platform_ = std::make_unique<pmem::Platform>();
    m->platform_ = m->owned_platform_.get();
    m->options_ = options;
    m->options_.platform = m->platform_;
    m->boot(false);
    return m;
}

std::unique_ptr<Machine> Machine::remote(const fs::path& socket, RuntimeOptions options)
{
    std::unique_ptr<Machine> m(new Machine);
    m->socket_ = socket;
    m->platform_ = options.platform ? options.platform : &pmem::Platform::global();
    m->options_ = options;
    m->options_.platform = m->platform_;
    m->boot(false);
    return m;
}

Machine::~Machine()
{
    rt_.reset();
    daemon_.reset();
}

void Machine::boot(bool power_cycle)
{
    if (!socket_.empty()) {
        rt_ = std::make_unique<Runtime>(Client::connect(socket_), options_);
        return;
    }
    daemon::DaemonOptions o;
    o.data_dir = dir_;
    o.platform = platform_;
    o.power_cycle = power_cycle;
    daemon_ = std::make_unique<daemon::Daemon>(o);
    logs_replayed_ += daemon_->recovery().logs_replayed;
    entries_applied_ += daemon_->recovery().entries_applied;
    daemon::Credentials creds{static_cast<std::uint32_t>(::getuid()), static_cast<std::uint32_t>(::getgid()),
                              static_cast<std::int32_t>(::getpid())};
    rt_ = std::make_unique<Runtime>(Client::local(*daemon_, creds), options_);
}

void Machine::arm_crash_within(std::uint64_t window, std::mt19937_64& rng)
{
    platform_->arm_crash(platform_->events() + rng() % std::max<std::uint64_t>(window, 1));
}

void Machine::crash_restart(const std::function<void()>& before_boot)
{
    if (!can_crash()) {
        fail(Errc::bad_target, "power loss needs a local machine");
    }
    rt_->abandon();
    rt_.reset();
    daemon_->abandon();
    daemon_.reset();
    platform_->disarm();
    ++crashes_;
    if (before_boot) {
        before_boot();
    }
    boot(true);
}

void Machine::restart()
{
    rt_.reset();
    daemon_.reset();
    boot(false);
}

// ---------------------------------------------------------------------------
// Shared helpers

namespace {

constexpr std::uint64_t kCrashWindow = 64;

std::uint64_t mix64(std::uint64_t x)
{
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
}

std::string unique_name(const std::string& base, std::uint64_t seed)
{
    return base + "-" + std::to_string(seed) + "-" + PuddleId::random().hex().substr(0, 8);
}

template <class T>
T& obj(Runtime& rt, std::uint64_t addr)
{
    return *rt.ptr<T>(addr);
}

/// Per-op latencies of one phase.
class Timer {
public:
    void start() { t0_ = Clock::now(); }
    void stop() { us_.push_back(std::chrono::duration<double, std::micro>(Clock::now() - t0_).count()); }

    PhaseResult result(std::string phase, double seconds)
    {
        PhaseResult r;
        r.phase = std::move(phase);
        r.ops = us_.size();
        r.seconds = seconds;
        if (!us_.empty()) {
            auto pct = [&](double q) {
                auto k = static_cast<std::size_t>(q * static_cast<double>(us_.size() - 1));
                std::nth_element(us_.begin(), us_.begin() + static_cast<std::ptrdiff_t>(k), us_.end());
                return us_[k];
            };
            r.p50_us = pct(0.50);
            r.p99_us = pct(0.99);
        }
        return r;
    }

private:
    Clock::time_point t0_;
    std::vector<double> us_;
};

/// Arms a power loss about every `every` operations and restarts the
/// machine after the operation during which it fired.
class Injector {
public:
    Injector(Machine& m, std::uint64_t every, std::uint64_t seed) : m_(m), every_(every), rng_(seed ^ 0xc4a5) {}

    void before(std::uint64_t i)
    {
        if (every_ != 0 && i % every_ == every_ - 1) {
            m_.arm_crash_within(kCrashWindow, rng_);
        }
    }

    /// True if power was lost (the machine has been restarted).
    bool after()
    {
        if (every_ == 0 || !m_.crashed()) {
            return false;
        }
        m_.crash_restart();
        ++crashes_;
        return true;
    }

    void quiesce() { m_.disarm(); }
    std::uint64_t crashes() const noexcept { return crashes_; }

private:
    Machine& m_;
    std::uint64_t every_;
    std::mt19937_64 rng_;
    std::uint64_t crashes_ = 0;
};

void register_map(Runtime& rt, const char* name, std::vector<std::uint64_t> offsets)
{
    ReferenceMap m;
    m.type_id = alloc::type_id_of(name);
    m.name = name;
    for (auto off : offsets) {
        m.slots.push_back({off, kOpaqueTarget});
    }
    rt.register_type(m);
}

std::vector<std::uint64_t> slot_range(std::uint64_t first, std::size_t n)
{
    std::vector<std::uint64_t> v(n);
    for (std::size_t i = 0; i < n; ++i) {
        v[i] = first + 8 * i;
    }
    return v;
}

/// Committed-prefix check for map-like structures: `got` equals `oracle`
/// except that key `k` may hold its value from before (`before`) or after
/// the interrupted operation.  Adopts the recovered state.
bool reconcile(std::map<std::uint64_t, std::uint64_t>& oracle, const std::map<std::uint64_t, std::uint64_t>& got,
               std::uint64_t k, std::optional<std::uint64_t> before)
{
    auto after = oracle.find(k) != oracle.end() ? std::optional(oracle[k]) : std::nullopt;
    auto in_got = got.find(k) != got.end() ? std::optional(got.at(k)) : std::nullopt;
    if (in_got != after && in_got != before) {
        return false;
    }
    for (const auto& [key, v] : got) {
        if (key != k && (oracle.find(key) == oracle.end() || oracle.at(key) != v)) {
            return false;
        }
    }
    auto expected = oracle.size() - (after ? 1 : 0) + (in_got ? 1 : 0);
    if (got.size() != expected) {
        return false;
    }
    if (in_got) {
        oracle[k] = *in_got;
    } else {
        oracle.erase(k);
    }
    return true;
}

// ---------------------------------------------------------------------------
// Linked list: insert a tail node, delete the tail node, sum.

struct ListRoot {
    std::uint64_t head, tail, count, sum;
};
struct ListNode {
    std::uint64_t prev, next, value;
};

class LinkedList {
public:
    LinkedList(Runtime& rt, std::string name) : name_(std::move(name))
    {
        register_map(rt, "ListRoot", {0, 8});
        register_map(rt, "ListNode", {0, 8});
        auto& p = rt.create_pool(name_);
        transaction([&] { p.set_root(p.pm_malloc(sizeof(ListRoot), alloc::type_id_of("ListRoot"))); });
    }

    void insert(Runtime& rt, std::uint64_t v)
    {
        auto& p = rt.open_pool(name_);
        transaction([&] {
            auto& root = obj<ListRoot>(rt, p.get_root());
            auto n = p.pm_malloc(sizeof(ListNode), alloc::type_id_of("ListNode"));
            obj<ListNode>(rt, n) = {root.tail, 0, v};
            if (root.tail != 0) {
                auto& t = obj<ListNode>(rt, root.tail);
                tx_add(&t.next, 8);
                t.next = n;
            }
            tx_add(&root, sizeof(root));
            if (root.head == 0) {
                root.head = n;
            }
            root.tail = n;
            ++root.count;
            root.sum += v;
        });
    }

    void remove_tail(Runtime& rt)
    {
        auto& p = rt.open_pool(name_);
        transaction([&] {
            auto& root = obj<ListRoot>(rt, p.get_root());
            auto t = root.tail;
            auto& node = obj<ListNode>(rt, t);
            tx_add(&root, sizeof(root));
            root.tail = node.prev;
            if (node.prev != 0) {
                auto& prev = obj<ListNode>(rt, node.prev);
                tx_add(&prev.next, 8);
                prev.next = 0;
            } else {
                root.head = 0;
            }
            --root.count;
            root.sum -= node.value;
            p.pm_free(t);
        });
    }

    /// Values head to tail; also checks back links and the root counters.
    std::optional<std::vector<std::uint64_t>> walk(Runtime& rt)
    {
        auto& p = rt.open_pool(name_);
        const auto& root = obj<ListRoot>(rt, p.get_root());
        std::vector<std::uint64_t> out;
        std::uint64_t prev = 0;
        std::uint64_t sum = 0;
        for (auto n = root.head; n != 0;) {
            const auto& node = obj<ListNode>(rt, n);
            if (node.prev != prev) {
                return std::nullopt;
            }
            out.push_back(node.value);
            sum += node.value;
            prev = n;
            n = node.next;
        }
        if (prev != root.tail || out.size() != root.count || sum != root.sum) {
            return std::nullopt;
        }
        return out;
    }

    std::uint64_t sum(Runtime& rt)
    {
        auto& p = rt.open_pool(name_);
        std::uint64_t s = 0;
        for (auto n = obj<ListRoot>(rt, p.get_root()).head; n != 0; n = obj<ListNode>(rt, n).next) {
            s += obj<ListNode>(rt, n).value;
        }
        return s;
    }

    std::size_t objects(Runtime& rt) { return rt.open_pool(name_).objects().size(); }

private:
    std::string name_;
};

BenchReport run_linkedlist(Machine& m, const BenchSpec& spec)
{
    BenchReport rep{spec, {}};
    const auto ops = spec.ops ? spec.ops : 100000;
    LinkedList list(m.rt(), unique_name("linkedlist", spec.seed));
    std::vector<std::uint64_t> oracle;
    std::uint64_t oracle_sum = 0;
    std::mt19937_64 rng(spec.seed);
    Injector inj(m, spec.crash_every, spec.seed);
    Timer timer;
    bool valid = true;
    std::string detail;
    std::uint64_t sums = 0;

    auto t0 = Clock::now();
    for (std::uint64_t i = 0; i < ops && valid; ++i) {
        auto r = rng() % 100;
        inj.before(i);
        timer.start();
        if (r < 2) {
            ++sums;
            if (list.sum(m.rt()) != oracle_sum) {
                valid = false;
                detail = "sum mismatch at op " + std::to_string(i);
            }
            timer.stop();
            continue;
        }
        const bool insert = oracle.empty() || r < 55;
        std::uint64_t v = rng() >> 16;
        std::uint64_t removed = 0;
        if (insert) {
            list.insert(m.rt(), v);
            oracle.push_back(v);
            oracle_sum += v;
        } else {
            list.remove_tail(m.rt());
            removed = oracle.back();
            oracle.pop_back();
            oracle_sum -= removed;
        }
        timer.stop();
        if (inj.after()) {
            auto got = list.walk(m.rt());
            if (!got) {
                valid = false;
                detail = "broken links after crash at op " + std::to_string(i);
            } else if (*got != oracle) {
                auto undone = oracle;
                if (insert) {
                    undone.pop_back();
                } else {
                    undone.push_back(removed);
                }
                if (*got == undone) {
                    oracle = undone;
                    oracle_sum += insert ? -v : removed;
                } else {
                    valid = false;
                    detail = "list differs from oracle after crash at op " + std::to_string(i);
                }
            }
        }
    }
    inj.quiesce();
    auto secs = std::chrono::duration<double>(Clock::now() - t0).count();
    auto r = timer.result("run", secs);
    if (valid) {
        auto got = list.walk(m.rt());
        if (!got || *got != oracle) {
            valid = false;
            detail = "final list differs from oracle";
        } else if (list.objects(m.rt()) != oracle.size() + 1) {
            valid = false;
            detail = "leaked or lost nodes";
        }
    }
    r.valid = valid;
    r.crashes = inj.crashes();
    r.entries_replayed = m.entries_applied();
    r.detail = valid ? "len=" + std::to_string(oracle.size()) + " sums=" + std::to_string(sums) : detail;
    rep.phases.push_back(r);
    return rep;
}

// ---------------------------------------------------------------------------
// B-tree of order 8 (at most 7 keys and 8 children per node).

constexpr int kMaxKeys = 7;
constexpr int kMinDeg = 4;

struct BNode {
    std::uint64_t n;
    std::uint64_t leaf;
    std::uint64_t keys[kMaxKeys];
    std::uint64_t vals[kMaxKeys];
    std::uint64_t child[kMaxKeys + 1];
};
static_assert(sizeof(BNode) == 192);
constexpr std::uint64_t kChildOffset = offsetof(BNode, child);

struct BRoot {
    std::uint64_t root;
    std::uint64_t count;
};

class BTree {
public:
    BTree(Runtime& rt, std::string name) : name_(std::move(name))
    {
        register_map(rt, "BRoot", {0});
        register_map(rt, "BNode", slot_range(kChildOffset, kMaxKeys + 1));
        auto& p = rt.create_pool(name_);
        transaction([&] { p.set_root(p.pm_malloc(sizeof(BRoot), alloc::type_id_of("BRoot"))); });
    }

    std::optional<std::uint64_t> find(Runtime& rt, std::uint64_t k)
    {
        auto& p = rt.open_pool(name_);
        auto x = obj<BRoot>(rt, p.get_root()).root;
        while (x != 0) {
            const auto& n = obj<BNode>(rt, x);
            std::uint64_t i = 0;
            while (i < n.n && k > n.keys[i]) {
                ++i;
            }
            if (i < n.n && k == n.keys[i]) {
                return n.vals[i];
            }
            if (n.leaf != 0) {
                return std::nullopt;
            }
            x = n.child[i];
        }
        return std::nullopt;
    }

    void insert(Runtime& rt, std::uint64_t k, std::uint64_t v)
    {
        auto& p = rt.open_pool(name_);
        transaction([&] {
            auto& root = obj<BRoot>(rt, p.get_root());
            if (update(rt, root.root, k, v)) {
                return;
            }
            tx_add(&root, sizeof(root));
            ++root.count;
            if (root.root == 0) {
                auto n = alloc_node(rt, p, true);
                auto& node = obj<BNode>(rt, n);
                node.n = 1;
                node.keys[0] = k;
                node.vals[0] = v;
                root.root = n;
                return;
            }
            if (obj<BNode>(rt, root.root).n == kMaxKeys) {
                auto s = alloc_node(rt, p, false);
                obj<BNode>(rt, s).child[0] = root.root;
                split_child(rt, p, s, 0);
                root.root = s;
            }
            insert_nonfull(rt, p, root.root, k, v);
        });
    }

    /// In-order contents; nullopt if keys are out of order or the tree is
    /// unbalanced.
    std::optional<std::map<std::uint64_t, std::uint64_t>> scan(Runtime& rt)
    {
        auto& p = rt.open_pool(name_);
        const auto& root = obj<BRoot>(rt, p.get_root());
        std::map<std::uint64_t, std::uint64_t> out;
        std::optional<std::uint64_t> last;
        int leaf_depth = -1;
        bool ok = true;
        std::function<void(std::uint64_t, int)> visit = [&](std::uint64_t x, int depth) {
            const auto& n = obj<BNode>(rt, x);
            if (n.n == 0 || n.n > kMaxKeys) {
                ok = false;
                return;
            }
            for (std::uint64_t i = 0; i <= n.n && ok; ++i) {
                if (n.leaf == 0) {
                    visit(n.child[i], depth + 1);
                } else if (i == 0) {
                    if (leaf_depth < 0) {
                        leaf_depth = depth;
                    }
                    ok = ok && leaf_depth == depth;
                }
                if (i < n.n) {
                    if (last && *last >= n.keys[i]) {
                        ok = false;
                    }
                    last = n.keys[i];
                    out.emplace(n.keys[i], n.vals[i]);
                }
            }
        };
        if (root.root != 0) {
            visit(root.root, 0);
        }
        if (!ok || out.size() != root.count) {
            return std::nullopt;
        }
        return out;
    }

private:
    std::uint64_t alloc_node(Runtime&, Pool& p, bool leaf)
    {
        auto a = p.pm_malloc(sizeof(BNode), alloc::type_id_of("BNode"));
        Runtime::current()->ptr<BNode>(a)->leaf = leaf ? 1 : 0;
        return a;
    }

    bool update(Runtime& rt, std::uint64_t x, std::uint64_t k, std::uint64_t v)
    {
        while (x != 0) {
            auto& n = obj<BNode>(rt, x);
            std::uint64_t i = 0;
            while (i < n.n && k > n.keys[i]) {
                ++i;
            }
            if (i < n.n && k == n.keys[i]) {
                tx_add(&n.vals[i], 8);
                n.vals[i] = v;
                return true;
            }
            if (n.leaf != 0) {
                return false;
            }
            x = n.child[i];
        }
        return false;
    }

    void split_child(Runtime& rt, Pool& p, std::uint64_t xa, std::uint64_t i)
    {
        auto& x = obj<BNode>(rt, xa);
        auto ya = x.child[i];
        auto& y = obj<BNode>(rt, ya);
        auto za = alloc_node(rt, p, y.leaf != 0);
        auto& z = obj<BNode>(rt, za);
        z.n = kMinDeg - 1;
        for (int j = 0; j < kMinDeg - 1; ++j) {
            z.keys[j] = y.keys[j + kMinDeg];
            z.vals[j] = y.vals[j + kMinDeg];
        }
        if (y.leaf == 0) {
            for (int j = 0; j < kMinDeg; ++j) {
                z.child[j] = y.child[j + kMinDeg];
            }
        }
        tx_add(&y, sizeof(y));
        y.n = kMinDeg - 1;
        for (int j = kMinDeg; j <= kMaxKeys; ++j) {
            y.child[j] = 0;
        }
        tx_add(&x, sizeof(x));
        for (auto j = x.n; j >= i + 1; --j) {
            x.child[j + 1] = x.child[j];
        }
        x.child[i + 1] = za;
        for (auto j = x.n; j > i; --j) {
            x.keys[j] = x.keys[j - 1];
            x.vals[j] = x.vals[j - 1];
        }
        x.keys[i] = y.keys[kMinDeg - 1];
        x.vals[i] = y.vals[kMinDeg - 1];
        ++x.n;
    }

    void insert_nonfull(Runtime& rt, Pool& p, std::uint64_t xa, std::uint64_t k, std::uint64_t v)
    {
        for (;;) {
            auto& x = obj<BNode>(rt, xa);
            if (x.leaf != 0) {
                tx_add(&x, sizeof(x));
                auto j = x.n;
                while (j > 0 && k < x.keys[j - 1]) {
                    x.keys[j] = x.keys[j - 1];
                    x.vals[j] = x.vals[j - 1];
                    --j;
                }
                x.keys[j] = k;
                x.vals[j] = v;
                ++x.n;
                return;
            }
            std::uint64_t i = 0;
            while (i < x.n && k > x.keys[i]) {
                ++i;
            }
            if (obj<BNode>(rt, x.child[i]).n == kMaxKeys) {
                split_child(rt, p, xa, i);
                if (k > x.keys[i]) {
                    ++i;
                }
            }
            xa = x.child[i];
        }
    }

    std::string name_;
};

BenchReport run_btree(Machine& m, const BenchSpec& spec)
{
    BenchReport rep{spec, {}};
    const auto keys = spec.keys ? spec.keys : (spec.ops ? spec.ops : 100000);
    BTree tree(m.rt(), unique_name("btree", spec.seed));
    std::map<std::uint64_t, std::uint64_t> oracle;
    std::mt19937_64 rng(spec.seed);
    Injector inj(m, spec.crash_every, spec.seed);
    Timer timer;
    bool valid = true;
    std::string detail;

    auto t0 = Clock::now();
    for (std::uint64_t i = 0; i < keys && valid; ++i) {
        auto k = rng() >> 1;
        auto v = rng();
        std::optional<std::uint64_t> before;
        if (auto it = oracle.find(k); it != oracle.end()) {
            before = it->second;
        }
        inj.before(i);
        timer.start();
        tree.insert(m.rt(), k, v);
        timer.stop();
        oracle[k] = v;
        if (inj.after()) {
            auto got = tree.scan(m.rt());
            if (!got || !reconcile(oracle, *got, k, before)) {
                valid = false;
                detail = "tree differs from committed prefix after crash at insert " + std::to_string(i);
            }
        }
    }
    inj.quiesce();
    auto r = timer.result("insert", std::chrono::duration<double>(Clock::now() - t0).count());
    r.crashes = inj.crashes();
    r.entries_replayed = m.entries_applied();
    r.valid = valid;
    r.detail = valid ? "keys=" + std::to_string(oracle.size()) : detail;
    rep.phases.push_back(r);

    Timer st;
    std::uint64_t hits = 0;
    t0 = Clock::now();
    for (const auto& [k, v] : oracle) {
        st.start();
        auto got = tree.find(m.rt(), k);
        st.stop();
        hits += got && *got == v;
    }
    auto s = st.result("search", std::chrono::duration<double>(Clock::now() - t0).count());
    s.valid = hits == oracle.size();
    s.detail = "hits=" + std::to_string(hits) + "/" + std::to_string(oracle.size());
    rep.phases.push_back(s);

    t0 = Clock::now();
    auto all = tree.scan(m.rt());
    PhaseResult sc;
    sc.phase = "scan";
    sc.ops = oracle.size();
    sc.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    sc.valid = all && *all == oracle;
    sc.detail = sc.valid ? "sorted" : "in-order traversal differs from oracle";
    rep.phases.push_back(sc);
    return rep;
}

// ---------------------------------------------------------------------------
// Hash-table key-value store driven by YCSB core workloads A-F.

constexpr std::size_t kDirSlots = 512;
constexpr std::size_t kSegSlots = 256;
constexpr std::size_t kMaxShards = 64;

struct KvTop {
    std::uint64_t shards;
    std::uint64_t shard[kMaxShards];
};
struct KvShard {
    std::uint64_t count;
    std::uint64_t dir[kDirSlots];
};
struct KvSeg {
    std::uint64_t bucket[kSegSlots];
};
struct KvEntry {
    std::uint64_t next, key, value;
};

class KvStore {
public:
    KvStore(Runtime& rt, std::string name, unsigned shards) : name_(std::move(name))
    {
        register_map(rt, "KvTop", slot_range(offsetof(KvTop, shard), kMaxShards));
        register_map(rt, "KvShard", slot_range(offsetof(KvShard, dir), kDirSlots));
        register_map(rt, "KvSeg", slot_range(0, kSegSlots));
        register_map(rt, "KvEntry", {0});
        auto& p = rt.create_pool(name_);
        transaction([&] {
            auto top = p.pm_malloc(sizeof(KvTop), alloc::type_id_of("KvTop"));
            p.set_root(top);
            auto& t = obj<KvTop>(rt, top);
            t.shards = shards;
            for (unsigned s = 0; s < shards; ++s) {
                t.shard[s] = p.pm_malloc(sizeof(KvShard), alloc::type_id_of("KvShard"));
            }
        });
    }

    const std::string& name() const noexcept { return name_; }

    std::optional<std::uint64_t> get(Runtime& rt, unsigned shard, std::uint64_t k)
    {
        auto* e = find(rt, shard, k);
        return e ? std::optional(e->value) : std::nullopt;
    }

    /// Inside a transaction.
    void put(Runtime& rt, unsigned shard, std::uint64_t k, std::uint64_t v)
    {
        if (auto* e = find(rt, shard, k)) {
            tx_add(&e->value, 8);
            e->value = v;
            return;
        }
        auto& p = rt.open_pool(name_);
        auto& sh = obj<KvShard>(rt, shard_addr(rt, shard));
        auto h = mix64(k) % (kDirSlots * kSegSlots);
        auto& seg_ref = sh.dir[h / kSegSlots];
        if (seg_ref == 0) {
            auto seg = p.pm_malloc(sizeof(KvSeg), alloc::type_id_of("KvSeg"));
            tx_add(&seg_ref, 8);
            seg_ref = seg;
        }
        auto& bucket = obj<KvSeg>(rt, seg_ref).bucket[h % kSegSlots];
        auto e = p.pm_malloc(sizeof(KvEntry), alloc::type_id_of("KvEntry"));
        obj<KvEntry>(rt, e) = {bucket, k, v};
        tx_add(&bucket, 8);
        bucket = e;
        tx_add(&sh.count, 8);
        ++sh.count;
    }

    std::map<std::uint64_t, std::uint64_t> dump(Runtime& rt, unsigned shard, bool* ok)
    {
        std::map<std::uint64_t, std::uint64_t> out;
        const auto& sh = obj<KvShard>(rt, shard_addr(rt, shard));
        for (auto seg : sh.dir) {
            if (seg == 0) {
                continue;
            }
            for (auto e : obj<KvSeg>(rt, seg).bucket) {
                for (; e != 0; e = obj<KvEntry>(rt, e).next) {
                    const auto& ent = obj<KvEntry>(rt, e);
                    *ok = *ok && out.emplace(ent.key, ent.value).second;
                }
            }
        }
        *ok = *ok && out.size() == sh.count;
        return out;
    }

private:
    std::uint64_t shard_addr(Runtime& rt, unsigned shard)
    {
        auto& p = rt.open_pool(name_);
        return obj<KvTop>(rt, p.get_root()).shard[shard];
    }

    KvEntry* find(Runtime& rt, unsigned shard, std::uint64_t k)
    {
        const auto& sh = obj<KvShard>(rt, shard_addr(rt, shard));
        auto h = mix64(k) % (kDirSlots * kSegSlots);
        auto seg = sh.dir[h / kSegSlots];
        if (seg == 0) {
            return nullptr;
        }
        for (auto e = obj<KvSeg>(rt, seg).bucket[h % kSegSlots]; e != 0;) {
            auto& ent = obj<KvEntry>(rt, e);
            if (ent.key == k) {
                return &ent;
            }
            e = ent.next;
        }
        return nullptr;
    }

    std::string name_;
};

struct YcsbMix {
    double read, update, insert, scan, rmw;
    bool latest;
};

YcsbMix mix_for(char w)
{
    switch (w) {
    case 'A': return {0.50, 0.50, 0, 0, 0, false};
    case 'B': return {0.95, 0.05, 0, 0, 0, false};
    case 'C': return {1.00, 0, 0, 0, 0, false};
    case 'D': return {0.95, 0, 0.05, 0, 0, true};
    case 'E': return {0, 0, 0.05, 0.95, 0, false};
    case 'F': return {0.50, 0, 0, 0, 0.50, false};
    default: fail(Errc::bad_target, std::string("unknown YCSB workload ") + w);
    }
}

std::uint64_t ycsb_key(std::uint64_t id)
{
    return mix64(id ^ 0x9e3779b97f4a7c15ull);
}

struct ShardRun {
    std::map<std::uint64_t, std::uint64_t> oracle;
    bool valid = true;
    std::string detail;
    std::uint64_t scanned = 0;
};

BenchReport run_kvstore(Machine& m, const BenchSpec& spec)
{
    BenchReport rep{spec, {}};
    const auto ops = spec.ops ? spec.ops : 100000;
    const auto keys = spec.keys ? spec.keys : ops;
    const unsigned threads = std::max(1u, spec.threads);
    if (threads > kMaxShards) {
        fail(Errc::bad_size, "too many threads for the store");
    }
    if (threads > 1 && spec.crash_every != 0) {
        fail(Errc::bad_target, "crash injection runs single-threaded");
    }
    const auto mix = mix_for(spec.ycsb);
    KvStore kv(m.rt(), unique_name("kvstore", spec.seed), threads);
    std::vector<ShardRun> runs(threads);
    Injector inj(m, spec.crash_every, spec.seed);

    // One shard per worker; ids t, t+T, ... belong to worker t.
    auto shard_keys = [&](unsigned t, std::uint64_t total) { return total / threads + (t < total % threads ? 1 : 0); };

    auto check_after_crash = [&](ShardRun& run, unsigned t, std::uint64_t k, std::optional<std::uint64_t> before,
                                 std::uint64_t i) {
        if (!inj.after()) {
            return;
        }
        bool ok = true;
        auto got = kv.dump(m.rt(), t, &ok);
        if (!ok || !reconcile(run.oracle, got, k, before)) {
            run.valid = false;
            run.detail = "store differs from committed prefix after crash at op " + std::to_string(i);
        }
    };

    auto load = [&](unsigned t, std::vector<double>& lat) {
        auto& run = runs[t];
        std::mt19937_64 rng(spec.seed * 1315423911u + t);
        auto n = shard_keys(t, keys);
        for (std::uint64_t j = 0; j < n && run.valid; ++j) {
            auto k = ycsb_key(j * threads + t);
            auto v = rng();
            std::optional<std::uint64_t> before;
            if (auto it = run.oracle.find(k); it != run.oracle.end()) {
                before = it->second;
            }
            inj.before(j);
            auto s = Clock::now();
            transaction([&] { kv.put(m.rt(), t, k, v); });
            lat.push_back(std::chrono::duration<double, std::micro>(Clock::now() - s).count());
            run.oracle[k] = v;
            check_after_crash(run, t, k, before, j);
        }
    };

    auto work = [&](unsigned t, std::vector<double>& lat) {
        auto& run = runs[t];
        std::mt19937_64 rng(spec.seed * 2654435761u + t);
        std::uniform_real_distribution<double> u01(0, 1);
        const auto loaded = shard_keys(t, keys);
        auto inserted = loaded;
        Zipfian zipf(std::max<std::uint64_t>(loaded, 1));
        auto pick = [&]() -> std::uint64_t {
            if (mix.latest) {
                auto z = zipf(rng);
                return inserted - 1 - std::min(z, inserted - 1);
            }
            return mix64(zipf(rng)) % std::max<std::uint64_t>(loaded, 1);
        };
        auto n = shard_keys(t, ops);
        for (std::uint64_t j = 0; j < n && run.valid; ++j) {
            auto r = u01(rng);
            auto id = pick();
            auto k = ycsb_key(id * threads + t);
            auto v = rng();
            std::optional<std::uint64_t> before;
            if (auto it = run.oracle.find(k); it != run.oracle.end()) {
                before = it->second;
            }
            inj.before(keys + j);
            auto s = Clock::now();
            bool wrote = false;
            if (r < mix.read) {
                auto got = kv.get(m.rt(), t, k);
                if (got != before) {
                    run.valid = false;
                    run.detail = "read mismatch at op " + std::to_string(j);
                }
            } else if (r < mix.read + mix.update) {
                transaction([&] { kv.put(m.rt(), t, k, v); });
                wrote = true;
            } else if (r < mix.read + mix.update + mix.insert) {
                k = ycsb_key(inserted * threads + t);
                before.reset();
                ++inserted;
                transaction([&] { kv.put(m.rt(), t, k, v); });
                wrote = true;
            } else if (r < mix.read + mix.update + mix.insert + mix.scan) {
                auto len = 1 + rng() % 100;
                for (std::uint64_t q = id; q < std::min(id + len, inserted); ++q) {
                    auto qk = ycsb_key(q * threads + t);
                    auto it = run.oracle.find(qk);
                    auto got = kv.get(m.rt(), t, qk);
                    if (it == run.oracle.end() ? got.has_value() : got != it->second) {
                        run.valid = false;
                        run.detail = "scan mismatch at op " + std::to_string(j);
                    }
                    ++run.scanned;
                }
            } else {
                transaction([&] {
                    auto cur = kv.get(m.rt(), t, k).value_or(0);
                    v = cur + 1;
                    kv.put(m.rt(), t, k, v);
                });
                wrote = true;
            }
            lat.push_back(std::chrono::duration<double, std::micro>(Clock::now() - s).count());
            if (wrote) {
                run.oracle[k] = v;
            }
            check_after_crash(run, t, k, before, j);
        }
    };

    auto phase = [&](const std::string& name, auto&& body) {
        std::vector<std::vector<double>> lat(threads);
        auto t0 = Clock::now();
        if (threads == 1) {
            body(0u, lat[0]);
        } else {
            std::vector<std::thread> ts;
            for (unsigned t = 0; t < threads; ++t) {
                ts.emplace_back([&, t] { body(t, lat[t]); });
            }
            for (auto& th : ts) {
                th.join();
            }
        }
        inj.quiesce();
        Timer merged;
        PhaseResult r;
        std::vector<double> all;
        for (auto& l : lat) {
            all.insert(all.end(), l.begin(), l.end());
        }
        r.phase = name;
        r.ops = all.size();
        r.threads = threads;
        r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
        if (!all.empty()) {
            std::sort(all.begin(), all.end());
            r.p50_us = all[(all.size() - 1) / 2];
            r.p99_us = all[static_cast<std::size_t>(0.99 * static_cast<double>(all.size() - 1))];
        }
        r.crashes = inj.crashes();
        r.entries_replayed = m.entries_applied();
        r.valid = true;
        for (const auto& run : runs) {
            if (!run.valid) {
                r.valid = false;
                r.detail = run.detail;
            }
        }
        rep.phases.push_back(r);
    };

    phase("load", load);
    phase(std::string("run-") + spec.ycsb, work);

    // Final image against the oracle.
    PhaseResult fin;
    fin.phase = "validate";
    fin.threads = threads;
    auto t0 = Clock::now();
    fin.valid = true;
    std::uint64_t total = 0;
    for (unsigned t = 0; t < threads; ++t) {
        bool ok = true;
        auto got = kv.dump(m.rt(), t, &ok);
        total += got.size();
        if (!ok || got != runs[t].oracle) {
            fin.valid = false;
            fin.detail = "final store differs from oracle";
        }
    }
    fin.ops = total;
    fin.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    if (fin.valid) {
        std::uint64_t scanned = 0;
        for (const auto& run : runs) {
            scanned += run.scanned;
        }
        fin.detail = "keys=" + std::to_string(total) + (scanned ? " scanned=" + std::to_string(scanned) : "");
    }
    rep.phases.push_back(fin);
    return rep;
}

// ---------------------------------------------------------------------------
// Parallel array: chunks updated in per-chunk transactions.  Each element x
// becomes x + |exp(i*pi*x)|, i.e. grows by one per pass up to rounding.

constexpr std::size_t kChunk = 4096;

BenchReport run_parallel_array(Machine& m, const BenchSpec& spec)
{
    if (spec.crash_every != 0) {
        fail(Errc::bad_target, "parallel-array has no crash injection");
    }
    BenchReport rep{spec, {}};
    const auto n = spec.ops ? spec.ops : (1u << 20);
    const unsigned threads = std::max(1u, spec.threads);
    constexpr int kPasses = 2;
    auto& rt = m.rt();
    auto& p = rt.create_pool(unique_name("parallel-array", spec.seed));
    std::uint64_t arr = 0;
    register_map(rt, "ArrayRoot", {0});
    transaction([&] {
        auto root = p.pm_malloc(16, alloc::type_id_of("ArrayRoot"));
        p.set_root(root);
        arr = p.pm_malloc(n * sizeof(double));
        obj<std::uint64_t>(rt, root) = arr;
    });
    auto* a = rt.ptr<double>(arr);
    for (std::size_t c = 0; c < n; c += kChunk) {
        transaction([&] {
            auto len = std::min<std::size_t>(kChunk, n - c);
            tx_add(a + c, len * sizeof(double));
            for (std::size_t i = c; i < c + len; ++i) {
                a[i] = static_cast<double>(i % 1000);
            }
        });
    }

    const auto chunks = (n + kChunk - 1) / kChunk;
    auto t0 = Clock::now();
    std::vector<std::thread> ts;
    for (unsigned t = 0; t < threads; ++t) {
        ts.emplace_back([&, t] {
            for (int pass = 0; pass < kPasses; ++pass) {
                for (std::size_t c = t; c < chunks; c += threads) {
                    transaction([&] {
                        auto lo = c * kChunk;
                        auto len = std::min<std::size_t>(kChunk, n - lo);
                        tx_add(a + lo, len * sizeof(double));
                        for (std::size_t i = lo; i < lo + len; ++i) {
                            a[i] += std::abs(std::exp(std::complex<double>(0, std::numbers::pi * a[i])));
                        }
                    });
                }
            }
        });
    }
    for (auto& th : ts) {
        th.join();
    }
    PhaseResult r;
    r.phase = "compute";
    r.threads = threads;
    r.ops = n * kPasses;
    r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    std::size_t bad = 0;
    for (std::size_t i = 0; i < n; ++i) {
        bad += std::abs(a[i] - static_cast<double>(i % 1000 + kPasses)) > 1e-9;
    }
    r.valid = bad == 0;
    r.detail = "elements=" + std::to_string(n) + " mismatched=" + std::to_string(bad);
    rep.phases.push_back(r);
    return rep;
}

} // namespace

bool BenchReport::valid() const noexcept
{
    return !phases.empty() && std::all_of(phases.begin(), phases.end(), [](const auto& p) { return p.valid; });
}

BenchReport run_bench(Machine& m, const BenchSpec& spec)
{
    if (spec.crash_every != 0 && !m.can_crash()) {
        fail(Errc::bad_target, "crash injection needs a local machine");
    }
    if (spec.workload == "linkedlist" || spec.workload == "btree") {
        if (spec.threads > 1) {
            fail(Errc::bad_target, spec.workload + " runs single-threaded");
        }
        return spec.workload == "btree" ? run_btree(m, spec) : run_linkedlist(m, spec);
    }
    if (spec.workload == "kvstore-ycsb" || spec.workload == "kvstore") {
        return run_kvstore(m, spec);
    }
    if (spec.workload == "parallel-array") {
        return run_parallel_array(m, spec);
    }
    fail(Errc::bad_target, "unknown workload " + spec.workload);
}

void write_csv(std::ostream& out, const BenchReport& report)
{
    out << "workload,phase,threads,ops,seconds,throughput_ops_s,p50_us,p99_us,crashes,entries_replayed,valid,detail\n";
    auto name = report.spec.workload;
    if (name.rfind("kvstore", 0) == 0) {
        name += std::string("-") + report.spec.ycsb;
    }
    for (const auto& p : report.phases) {
        out << name << ',' << p.phase << ',' << p.threads << ',' << p.ops << ',' << p.seconds << ','
            << p.throughput() << ',' << p.p50_us << ',' << p.p99_us << ',' << p.crashes << ','
            << p.entries_replayed << ',' << (p.valid ? 1 : 0) << ',' << p.detail << '\n';
    }
}

// ---------------------------------------------------------------------------
// Sweeps

SweepReport sweep_hybrid(Machine& m, unsigned undo, unsigned redo)
{
    if (!m.can_crash()) {
        fail(Errc::bad_target, "crash sweep needs a local machine");
    }
    const unsigned fields = undo + redo;
    const auto name = unique_name("sweep", fields);
    {
        auto& p = m.rt().create_pool(name);
        transaction([&] { p.set_root(p.pm_malloc(8 * fields)); });
    }
    // Undo and redo targets interleaved in one transaction.
    auto run = [&](std::uint64_t v) {
        auto* f = m.rt().ptr<std::uint64_t>(m.rt().open_pool(name).get_root());
        tx_begin();
        unsigned u = 0;
        unsigned r = 0;
        while (u < undo || r < redo) {
            if (u < undo) {
                tx_add(&f[u], 8);
                f[u] = v;
                ++u;
            }
            if (r < redo) {
                tx_redo_set(&f[undo + r], v);
                ++r;
            }
        }
        tx_commit();
    };
    auto warm = [&] {
        m.rt().open_pool(name);
        tx_begin();
        tx_commit();
    };

    SweepReport rep;
    warm();
    auto e0 = m.platform().events();
    run(1);
    rep.events = m.platform().events() - e0;

    std::uint64_t v = 1;
    for (std::uint64_t k = 0; k <= rep.events; ++k) {
        warm();
        m.platform().arm_crash(m.platform().events() + k);
        run(v + 1);
        if (m.crashed()) {
            m.crash_restart();
        } else {
            m.disarm();
        }
        ++rep.scenarios;
        const auto* f = m.rt().ptr<std::uint64_t>(m.rt().open_pool(name).get_root());
        bool uniform = std::all_of(f, f + fields, [&](std::uint64_t x) { return x == f[0]; });
        bool legal = uniform && (f[0] == v || f[0] == v + 1) && (k < rep.events || f[0] == v + 1);
        if (!legal) {
            if (rep.violations++ == 0) {
                rep.first_violation = "crash at event +" + std::to_string(k);
            }
            break;
        }
        (f[0] == v ? rep.rolled_back : rep.rolled_forward) += 1;
        v = f[0];
    }
    return rep;
}

CorruptLogReport corrupt_log_scenario(Machine& m)
{
    if (!m.can_crash()) {
        fail(Errc::bad_target, "corrupt-log scenario needs a local machine");
    }
    auto& rt = m.rt();
    auto& victim = rt.create_pool("victim");
    auto& bystander = rt.create_pool("bystander");
    std::uint64_t va = 0;
    std::uint64_t ba = 0;
    transaction([&] {
        va = victim.pm_malloc(32);
        victim.set_root(va);
        ba = bystander.pm_malloc(32);
        bystander.set_root(ba);
        auto* b = rt.ptr<std::uint64_t>(ba);
        for (int i = 0; i < 4; ++i) {
            b[i] = 7;
        }
    });
    transaction([&] {
        auto* f = rt.ptr<std::uint64_t>(va);
        tx_add(f, 32);
        for (int i = 0; i < 4; ++i) {
            f[i] = 1;
        }
    });

    // In-place writes of an uncommitted transaction reach media, then power
    // fails while its undo log is live.
    tx_begin();
    auto* f = rt.ptr<std::uint64_t>(va);
    tx_add(f, 32);
    for (int i = 0; i < 4; ++i) {
        f[i] = 2;
    }
    auto& map = *rt.space().find(va);
    map.domain->persist(va - map.range.start, 32);
    const auto& head = rt.tx().log()->head();
    auto log_id = HeaderView(head.data()).uuid();
    auto payload = HeaderView(head.data()).header_size() + logging::kSegmentHeader + logging::kEntryHeader;

    m.crash_restart([&] {
        auto path = puddle_file(m.data_dir(), log_id);
        for (const auto& p : {path, pmem::shadow_path(path)}) {
            UniqueFd fd(::open(p.c_str(), O_RDWR));
            std::byte b{};
            if (!fd || ::pread(fd.get(), &b, 1, static_cast<off_t>(payload)) != 1) {
                continue;
            }
            b ^= std::byte{0x5a};
            if (::pwrite(fd.get(), &b, 1, static_cast<off_t>(payload)) != 1) {
                fail(Errc::io_failure, "cannot corrupt log");
            }
        }
    });

    CorruptLogReport rep;
    auto& rt2 = m.rt();
    auto& v2 = rt2.open_pool("victim");
    rep.victim_quarantined = v2.quarantined();
    const auto* vf = rt2.ptr<std::uint64_t>(v2.get_root());
    rep.victim_unchanged = std::all_of(vf, vf + 4, [](std::uint64_t x) { return x == 2; });
    auto& b2 = rt2.open_pool("bystander");
    const auto* bf = rt2.ptr<std::uint64_t>(b2.get_root());
    rep.bystander_intact = !b2.quarantined() && std::all_of(bf, bf + 4, [](std::uint64_t x) { return x == 7; });
    return rep;
}

// ---------------------------------------------------------------------------
// Data aggregation

namespace {

struct SensorRoot {
    std::uint64_t head, count, node;
};
struct SensorVar {
    std::uint64_t next, node, idx;
    double value;
};

void register_sensor_types(Runtime& rt)
{
    register_map(rt, "SensorRoot", {0});
    register_map(rt, "SensorVar", {0});
}

} // namespace

AggregateReport aggregate(const fs::path& work, unsigned nodes, std::uint64_t vars, std::uint64_t seed)
{
    AggregateReport rep;
    std::set<std::tuple<std::uint64_t, std::uint64_t, double>> oracle;
    RuntimeOptions ro;
    ro.pool_heap = 256 << 10;
    fs::create_directories(work);
    for (unsigned n = 0; n < nodes; ++n) {
        auto dir = work / ("node" + std::to_string(n));
        fs::remove_all(dir);
        auto m = Machine::local(dir, ro);
        auto& rt = m->rt();
        register_sensor_types(rt);
        auto& p = rt.create_pool("sensor");
        std::mt19937_64 rng(seed * 1000003 + n);
        transaction([&] {
            auto root = p.pm_malloc(sizeof(SensorRoot), alloc::type_id_of("SensorRoot"));
            p.set_root(root);
            auto& r = obj<SensorRoot>(rt, root);
            r.node = n;
            for (std::uint64_t i = 0; i < vars; ++i) {
                auto v = p.pm_malloc(sizeof(SensorVar), alloc::type_id_of("SensorVar"));
                double value = std::ldexp(static_cast<double>(rng() >> 11), -53) * 100.0;
                obj<SensorVar>(rt, v) = {r.head, n, i, value};
                r.head = v;
                ++r.count;
                oracle.emplace(n, i, value);
            }
        });
        AggregateRow row;
        row.node = n;
        row.vars = vars;
        auto bundle = work / ("node" + std::to_string(n) + ".pexp");
        fs::remove(bundle);
        auto t0 = Clock::now();
        export_pool_to(rt.client(), "sensor", bundle);
        row.export_us = std::chrono::duration<double, std::micro>(Clock::now() - t0).count();
        rep.rows.push_back(row);
    }

    auto home_dir = work / "home";
    fs::remove_all(home_dir);
    auto home = Machine::local(home_dir, ro);
    auto& rt = home->rt();
    std::set<std::tuple<std::uint64_t, std::uint64_t, double>> seen;
    bool ok = true;
    for (unsigned n = 0; n < nodes; ++n) {
        auto& row = rep.rows[n];
        auto name = "node" + std::to_string(n);
        auto t0 = Clock::now();
        auto imp = import_bundle_from(rt.client(), work / (name + ".pexp"), name);
        row.import_us = std::chrono::duration<double, std::micro>(Clock::now() - t0).count();
        row.relocated = imp.relocated;
        row.puddles = imp.puddles;
    }
    for (unsigned n = 0; n < nodes; ++n) {
        auto& row = rep.rows[n];
        rt.reset_reloc_stats();
        auto& p = rt.open_pool("node" + std::to_string(n));
        const auto& r = obj<SensorRoot>(rt, p.get_root());
        std::uint64_t count = 0;
        for (auto v = r.head; v != 0; v = obj<SensorVar>(rt, v).next) {
            const auto& var = obj<SensorVar>(rt, v);
            ok = ok && var.node == n && seen.emplace(var.node, var.idx, var.value).second;
            ++count;
        }
        ok = ok && count == r.count && r.node == n;
        row.rewrite_us = static_cast<double>(rt.reloc_stats().rewrite_ns) / 1000.0;
    }
    rep.merged = seen.size();
    rep.valid = ok && seen == oracle;
    return rep;
}

void write_csv(std::ostream& out, const AggregateReport& report)
{
    out << "node,vars,puddles,relocated,export_us,import_us,rewrite_us\n";
    for (const auto& r : report.rows) {
        out << r.node << ',' << r.vars << ',' << r.puddles << ',' << (r.relocated ? 1 : 0) << ',' << r.export_us
            << ',' << r.import_us << ',' << r.rewrite_us << '\n';
    }
}

// ---------------------------------------------------------------------------

double linear_r2(const std::vector<double>& x, const std::vector<double>& y)
{
    const auto n = static_cast<double>(x.size());
    if (x.size() < 2 || x.size() != y.size()) {
        return 0;
    }
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0 || syy == 0) {
        return 0;
    }
    return sxy * sxy / (sxx * syy);
}

Zipfian::Zipfian(std::uint64_t n, double theta) : n_(n), theta_(theta)
{
    double zeta2 = 1 + std::pow(0.5, theta);
    zetan_ = 0;
    for (std::uint64_t i = 1; i <= n; ++i) {
        zetan_ += 1.0 / std::pow(static_cast<double>(i), theta);
    }
    alpha_ = 1.0 / (1.0 - theta);
    eta_ = (1 - std::pow(2.0 / static_cast<double>(n), 1 - theta)) / (1 - zeta2 / zetan_);
    half_pow_ = zeta2;
}

std::uint64_t Zipfian::operator()(std::mt19937_64& rng)
{
    double u = std::uniform_real_distribution<double>(0, 1)(rng);
    double uz = u * zetan_;
    if (uz < 1) {
        return 0;
    }
    if (uz < half_pow_) {
        return std::min<std::uint64_t>(1, n_ - 1);
    }
    auto v = static_cast<std::uint64_t>(static_cast<double>(n_) * std::pow(eta_ * u - eta_ + 1, alpha_));
    return std::min(v, n_ - 1);
}

} // namespace puddle::bench
