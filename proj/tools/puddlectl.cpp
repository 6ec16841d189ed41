// puddlectl: admin, debug and benchmark front end.

#include <unistd.h>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "puddle/bench.hpp"
#include "puddle/client.hpp"
#include "puddle/inspect.hpp"
#include "puddle/runtime.hpp"

namespace fs = std::filesystem;
using namespace puddle;

namespace {

struct Common {
    std::string socket;
};

std::unique_ptr<Client> connect(const Common& c)
{
    return Client::connect(default_socket_path(c.socket));
}

RuntimeOptions quiet_runtime()
{
    RuntimeOptions o;
    o.fault_handler = false;
    return o;
}

/// Opens `path` for the report, or stdout for "-" / empty.
class Output {
public:
    explicit Output(const std::string& path)
    {
        if (!path.empty() && path != "-") {
            file_.open(path, std::ios::trunc);
            if (!file_) {
                fail(Errc::io_failure, "cannot write " + path);
            }
        }
    }
    std::ostream& get() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }

private:
    std::ofstream file_;
};

std::string hex_addr(std::uint64_t v)
{
    std::ostringstream s;
    s << "0x" << std::hex << v;
    return s.str();
}

// ---------------------------------------------------------------------------

int cmd_status(const Common& c)
{
    auto client = connect(c);
    auto st = client->status();
    std::cout << "space          " << hex_addr(st.space_base) << " +" << hex_addr(st.space_length) << '\n'
              << "puddles        " << st.puddles << '\n'
              << "pools          " << st.pools << '\n'
              << "log spaces     " << st.log_spaces << '\n'
              << "frontier       " << st.frontier << '\n'
              << "journal        gen " << st.journal_generation << ", " << st.journal_bytes << " bytes\n"
              << "last start     " << (st.clean_start ? "clean" : "dirty")
              << (st.recovery_ran ? ", recovery ran" : "") << '\n'
              << "recovery       " << st.logs_replayed << " logs replayed, " << st.entries_applied
              << " entries applied, " << st.logs_quarantined << " logs quarantined, " << st.orphans_removed
              << " orphans removed, " << st.lost_puddles << " lost puddles\n";
    for (const auto& p : st.quarantined_pools) {
        std::cout << "quarantined    " << p << '\n';
    }
    for (const auto& p : client->list_pools()) {
        std::cout << "pool           " << p.name << ' ' << p.id.hex() << ' ' << p.puddles << " puddles"
                  << (p.quarantined ? " QUARANTINED" : "") << '\n';
    }
    return 0;
}

int cmd_export(const Common& c, const std::string& pool, const std::string& out)
{
    auto client = connect(c);
    auto path = out.empty() ? fs::path(pool + ".pexp") : fs::path(out);
    auto [puddles, bytes] = export_pool_to(*client, pool, path);
    std::cout << "exported " << pool << ": " << puddles << " puddles, " << bytes << " bytes -> " << path.string()
              << '\n';
    return 0;
}

int cmd_import(const Common& c, const std::string& bundle, const std::string& name, const std::string& mode)
{
    auto client = connect(c);
    auto r = import_bundle_from(*client, bundle, name, static_cast<std::uint16_t>(std::stoul(mode, nullptr, 8)));
    std::cout << "imported " << r.name << " (" << r.pool.hex() << "): " << r.puddles << " puddles"
              << (r.relocated ? ", relocated (rewrite on first map)" : "") << '\n';
    return 0;
}

int cmd_heap_walk(const Common& c, const std::string& pool)
{
    Runtime rt(connect(c), quiet_runtime());
    auto& p = rt.open_pool(pool);
    std::cout << "addr,size,type_id\n";
    for (const auto& o : p.objects()) {
        std::cout << hex_addr(o.addr) << ',' << o.size << ',' << o.type_id << '\n';
    }
    return 0;
}

int cmd_log_dump(const Common& c, const std::string& uuid)
{
    auto client = connect(c);
    dump_log(*client, PuddleId::parse(uuid), std::cout);
    return 0;
}

// ---------------------------------------------------------------------------
// bench, crash-sweep, aggregate

/// Scratch data directory removed at exit unless the user named one.
class Workdir {
public:
    explicit Workdir(const std::string& given)
    {
        if (!given.empty()) {
            path_ = given;
            fs::create_directories(path_);
            return;
        }
        std::string tmpl = (fs::temp_directory_path() / "puddlectl-XXXXXX").string();
        if (::mkdtemp(tmpl.data()) == nullptr) {
            fail(Errc::io_failure, "mkdtemp failed");
        }
        path_ = tmpl;
        owned_ = true;
    }
    ~Workdir()
    {
        if (owned_) {
            std::error_code ec;
            fs::remove_all(path_, ec);
        }
    }
    const fs::path& path() const noexcept { return path_; }

private:
    fs::path path_;
    bool owned_ = false;
};

struct BenchArgs {
    std::string workload;
    bench::BenchSpec spec;
    std::string mix = "A";
    std::string out;
    std::string data_dir;
    bool local = false;
};

int cmd_bench(const Common& c, BenchArgs a)
{
    a.spec.workload = a.workload;
    if (a.mix.size() != 1 || a.mix[0] < 'A' || a.mix[0] > 'F') {
        std::cerr << "--mix must be one of A-F\n";
        return 2;
    }
    a.spec.ycsb = a.mix[0];
    std::unique_ptr<Workdir> work;
    std::unique_ptr<bench::Machine> m;
    // Power-loss injection needs the emulated platform of an in-process daemon.
    if (a.local || a.spec.crash_every != 0) {
        work = std::make_unique<Workdir>(a.data_dir);
        m = bench::Machine::local(work->path(), quiet_runtime());
    } else {
        m = bench::Machine::remote(default_socket_path(c.socket), quiet_runtime());
    }
    auto rep = bench::run_bench(*m, a.spec);
    m.reset();
    Output out(a.out);
    bench::write_csv(out.get(), rep);
    if (!a.out.empty() && a.out != "-") {
        for (const auto& p : rep.phases) {
            std::cerr << a.workload << ' ' << p.phase << ": " << p.ops << " ops, " << std::fixed
                      << std::setprecision(0) << p.throughput() << " ops/s, crashes " << p.crashes
                      << (p.valid ? ", valid" : ", INVALID: " + p.detail) << '\n';
        }
    }
    return rep.valid() ? 0 : 1;
}

struct SweepArgs {
    std::string scenario;
    unsigned undo = 2;
    unsigned redo = 2;
    std::uint64_t ops = 10000;
    std::uint64_t crash_every = 1000;
    std::uint64_t seed = 1;
    std::string data_dir;
};

int cmd_crash_sweep(SweepArgs a)
{
    Workdir work(a.data_dir);
    auto m = bench::Machine::local(work.path(), quiet_runtime());
    if (a.scenario == "hybrid") {
        auto r = bench::sweep_hybrid(*m, a.undo, a.redo);
        std::cout << "hybrid undo=" << a.undo << " redo=" << a.redo << ": " << r.events << " events, "
                  << r.scenarios << " crash points, " << r.rolled_back << " rolled back, " << r.rolled_forward
                  << " rolled forward, " << r.violations << " violations" << '\n';
        if (r.violations != 0) {
            std::cout << "first violation: " << r.first_violation << '\n';
        }
        return r.violations == 0 ? 0 : 1;
    }
    if (a.scenario == "kvstore") {
        bench::BenchSpec spec;
        spec.workload = "kvstore-ycsb";
        spec.ops = a.ops;
        spec.seed = a.seed;
        spec.crash_every = a.crash_every;
        spec.ycsb = 'A';
        auto rep = bench::run_bench(*m, spec);
        std::uint64_t crashes = 0;
        for (const auto& p : rep.phases) {
            crashes = std::max(crashes, p.crashes);
        }
        std::cout << "kvstore ops=" << a.ops << " crash_every=" << a.crash_every << ": " << crashes
                  << " crashes, " << m->entries_applied() << " entries replayed, "
                  << (rep.valid() ? "matches committed prefix" : "MISMATCH") << '\n';
        for (const auto& p : rep.phases) {
            if (!p.valid) {
                std::cout << p.phase << ": " << p.detail << '\n';
            }
        }
        return rep.valid() ? 0 : 1;
    }
    if (a.scenario == "corrupt-log") {
        auto r = bench::corrupt_log_scenario(*m);
        std::cout << "corrupt-log: victim " << (r.victim_quarantined ? "quarantined" : "NOT quarantined") << ", "
                  << (r.victim_unchanged ? "log not applied" : "LOG APPLIED") << "; bystander "
                  << (r.bystander_intact ? "recovered" : "DAMAGED") << '\n';
        return r.ok() ? 0 : 1;
    }
    std::cerr << "unknown scenario " << a.scenario << " (hybrid, kvstore, corrupt-log)\n";
    return 2;
}

struct AggregateArgs {
    unsigned nodes = 10;
    std::uint64_t vars = 100;
    std::uint64_t seed = 1;
    std::vector<std::uint64_t> sweep;
    std::string out;
    std::string work_dir;
};

int cmd_aggregate(const AggregateArgs& a)
{
    Workdir work(a.work_dir);
    auto rep = bench::aggregate(work.path() / "run", a.nodes, a.vars, a.seed);
    Output out(a.out);
    bench::write_csv(out.get(), rep);
    double import_us = 0;
    double rewrite_us = 0;
    for (const auto& r : rep.rows) {
        import_us += r.import_us;
        rewrite_us += r.rewrite_us;
    }
    std::cerr << "aggregate: " << a.nodes << " nodes x " << a.vars << " vars, merged " << rep.merged << ", "
              << (rep.valid ? "matches union" : "MISMATCH") << "; import " << std::fixed << std::setprecision(1)
              << import_us << " us, rewrite " << rewrite_us << " us\n";
    bool ok = rep.valid;
    if (!a.sweep.empty()) {
        std::vector<double> x;
        std::vector<double> y;
        for (auto v : a.sweep) {
            auto r = bench::aggregate(work.path() / ("sweep" + std::to_string(v)), 2, v, a.seed);
            ok = ok && r.valid;
            x.push_back(static_cast<double>(v));
            y.push_back(r.rows.back().rewrite_us);
            std::cerr << "  vars=" << v << " rewrite " << y.back() << " us\n";
        }
        std::cerr << "  linear fit R^2 = " << std::setprecision(4) << bench::linear_r2(x, y) << '\n';
    }
    return ok ? 0 : 1;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"puddle control"};
    app.require_subcommand(1);
    Common common;
    app.add_option("--socket", common.socket, "daemon socket (default $PUDDLED_SOCKET or /tmp/puddled.sock)");

    int rc = 0;

    auto* status = app.add_subcommand("status", "daemon, recovery and pool summary");
    status->callback([&] { rc = cmd_status(common); });

    auto* pool = app.add_subcommand("pool", "pool export and import");
    pool->require_subcommand(1);
    std::string pool_name;
    std::string bundle_path;
    std::string import_name;
    std::string import_mode = "0600";
    auto* exp = pool->add_subcommand("export", "write a pool bundle");
    exp->add_option("pool", pool_name)->required();
    exp->add_option("-o,--out", bundle_path, "bundle file (default <pool>.pexp)");
    exp->callback([&] { rc = cmd_export(common, pool_name, bundle_path); });
    auto* imp = pool->add_subcommand("import", "load a pool bundle");
    imp->add_option("bundle", bundle_path)->required();
    imp->add_option("--name", import_name, "pool name (default: name stored in the bundle)");
    imp->add_option("--mode", import_mode, "octal permission bits");
    imp->callback([&] { rc = cmd_import(common, bundle_path, import_name, import_mode); });

    auto* heap = app.add_subcommand("heap", "heap inspection");
    heap->require_subcommand(1);
    auto* walk = heap->add_subcommand("walk", "list live objects as addr,size,type_id");
    walk->add_option("pool", pool_name)->required();
    walk->callback([&] { rc = cmd_heap_walk(common, pool_name); });

    auto* log = app.add_subcommand("log", "log inspection");
    log->require_subcommand(1);
    std::string uuid;
    auto* dump = log->add_subcommand("dump", "render a log or log space");
    dump->add_option("uuid", uuid)->required();
    dump->callback([&] { rc = cmd_log_dump(common, uuid); });

    BenchArgs ba;
    auto* b = app.add_subcommand("bench", "run a validated workload");
    b->add_option("workload", ba.workload, "linkedlist, btree, kvstore-ycsb, parallel-array")->required();
    b->add_option("--ops", ba.spec.ops, "operations (array: elements)");
    b->add_option("--keys", ba.spec.keys, "kvstore load size / btree keys (default --ops)");
    b->add_option("--threads", ba.spec.threads, "worker threads");
    b->add_option("--seed", ba.spec.seed, "rng seed");
    b->add_option("--crash-every", ba.spec.crash_every, "inject power loss about every K ops (implies --local)");
    b->add_option("--mix", ba.mix, "YCSB workload A-F");
    b->add_option("--out", ba.out, "CSV report (default stdout)");
    b->add_flag("--local", ba.local, "in-process daemon on an emulated machine");
    b->add_option("--data-dir", ba.data_dir, "data dir of the local machine (default scratch)");
    b->callback([&] { rc = cmd_bench(common, ba); });

    SweepArgs sa;
    auto* cs = app.add_subcommand("crash-sweep", "power-loss scenarios on an emulated machine");
    cs->add_option("scenario", sa.scenario, "hybrid, kvstore, corrupt-log")->required();
    cs->add_option("--undo", sa.undo, "hybrid: undo-logged targets");
    cs->add_option("--redo", sa.redo, "hybrid: redo-logged targets");
    cs->add_option("--ops", sa.ops, "kvstore: operations");
    cs->add_option("--crash-every", sa.crash_every, "kvstore: crash period");
    cs->add_option("--seed", sa.seed, "rng seed");
    cs->add_option("--data-dir", sa.data_dir, "keep the machine here (default scratch)");
    cs->callback([&] { rc = cmd_crash_sweep(sa); });

    AggregateArgs aa;
    auto* ag = app.add_subcommand("aggregate", "export sensor pools from N nodes and merge them at one");
    ag->add_option("--nodes", aa.nodes, "sensor nodes");
    ag->add_option("--vars", aa.vars, "variables per node");
    ag->add_option("--seed", aa.seed, "rng seed");
    ag->add_option("--sweep-vars", aa.sweep, "also fit rewrite time over these variable counts");
    ag->add_option("--out", aa.out, "CSV report (default stdout)");
    ag->add_option("--work-dir", aa.work_dir, "node data dirs and bundles (default scratch)");
    ag->callback([&] { rc = cmd_aggregate(aa); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "puddlectl: " << e.what() << '\n';
        return 1;
    }
    return rc;
}
