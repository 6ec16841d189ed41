#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "puddle/client.hpp"
#include "puddle/daemon.hpp"
#include "puddle/runtime.hpp"

namespace puddle::bench {

/// Where a workload runs.  A local machine owns an emulated platform, an
/// in-process daemon and the runtime, so power loss can be injected; a
/// remote machine talks to a running puddled and cannot crash.
class Machine {
public:
    static std::unique_ptr<Machine> local(std::filesystem::path data_dir, RuntimeOptions options = {});
    static std::unique_ptr<Machine> remote(const std::filesystem::path& socket, RuntimeOptions options = {});

    ~Machine();
    Machine(const Machine&) = delete;
    Machine& operator=(const Machine&) = delete;

    Runtime& rt() { return *rt_; }
    bool can_crash() const noexcept { return daemon_ != nullptr; }
    pmem::Platform& platform() noexcept { return *platform_; }
    const std::filesystem::path& data_dir() const noexcept { return dir_; }
    daemon::Daemon* daemon() noexcept { return daemon_.get(); }

    /// Power is lost at a uniformly chosen event among the next `window`.
    void arm_crash_within(std::uint64_t window, std::mt19937_64& rng);
    bool crashed() const noexcept { return platform_->crashed(); }
    void disarm() noexcept { platform_->disarm(); }

    /// Whole-machine power loss followed by daemon and client restart.
    /// `before_boot` runs while everything is down (disk tampering).
    void crash_restart(const std::function<void()>& before_boot = {});
    /// Orderly client exit and daemon restart.
    void restart();

    std::uint64_t crashes() const noexcept { return crashes_; }
    std::uint64_t logs_replayed() const noexcept { return logs_replayed_; }
    std::uint64_t entries_applied() const noexcept { return entries_applied_; }

private:
    Machine() = default;
    void boot(bool power_cycle);

    std::filesystem::path dir_;
    std::filesystem::path socket_;
    RuntimeOptions options_;
    std::unique_ptr<pmem::Platform> owned_platform_;
    pmem::Platform* platform_ = nullptr;
    std::unique_ptr<daemon::Daemon> daemon_;
    std::unique_ptr<Runtime> rt_;
    std::uint64_t crashes_ = 0;
    std::uint64_t logs_replayed_ = 0;
    std::uint64_t entries_applied_ = 0;
};

struct BenchSpec {
    std::string workload; // linkedlist, btree, kvstore-ycsb, parallel-array
    std::uint64_t ops = 0;  // 0 = workload default
    std::uint64_t keys = 0; // kvstore load size / btree key count; 0 = ops
    unsigned threads = 1;
    std::uint64_t seed = 1;
    std::uint64_t crash_every = 0;
    char ycsb = 'A';
};

struct PhaseResult {
    std::string phase;
    std::uint64_t ops = 0;
    unsigned threads = 1;
    double seconds = 0;
    double p50_us = 0;
    double p99_us = 0;
    std::uint64_t crashes = 0;
    std::uint64_t entries_replayed = 0;
    bool valid = true;
    std::string detail;

    double throughput() const noexcept { return seconds > 0 ? static_cast<double>(ops) / seconds : 0; }
};

struct BenchReport {
    BenchSpec spec;
    std::vector<PhaseResult> phases;

    bool valid() const noexcept;
};

/// Runs one workload and validates it against a volatile oracle.  With
/// `crash_every`, power is lost inside roughly every K-th operation and the
/// recovered structure must equal the oracle with the interrupted operation
/// either fully applied or absent.
BenchReport run_bench(Machine& m, const BenchSpec& spec);

void write_csv(std::ostream& out, const BenchReport& report);

/// Exhaustive crash sweep over one transaction with `undo` undo-logged and
/// `redo` redo-logged 8-byte targets.
struct SweepReport {
    std::uint64_t events = 0;    // persistence events of the transaction
    std::uint64_t scenarios = 0; // crash points tried
    std::uint64_t rolled_back = 0;
    std::uint64_t rolled_forward = 0;
    std::uint64_t violations = 0;
    std::string first_violation;
};
SweepReport sweep_hybrid(Machine& m, unsigned undo, unsigned redo);

/// Crashes a transaction on pool "victim", corrupts its log on disk and
/// restarts.  The victim pool must come back quarantined and untouched by
/// the log while pool "bystander" keeps its committed data.
struct CorruptLogReport {
    bool victim_quarantined = false;
    bool victim_unchanged = false;
    bool bystander_intact = false;
    bool ok() const noexcept { return victim_quarantined && victim_unchanged && bystander_intact; }
};
CorruptLogReport corrupt_log_scenario(Machine& m);

/// Per-node sensor pools built on isolated machines, exported, then
/// imported and traversed at a home node.
struct AggregateRow {
    unsigned node = 0;
    std::uint64_t vars = 0;
    double export_us = 0;
    double import_us = 0;
    double rewrite_us = 0;
    std::uint64_t puddles = 0;
    bool relocated = false;
};
struct AggregateReport {
    std::vector<AggregateRow> rows;
    std::uint64_t merged = 0; // variables seen by the merged traversal
    bool valid = false;
};
AggregateReport aggregate(const std::filesystem::path& work, unsigned nodes, std::uint64_t vars, std::uint64_t seed);
void write_csv(std::ostream& out, const AggregateReport& report);

/// Coefficient of determination of the least-squares line through (x, y).
double linear_r2(const std::vector<double>& x, const std::vector<double>& y);

/// YCSB-style Zipfian over [0, n) (Gray et al. generator).
class Zipfian {
public:
    Zipfian(std::uint64_t n, double theta = 0.99);
    std::uint64_t operator()(std::mt19937_64& rng);
    std::uint64_t items() const noexcept { return n_; }

private:
    std::uint64_t n_;
    double theta_, alpha_, zetan_, eta_, half_pow_;
};

} // namespace puddle::bench
