#include "puddle/inspect.hpp"

#include <map>
#include <ostream>
#include <sstream>

#include "puddle/logging.hpp"

namespace puddle {

namespace {

std::string hex_addr(std::uint64_t v)
{
    std::ostringstream s;
    s << "0x" << std::hex << v;
    return s.str();
}

class ReadOnlyMaps {
public:
    explicit ReadOnlyMaps(Client& c) : c_(c) {}

    pmem::PersistentDomain* get(const PuddleId& id)
    {
        auto& slot = maps_[id];
        if (!slot) {
            auto cap = c_.exist_puddle(id, false);
            pmem::OpenOptions o;
            o.platform = &pmem::Platform::global();
            o.read_only = true;
            o.create = false;
            o.label = id.hex();
            slot = pmem::PersistentDomain::adopt(std::move(cap.backing), std::move(cap.shadow), cap.total_size, o);
        }
        return slot.get();
    }

private:
    Client& c_;
    std::map<PuddleId, std::unique_ptr<pmem::PersistentDomain>> maps_;
};

const char* status_name(logging::LogStatus s)
{
    switch (s) {
    case logging::LogStatus::active: return "active";
    case logging::LogStatus::dropped: return "dropped";
    case logging::LogStatus::invalid: return "invalid";
    }
    return "?";
}

void dump_chain(ReadOnlyMaps& maps, const PuddleId& id, std::ostream& out)
{
    auto* head = maps.get(id);
    if (!logging::is_segment(*head)) {
        fail(Errc::corrupt_log, id.hex() + " is not a log segment");
    }
    logging::Log log(*head, [&](const PuddleId& next) { return maps.get(next); });
    auto range = log.range();
    auto st = log.stats();
    out << "log " << id.hex() << " range (" << range.lo << ',' << range.hi << ") segments " << st.segments
        << " entries " << st.entries << " bytes " << st.bytes << '\n';
    for (const auto& next : log.chain_ids()) {
        out << "  chained " << next.hex() << '\n';
    }
    out << "  segment,offset,target,size,seq,flags,checksum,admitted\n";
    for (const auto& e : log.entries()) {
        std::string flags;
        flags += e.backward() ? 'B' : '-';
        flags += e.volatile_target() ? 'V' : '-';
        out << "  " << e.at.segment << ',' << e.at.offset << ',' << hex_addr(e.target) << ',' << e.size << ','
            << e.seq << ',' << flags << ',' << (e.checksum_ok() ? "ok" : "BAD") << ','
            << (logging::entry_valid(e, range) ? "yes" : "no") << '\n';
    }
}

} // namespace

void dump_log(Client& client, const PuddleId& id, std::ostream& out)
{
    ReadOnlyMaps maps(client);
    auto* d = maps.get(id);
    if (logging::LogSpace::is_log_space(*d)) {
        logging::LogSpace space(*d);
        out << "log space " << id.hex() << " capacity " << space.capacity() << '\n';
        for (const auto& e : space.entries()) {
            out << "  " << e.id.hex() << ' ' << (e.role == logging::LogRole::head ? "head" : "segment") << ' '
                << status_name(e.status) << '\n';
        }
        for (const auto& e : space.entries()) {
            if (e.role == logging::LogRole::head && e.status == logging::LogStatus::active) {
                dump_chain(maps, e.id, out);
            }
        }
        return;
    }
    dump_chain(maps, id, out);
}

} // namespace puddle
