#include "puddle/refmap.hpp"

namespace puddle {

void ReferenceMap::validate() const
{
    for (std::size_t i = 0; i < slots.size(); ++i) {
        if (slots[i].offset % 8 != 0) {
            fail(Errc::bad_map, "reference slot offset not 8-byte aligned");
        }
        if (i > 0 && slots[i].offset <= slots[i - 1].offset) {
            fail(Errc::bad_map, "reference slot offsets must strictly increase");
        }
    }
}

void ReferenceMap::encode(Writer& w) const
{
    w.u64(type_id).str(name).u32(static_cast<std::uint32_t>(slots.size()));
    for (const auto& s : slots) {
        w.u64(s.offset).u64(s.target);
    }
}

ReferenceMap ReferenceMap::decode(Reader& r)
{
    ReferenceMap m;
    m.type_id = r.u64();
    m.name = r.str();
    auto n = r.u32();
    if (n > r.remaining() / 16) {
        fail(Errc::protocol_error, "reference map slot count overruns record");
    }
    m.slots.resize(n);
    for (auto& s : m.slots) {
        s.offset = r.u64();
        s.target = r.u64();
    }
    return m;
}

} // namespace puddle
