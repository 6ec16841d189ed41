#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "puddle/alloc.hpp"
#include "puddle/bytes.hpp"

namespace puddle {

/// Marks a reference slot whose target type is not tracked.
inline constexpr alloc::TypeId kOpaqueTarget = 0;

struct RefSlot {
    std::uint64_t offset = 0;
    alloc::TypeId target = kOpaqueTarget;
    bool operator==(const RefSlot&) const = default;
};

/// Offsets of embedded global-space references inside objects of one type.
struct ReferenceMap {
    alloc::TypeId type_id = 0;
    std::string name;
    std::vector<RefSlot> slots;

    /// Offsets strictly increasing and 8-byte aligned; throws bad_map.
    void validate() const;
    /// Same type and slots (the name is informational).
    bool same_layout(const ReferenceMap& other) const noexcept
    {
        return type_id == other.type_id && slots == other.slots;
    }

    void encode(Writer& w) const;
    static ReferenceMap decode(Reader& r);
};

inline ReferenceMap make_reference_map(std::string name, std::vector<RefSlot> slots)
{
    return {alloc::type_id_of(name), std::move(name), std::move(slots)};
}

} // namespace puddle
