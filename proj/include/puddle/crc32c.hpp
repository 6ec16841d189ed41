#pragma once

#include <cstdint>
#include <initializer_list>

#include "puddle/bytes.hpp"

namespace puddle {

/// CRC-32C (Castagnoli), reflected, init/xorout 0xFFFFFFFF.
std::uint32_t crc32c(ByteSpan bytes) noexcept;

/// CRC-32C over the concatenation of several byte ranges.
std::uint32_t crc32c(std::initializer_list<ByteSpan> parts) noexcept;

} // namespace puddle
