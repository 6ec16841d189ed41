#include <fcntl.h>

#include <boost/crc.hpp>

#include "puddle/crc32c.hpp"
#include "puddle/fd.hpp"

namespace puddle {

namespace {
using Crc32c = boost::crc_optimal<32, 0x1EDC6F41, 0xFFFFFFFF, 0xFFFFFFFF, true, true>;
}

UniqueFd UniqueFd::dup() const
{
    if (fd_ < 0) {
        return {};
    }
    int copy = ::fcntl(fd_, F_DUPFD_CLOEXEC, 0);
    if (copy < 0) {
        fail(Errc::io_failure, "dup failed");
    }
    return UniqueFd(copy);
}

std::uint32_t crc32c(ByteSpan bytes) noexcept
{
    Crc32c crc;
    crc.process_bytes(bytes.data(), bytes.size());
    return crc.checksum();
}

std::uint32_t crc32c(std::initializer_list<ByteSpan> parts) noexcept
{
    Crc32c crc;
    for (auto part : parts) {
        crc.process_bytes(part.data(), part.size());
    }
    return crc.checksum();
}

} // namespace puddle
