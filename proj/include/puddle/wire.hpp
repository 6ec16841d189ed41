#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "puddle/bytes.hpp"
#include "puddle/fd.hpp"

// Client/daemon frame format.  Every frame starts with a 16-byte header:
//   u32 length   whole frame including the header
//   u16 code     request code; responses echo it
//   u16 status   0 in requests; Errc value in responses (0 = ok)
//   u64 id       chosen by the client, echoed in the response
// followed by the code-specific payload.  Capabilities travel as ancillary
// descriptors (SCM_RIGHTS) attached to the frame's first byte.
namespace puddle::wire {

inline constexpr std::size_t kHeader = 16;
inline constexpr std::uint32_t kMaxFrame = 256u << 20;
inline constexpr std::size_t kMaxFds = 8;

enum class Code : std::uint16_t {
    ping = 1,
    get_new_puddle = 2,
    get_exist_puddle = 3,
    free_puddle = 4,
    reg_log_space = 5,
    reg_ref_map = 6,
    create_pool = 7,
    open_pool = 8,
    export_pool = 9,
    import_bundle = 10,
    status = 11,
    // Extensions used by the runtime and puddlectl.
    lookup_addr = 32,
    reloc_info = 33,
    mark_relocated = 34,
    chmod = 35,
    shutdown = 36,
    list_ref_maps = 37,
    unreg_log_space = 38,
    list_pools = 39,
};

std::string_view code_name(Code code) noexcept;
bool known_code(std::uint16_t code) noexcept;

struct Frame {
    Code code = Code::ping;
    std::uint16_t status = 0;
    std::uint64_t id = 0;
    Bytes payload;
    std::vector<UniqueFd> fds;

    Errc errc() const noexcept { return static_cast<Errc>(status); }
};

Bytes encode_header(const Frame& frame);

/// Sends one frame with its descriptors.  Throws io_failure.
void send_frame(int sock, const Frame& frame);

/// Receives one frame.  Returns false on orderly EOF before any byte;
/// throws protocol_error on a malformed header and io_failure otherwise.
bool recv_frame(int sock, Frame& out);

/// Turns an error response into the corresponding `Error`.
void throw_if_error(const Frame& response);

} // namespace puddle::wire
