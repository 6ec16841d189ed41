#pragma once

#include <string>
#include <string_view>
#include <system_error>

namespace puddle {

enum class Errc {
    ok = 0,
    io_failure,
    capacity_not_aligned,
    out_of_bounds,
    read_only,
    bad_size,
    out_of_storage,
    space_exhausted,
    space_in_use,
    already_assigned,
    not_assigned,
    not_mapped,
    no_capability,
    log_full,
    bad_target,
    invalid_range,
    corrupt_log,
    puddle_not_owned,
    not_in_tx,
    unwritable_range,
    out_of_space,
    invalid_address,
    double_free,
    corrupt_metadata,
    not_in_root_puddle,
    conflicting_map,
    unknown_type,
    wild_address,
    pool_busy,
    version_mismatch,
    corrupt_bundle,
    lock_held,
    corrupt_state,
    permission_denied,
    unknown_uuid,
    unknown_pool,
    pool_exists,
    not_owner,
    already_registered,
    protocol_error,
    daemon_unreachable,
    validation_mismatch,
    bad_map,
};

const std::error_category& puddle_category() noexcept;

inline std::error_code make_error_code(Errc e) noexcept
{
    return {static_cast<int>(e), puddle_category()};
}

/// All library failures are reported as `puddle::Error`; `errc()` identifies
/// the contract-level error named by the operation.
class Error : public std::system_error {
public:
    Error(Errc code, const std::string& what) : std::system_error(make_error_code(code), what), message_(what) {}

    Errc errc() const noexcept { return static_cast<Errc>(code().value()); }
    /// The text without the error name suffix that `what()` carries.
    const std::string& message() const noexcept { return message_; }

private:
    std::string message_;
};

[[noreturn]] void fail(Errc code, std::string_view what);

std::string_view errc_name(Errc code) noexcept;

} // namespace puddle

template <>
struct std::is_error_code_enum<puddle::Errc> : std::true_type {};
