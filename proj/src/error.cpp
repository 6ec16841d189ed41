#include "puddle/error.hpp"

namespace puddle {

namespace {

class PuddleCategory final : public std::error_category {
public:
    const char* name() const noexcept override { return "puddle"; }
    std::string message(int ev) const override
    {
        return std::string(errc_name(static_cast<Errc>(ev)));
    }
};

} // namespace

const std::error_category& puddle_category() noexcept
{
    static const PuddleCategory category;
    return category;
}

void fail(Errc code, std::string_view what)
{
    throw Error(code, std::string(what));
}

std::string_view errc_name(Errc code) noexcept
{
    switch (code) {
    case Errc::ok: return "ok";
    case Errc::io_failure: return "io-failure";
    case Errc::capacity_not_aligned: return "capacity-not-aligned";
    case Errc::out_of_bounds: return "out-of-bounds";
    case Errc::read_only: return "read-only";
    case Errc::bad_size: return "bad-size";
    case Errc::out_of_storage: return "out-of-storage";
    case Errc::space_exhausted: return "space-exhausted";
    case Errc::space_in_use: return "space-in-use";
    case Errc::already_assigned: return "already-assigned";
    case Errc::not_assigned: return "not-assigned";
    case Errc::not_mapped: return "not-mapped";
    case Errc::no_capability: return "no-capability";
    case Errc::log_full: return "log-full";
    case Errc::bad_target: return "bad-target";
    case Errc::invalid_range: return "invalid-range";
    case Errc::corrupt_log: return "corrupt-log";
    case Errc::puddle_not_owned: return "puddle-not-owned";
    case Errc::not_in_tx: return "not-in-tx";
    case Errc::unwritable_range: return "unwritable-range";
    case Errc::out_of_space: return "out-of-space";
    case Errc::invalid_address: return "invalid-address";
    case Errc::double_free: return "double-free";
    case Errc::corrupt_metadata: return "corrupt-metadata";
    case Errc::not_in_root_puddle: return "not-in-root-puddle";
    case Errc::conflicting_map: return "conflicting-map-for-type";
    case Errc::unknown_type: return "unknown-type";
    case Errc::wild_address: return "wild-address";
    case Errc::pool_busy: return "pool-busy";
    case Errc::version_mismatch: return "version-mismatch";
    case Errc::corrupt_bundle: return "corrupt-bundle";
    case Errc::lock_held: return "lock-held";
    case Errc::corrupt_state: return "corrupt-state";
    case Errc::permission_denied: return "permission-denied";
    case Errc::unknown_uuid: return "unknown-uuid";
    case Errc::unknown_pool: return "unknown-pool";
    case Errc::pool_exists: return "pool-exists";
    case Errc::not_owner: return "not-owner";
    case Errc::already_registered: return "already-registered";
    case Errc::protocol_error: return "protocol-error";
    case Errc::daemon_unreachable: return "daemon-unreachable";
    case Errc::validation_mismatch: return "validation-mismatch";
    case Errc::bad_map: return "bad-map";
    }
    return "unknown";
}

} // namespace puddle
