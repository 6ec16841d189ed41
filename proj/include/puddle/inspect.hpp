#pragma once

#include <iosfwd>

#include "puddle/client.hpp"

namespace puddle {

/// Renders a log (head segment and its chain) or a whole log space, read
/// through read-only capabilities.  One line per entry with its admission
/// under the log's current sequence range.
void dump_log(Client& client, const PuddleId& id, std::ostream& out);

} // namespace puddle
