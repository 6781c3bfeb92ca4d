#pragma once

#include <chrono>
#include <optional>
#include <string>
#include <string_view>

namespace metatst {

using Timestamp = std::chrono::sys_seconds;

/// Accepts "YYYY-MM-DDTHH:MM:SS" and "YYYY-MM-DD HH:MM:SS". Anything else is rejected.
std::optional<Timestamp> parse_timestamp(std::string_view text);

/// Formats as "YYYY-MM-DDTHH:MM:SS".
std::string format_iso(Timestamp t);

}  // namespace metatst
