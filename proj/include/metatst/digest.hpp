#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace metatst {

using Digest = std::array<std::uint8_t, 32>;

/// SHA-256 of the concatenation of `parts`, each followed by a 0x00 separator.
Digest sha256_parts(std::initializer_list<std::string_view> parts);
Digest sha256(std::span<const std::uint8_t> bytes);

std::string to_hex(const Digest& d);

}  // namespace metatst
