// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "apd/params.hpp"

namespace apd {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary little-endian encoding: "APDC", a u32 version, then tagged sections
/// each prefixed by its byte length. tau and the locally-shared blocks are
/// stored as (u64 index, f64 value) pairs over their nonzero bit patterns, so
/// a negative zero survives the round trip. Restore targets are transient and
/// not stored.
std::string encode_checkpoint(const DecomposedState& state);
DecomposedState decode_checkpoint(const std::string& bytes);

void save(const DecomposedState& state, const std::filesystem::path& path);
DecomposedState load(const std::filesystem::path& path);

}  // namespace apd
