#pragma once

#include <filesystem>

#include "mshr/tensor.hpp"

namespace mshr {

// Binary checkpoint, bit-exact across save/load:
//   magic "MSHR" | u32 version | u64 config-JSON length | config JSON
//   then per tensor: u32 name length | name | u8 dtype (0 = f32) | u8 ndim |
//   u64 dims... | little-endian f32 payload
// Writes go to a temp file followed by an atomic rename. Loading audits the
// tensor set against the embedded config and rejects partial files.
inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ParamSet& params, const std::filesystem::path& path);
ParamSet load_checkpoint(const std::filesystem::path& path);

}  // namespace mshr
