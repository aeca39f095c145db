#pragma once

// Checkpoint container: magic "A2DM", u16 format version, u32 tensor count,
// then per tensor u16 name length + UTF-8 name, u8 rank, u32 dims, raw
// little-endian 32-bit floats. An optional metadata trailer (u32 length +
// JSON bytes) follows the tensor section. Round trips are byte-exact.

#include "a2dmn/model.hpp"

#include <string>

namespace a2dmn {

constexpr std::uint16_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const ParamStore<float>& params,
                     const std::string& meta_json = "");
ParamStore<float> load_checkpoint(const std::string& path, std::string* meta_json = nullptr);

}  // namespace a2dmn
