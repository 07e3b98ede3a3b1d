#pragma once

#include <cstdint>
#include <string>

#include "dalir/tensor.hpp"

namespace dalir {

// Binary checkpoint, little-endian:
//   magic "DALR" | version u32 | entry count u32
//   per entry: name_len u16 | name bytes | rank u8 | dims u32[rank] | f32 payload
inline constexpr char kCheckpointMagic[4] = {'D', 'A', 'L', 'R'};
inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const ParamMap& params);
ParamMap load_checkpoint(const std::string& path);

// Restores by name into existing tensors; every given param must be present
// in the file with a matching shape. Extra file entries (optimizer moments)
// are ignored.
void load_checkpoint_into(const std::string& path, ParamMap& params);

uint64_t hash_file(const std::string& path);

}  // namespace dalir
