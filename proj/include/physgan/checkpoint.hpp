#pragma once

#include <string>
#include <utility>
#include <vector>

#include "physgan/tensor.hpp"

namespace physgan {

// Checkpoint container: magic "PGT1", a manifest of (name, shape, dtype,
// byte offset) entries, then one flat little-endian float payload. Training
// math is 64-bit; 32-bit is an optional storage dtype for smaller files.
enum class CheckpointDtype { f64 = 0, f32 = 1 };

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor>>& tensors,
                     CheckpointDtype dtype = CheckpointDtype::f64);

// Entries in manifest order. IoError on missing/corrupt files.
std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path);

// Lookup helper; ContractError when `name` is absent.
const Tensor& checkpoint_entry(const std::vector<std::pair<std::string, Tensor>>& entries,
                               const std::string& name);

}  // namespace physgan
