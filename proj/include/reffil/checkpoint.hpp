#pragma once

#include <string>

#include "reffil/model.hpp"

namespace reffil {

/// Binary parameter container (little-endian):
///   magic "RFLCKPT1" | u64 key_init_seed | u64 n_entries |
///   per entry: u32 name_len | name | u64 rows | u64 cols | rows*cols f64
/// Entries appear in the canonical manifest order; matrix values are stored
/// column-major as held in memory.
void save_checkpoint(const ModelParams& params, const std::string& path);

/// Rebuilds the parameter set; entry names and shapes must match the
/// manifest implied by `cfg` (task-key entries are recreated from their
/// names). Throws std::runtime_error on malformed or mismatched files.
ModelParams load_checkpoint(const std::string& path, const ModelConfig& cfg);

}  // namespace reffil
