#pragma once

#include <string>

#include "hmeta/params.hpp"

namespace hmeta {

/// Binary format: magic "HMETACKP", version byte, record count, then
/// (name, shape, raw f64 data) per parameter in registry order. A JSON
/// sidecar at <path>.json mirrors names and shapes for inspection.
void save_checkpoint(const std::string& path, const ParamRegistry& params);

/// Loads values into an already-built registry. Names, shapes and order
/// must match exactly.
void load_checkpoint(const std::string& path, ParamRegistry& params);

}  // namespace hmeta
