#pragma once

#include <string>

#include "qvae/nn.hpp"

namespace qvae {

// Binary parameter checkpoint, little-endian throughout:
//   magic "QVAE" | version u32 (=1) | tensor count u32 | entries
// each entry:
//   name length u32 | name bytes | rank u32 (=2) | dims u64 x rank |
//   float64 payload, column-major
void save_checkpoint(const ParameterStore& store, const std::string& path);

// Loads into an existing store: every stored tensor must already exist with
// the same shape, and every store parameter must be present in the file.
void load_checkpoint(ParameterStore& store, const std::string& path);

}  // namespace qvae
