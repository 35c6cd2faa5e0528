#pragma once

#include <string>

#include "duq/tensor.hpp"

namespace duq {

// DMAP: "DMAP" magic, u32 LE version=1, u32 C, u32 H, u32 W, then C*H*W
// float32 LE values, channel-major, row-major within channel.
//
// write/read round-trips exactly up to float32 rounding. read rejects bad
// magic, wrong version, truncated payloads and non-finite values, naming
// the byte offset.
void write_dmap(const std::string& path, const TensorMap& map);
TensorMap read_dmap(const std::string& path);

// 8-bit binary PGM (P5, maxval 255), value = round(255 * clamp(v, 0, 1)).
// Multi-channel maps are stacked vertically.
void write_pgm(const std::string& path, const TensorMap& map);

}  // namespace duq
