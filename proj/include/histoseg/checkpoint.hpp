#pragma once

#include <string>

#include "histoseg/network.hpp"

namespace histoseg {

// Binary model snapshot. Layout, all integers little-endian:
//
//   magic "HSEG" | version u32 = 1 | tensor count u32
//   per tensor: name length u16 | UTF-8 name | dtype u8 (0 = 32-bit float)
//               | ndim u8 | extents u32 each | raw little-endian values
//
// Tensors are written in parameter-store registration order, trainable and
// running statistics alike, so a round trip restores the full model state
// byte for byte.
void save_checkpoint(const std::string& path, const ParameterStore& params);

// Copies values from the file into the matching store tensors in place.
// Every tensor in the file must exist in the store with the same shape, and
// every store tensor must appear in the file. Throws std::runtime_error with
// a distinct message for an unreadable file, bad magic, unsupported version
// or dtype, truncation, an unknown or missing tensor, and a shape mismatch
// (naming the first offending tensor in file order).
void load_checkpoint(const std::string& path, ParameterStore& params);

}  // namespace histoseg
