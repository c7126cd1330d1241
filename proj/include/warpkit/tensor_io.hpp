#pragma once

#include <filesystem>

#include "warpkit/tensor.hpp"

namespace warpkit {

// Binary tensor file, little-endian:
//   magic "WKT1" | u32 rank | u32 dims[rank] | u8 dtype (0=f32, 1=f64) | payload
// payload is row-major, float for f32 and double for f64.
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace warpkit
