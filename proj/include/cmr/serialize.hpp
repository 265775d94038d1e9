#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "cmr/tensor.hpp"

namespace cmr {

// All on-disk numbers are little-endian regardless of host order.
void write_u32(std::ostream& os, std::uint32_t v);
std::uint32_t read_u32(std::istream& is);
void write_f64(std::ostream& os, double v);
double read_f64(std::istream& is);

/// Tensor snapshot: rank (u32), dims (u32 each), then row-major f64 payload.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

/// Reads tensor payload into an existing tensor, checking the shape.
void read_tensor_into(std::istream& is, Tensor& t);

std::string read_file_bytes(const std::string& path);

}  // namespace cmr
