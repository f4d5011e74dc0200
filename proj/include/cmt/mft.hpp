#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "cmt/tensor.hpp"

namespace cmt {

// "MFT1" tensor container: magic `MFT1`, u32-le rank, rank x u32-le dims,
// u8 dtype tag (0 = f32, 1 = f64), then raw little-endian values.
// Used for modality maps, golden fixtures, and checkpoint payloads.

void write_mft_f32(std::ostream& out, const TensorF& t);
void write_mft_f64(std::ostream& out, const TensorD& t);
void save_mft_f32(const std::string& path, const TensorF& t);
void save_mft_f64(const std::string& path, const TensorD& t);

// Reads either dtype; f64 payloads are narrowed when read as f32 and vice
// versa widened, with `was_f64` reporting the stored tag when non-null.
TensorF read_mft_f32(std::istream& in, bool* was_f64 = nullptr);
TensorD read_mft_f64(std::istream& in, bool* was_f64 = nullptr);
TensorF load_mft_f32(const std::string& path);
TensorD load_mft_f64(const std::string& path);

}  // namespace cmt
