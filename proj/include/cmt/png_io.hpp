#pragma once

#include <string>

#include "cmt/tensor.hpp"

namespace cmt {

// 8-bit RGB PNG in/out. Values are [0,1] floats in [H,W,3] tensors; gray and
// RGBA files are expanded/flattened to RGB on read.
TensorF read_png(const std::string& path);
void write_png(const std::string& path, const TensorF& image);

}  // namespace cmt
