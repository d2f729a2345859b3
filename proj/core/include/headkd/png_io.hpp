#pragma once

#include "headkd/tensor.hpp"

#include <string>

namespace headkd {

// (3,H,W) tensor in [0,1] <-> 8-bit RGB file. Values are clamped on write.
void write_png_rgb(const std::string& path, const Tensor& image);
Tensor read_png_rgb(const std::string& path);

}  // namespace headkd
