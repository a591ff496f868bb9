#pragma once

#include <string>

#include "bevit/image.hpp"

namespace bevit::img {

// 8-bit RGB PNG carrier. Values quantize with round(v * 255) on write and map
// back as v / 255 on read.
void write_png(const std::string& path, const Image& im);
Image read_png(const std::string& path);

}  // namespace bevit::img
