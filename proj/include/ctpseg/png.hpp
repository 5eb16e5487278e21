#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ctpseg {

// Minimal 8-bit RGB PNG writer (zlib-compressed, filter 0).
void write_png_rgb(const std::string& path, int width, int height,
                   const std::vector<std::uint8_t>& rgb);

}  // namespace ctpseg
