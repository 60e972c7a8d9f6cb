#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mtscene {

// Thin wrappers over libpng for the three pixel formats the dataset uses.
// All rows are tightly packed, top to bottom.

void write_png_rgb8(const std::string& path, const std::vector<uint8_t>& rgb, int64_t h, int64_t w);
std::vector<uint8_t> read_png_rgb8(const std::string& path, int64_t& h, int64_t& w);

// 8-bit indexed (palette) PNG; pixel values are palette indices.
void write_png_index8(const std::string& path, const std::vector<uint8_t>& idx, int64_t h, int64_t w);
std::vector<uint8_t> read_png_index8(const std::string& path, int64_t& h, int64_t& w);

void write_png_gray16(const std::string& path, const std::vector<uint16_t>& gray, int64_t h, int64_t w);
std::vector<uint16_t> read_png_gray16(const std::string& path, int64_t& h, int64_t& w);

}  // namespace mtscene
