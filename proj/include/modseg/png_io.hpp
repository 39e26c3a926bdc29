#pragma once

#include <filesystem>

#include "modseg/spectro.hpp"

namespace modseg::png {

// 8-bit PNG without ancillary chunks, so identical pixels give identical bytes.
void write_rgb(const std::filesystem::path& path, const RgbImage& img);
void write_gray(const std::filesystem::path& path, const Plane8& plane);

RgbImage read_rgb(const std::filesystem::path& path);
Plane8 read_gray(const std::filesystem::path& path);

}  // namespace modseg::png
