#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "modseg/tensor.hpp"

namespace modseg {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
    std::string name;
    ad::Shape shape;
    Eigen::ArrayXd values;
};

/*
 * Layout (all integers little-endian):
 *   "MSEGCKPT" u32 version u32 count
 *   count x { u32 name_len, name bytes, u32 ndim, ndim x i64 dim }
 *   all values as little-endian IEEE doubles, in entry order
 */
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& entries);
std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedArray>& entries);
std::vector<NamedArray> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

}  // namespace modseg
