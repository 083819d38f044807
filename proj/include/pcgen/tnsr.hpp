#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcgen/tensor.hpp"

// "TNSR" container: magic `TNSR`, u32 version (1), u32 dtype (0 = f32),
// u32 ndim, ndim x u64 dims, then the row-major little-endian payload.
namespace pcgen::tnsr {

inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint32_t kDtypeF32 = 0;

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::vector<unsigned char> encode(const Tensor& t);
Tensor decode(const std::vector<unsigned char>& bytes);

void save(const std::filesystem::path& path, const Tensor& t);
/// Throws FormatError on a bad header or truncated payload.
Tensor load(const std::filesystem::path& path);

}  // namespace pcgen::tnsr
