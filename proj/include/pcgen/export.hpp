#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcgen/geometry.hpp"
#include "pcgen/tensor.hpp"

// File exports for offline inspection: ASCII PLY clouds, 16-bit PNG depth
// previews and PNG input images.
namespace pcgen {

class ExportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// `ply / format ascii 1.0` with float x y z vertex properties.
void write_ply(const std::filesystem::path& path, const PointCloud& pc);
/// Reads ASCII PLY with at least x y z float/double vertex properties.
PointCloud read_ply(const std::filesystem::path& path);

/// Depth preview encoding: value = round(depth * scale) clamped to
/// [1, 65535] for lit pixels (mask >= threshold), 0 for background.
struct DepthPngEncoding {
    double scale = 1000.0;  // 1 unit = 1/1000 world units
    float threshold = 0.5f;

    nlohmann::json to_json() const;
};

void write_depth_png(const std::filesystem::path& path, const DepthMaskView& view, const DepthPngEncoding& enc);

struct Gray16 {
    int width = 0, height = 0;
    std::vector<std::uint16_t> pixels;
};
Gray16 read_gray16_png(const std::filesystem::path& path);

/// Any PNG as [3, H, W] in [0, 1] (gray expanded, alpha dropped).
Tensor read_rgb_png(const std::filesystem::path& path);
void write_rgb_png(const std::filesystem::path& path, const Tensor& image);

}  // namespace pcgen
