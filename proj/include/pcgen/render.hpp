#pragma once

#include <cstdint>
#include <vector>

#include "pcgen/geometry.hpp"
#include "pcgen/tensor.hpp"

namespace pcgen {

struct RenderConfig {
    int height = 128;
    int width = 128;
    int upsample = 5;
    float z_bg = 40.0f;  // 10 x camera radius
    /// Mask logit emitted at pixels no point reaches.
    float background_logit = -5.0f;

    void validate() const;
};

struct RenderMeta {
    std::size_t input_points = 0;
    std::size_t dropped_behind = 0;   // camera z <= 0
    std::size_t dropped_outside = 0;  // projects outside the image
    std::size_t lit_pixels = 0;
    /// Nonempty input but nothing landed in the image.
    bool all_dropped = false;
};

struct RenderResult {
    DepthMaskView view;                // mask in {0,1}, flagged as probability
    std::vector<std::int64_t> winner;  // per pixel point index, -1 if unlit
    RenderMeta meta;
};

/// Reference renderer: one pass over the points in index order with a scalar
/// z-buffer at output resolution. Strict comparison keeps the lowest index on
/// equal depths.
RenderResult brute_force_render(const PointCloud& pc, const Pose& pose, const RenderConfig& cfg);

/// Projects onto a U*H x U*W grid, keeps the max inverse depth per fine
/// pixel, then max-pools U x U windows down to H x W. Ties go to the lowest
/// point index. Parallel over output pixels; output equals
/// brute_force_render exactly.
RenderResult pseudo_render(const PointCloud& pc, const Pose& pose, const RenderConfig& cfg);

struct RenderedTensors {
    Tensor depth;        // [H, W]; lit pixels carry the winner's camera z
    Tensor mask_logits;  // [H, W]; winner's logit, background_logit if unlit
    RenderResult raster;
};

/// Differentiable pseudo_render. `points` is [N, 3] (or undefined for an
/// empty cloud); `logits` is [N] or undefined. The depth gradient reaches the
/// winning point only, through its camera-z row; the mask gradient reaches
/// the winner's logit. Selection itself is piecewise constant.
RenderedTensors pseudo_render(const Tensor& points, const Tensor& logits, const Pose& pose, const RenderConfig& cfg);

}  // namespace pcgen
