#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "pcgen/tensor.hpp"

namespace pcgen {

struct Intrinsics {
    float f = 256.0f;
    float cx = 64.0f;
    float cy = 64.0f;
};

/// Rigid canonical->camera transform plus pinhole intrinsics.
/// Camera looks down +z; image u grows with +x, v with +y.
struct Pose {
    std::array<float, 9> R{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major
    std::array<float, 3> t{0, 0, 0};
    Intrinsics K;

    /// Throws std::invalid_argument if R is not a rotation (1e-5) or the
    /// intrinsics do not fit a width x height image.
    void validate(int width, int height) const;
};

using Vec3 = std::array<float, 3>;

/// R p + t, accumulated in double and rounded once. Every renderer and the
/// back-projection go through this so they agree bit for bit.
Vec3 to_camera(const Pose& pose, const Vec3& p);
/// R^T (q - t).
Vec3 to_canonical(const Pose& pose, const Vec3& q);

/// `second` applied after `first`. Intrinsics are taken from `second`.
Pose compose(const Pose& second, const Pose& first);
Pose invert(const Pose& pose);

/// Camera at `center` looking at the origin with world +y as up.
Pose look_at(const Vec3& center, const Intrinsics& K);
/// Center r (cos e sin a, sin e, cos e cos a), angles in degrees.
Pose orbit_pose(float radius, float azimuth_deg, float elevation_deg, const Intrinsics& K);

struct PointCloud {
    std::vector<float> xyz;  // N x 3, row-major

    std::size_t size() const { return xyz.size() / 3; }
    bool empty() const { return xyz.empty(); }
    Vec3 point(std::size_t i) const { return {xyz[3 * i], xyz[3 * i + 1], xyz[3 * i + 2]}; }
};

PointCloud transform_points(const PointCloud& pc, const Pose& pose);

struct DepthMaskView {
    int height = 0;
    int width = 0;
    std::vector<float> depth;  // height x width
    std::vector<float> mask;   // height x width
    bool mask_is_probability = true;

    std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
};

struct ViewConfig {
    int image_size = 128;
    float focal = 0.0f;  // 0 -> 2 * image_size
    float radius = 4.0f;
    float elevation_deg = 20.0f;
    float novel_elevation_min_deg = -10.0f;
    float novel_elevation_max_deg = 45.0f;
    std::uint64_t seed = 0;

    Intrinsics intrinsics() const;
};

/// Random viewpoints for the projection loss. Stateless: each pose is a pure
/// function of (seed, phase, step, index), so resuming a run replays the
/// same views without saving sampler state.
class NovelViewSampler {
public:
    explicit NovelViewSampler(ViewConfig config) : config_(config) {}
    Pose sample(std::uint64_t phase, std::uint64_t step, std::uint64_t index) const;
    std::vector<Pose> sample_many(std::uint64_t phase, std::uint64_t step, int count) const;

private:
    ViewConfig config_;
};

inline constexpr int kFixedViews = 8;

struct ViewpointSet {
    std::vector<Pose> fixed_views;
    NovelViewSampler novel;
};

/// Eight cameras at azimuths 0, 45, ..., 315 degrees on a ring of the
/// configured radius and elevation, looking at the origin.
ViewpointSet make_fixed_views(const ViewConfig& config);

/// Lifts every pixel with mask >= threshold through the pinhole model and
/// into the canonical frame. Points are emitted view by view, row-major.
PointCloud backproject(const std::vector<DepthMaskView>& views, const std::vector<Pose>& poses,
                       float mask_threshold);

struct BackprojectResult {
    Tensor points;                    // [N, 3]; undefined when N == 0
    std::vector<std::int64_t> pixel;  // flat index into [V, H, W] per point
};

/// Differentiable form: depth [V, H, W] -> points [N, 3]. `mask_prob` holds
/// V*H*W probabilities that only select pixels (no gradient).
BackprojectResult backproject(const Tensor& depth, const std::vector<float>& mask_prob,
                              const std::vector<Pose>& poses, float mask_threshold);

}  // namespace pcgen
