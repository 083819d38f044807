#include "pcgen/geometry.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

namespace pcgen {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

std::array<double, 3> normalized(std::array<double, 3> v) {
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    return {v[0] / n, v[1] / n, v[2] / n};
}

std::array<double, 3> cross(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

}  // namespace

void Pose::validate(int width, int height) const {
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double d = 0.0;
            for (int k = 0; k < 3; ++k) d += static_cast<double>(R[3 * k + i]) * R[3 * k + j];
            if (std::abs(d - (i == j ? 1.0 : 0.0)) > 1e-5) throw std::invalid_argument("pose rotation is not orthonormal");
        }
    const double det = static_cast<double>(R[0]) * (static_cast<double>(R[4]) * R[8] - static_cast<double>(R[5]) * R[7]) -
                       static_cast<double>(R[1]) * (static_cast<double>(R[3]) * R[8] - static_cast<double>(R[5]) * R[6]) +
                       static_cast<double>(R[2]) * (static_cast<double>(R[3]) * R[7] - static_cast<double>(R[4]) * R[6]);
    if (std::abs(det - 1.0) > 1e-5) throw std::invalid_argument("pose rotation has det " + std::to_string(det));
    if (!(K.f > 0.0f)) throw std::invalid_argument("focal length must be positive");
    if (!(K.cx >= 0.0f && K.cx < static_cast<float>(width) && K.cy >= 0.0f && K.cy < static_cast<float>(height)))
        throw std::invalid_argument("principal point outside the image");
}

Vec3 to_camera(const Pose& pose, const Vec3& p) {
    Vec3 q;
    for (int r = 0; r < 3; ++r) {
        double s = pose.t[r];
        s += static_cast<double>(pose.R[3 * r]) * p[0];
        s += static_cast<double>(pose.R[3 * r + 1]) * p[1];
        s += static_cast<double>(pose.R[3 * r + 2]) * p[2];
        q[r] = static_cast<float>(s);
    }
    return q;
}

Vec3 to_canonical(const Pose& pose, const Vec3& q) {
    const double d[3] = {static_cast<double>(q[0]) - pose.t[0], static_cast<double>(q[1]) - pose.t[1],
                         static_cast<double>(q[2]) - pose.t[2]};
    Vec3 p;
    for (int c = 0; c < 3; ++c)
        p[c] = static_cast<float>(pose.R[c] * d[0] + pose.R[3 + c] * d[1] + pose.R[6 + c] * d[2]);
    return p;
}

Pose compose(const Pose& second, const Pose& first) {
    Pose out;
    out.K = second.K;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            double s = 0.0;
            for (int k = 0; k < 3; ++k) s += static_cast<double>(second.R[3 * i + k]) * first.R[3 * k + j];
            out.R[3 * i + j] = static_cast<float>(s);
        }
        double s = second.t[i];
        for (int k = 0; k < 3; ++k) s += static_cast<double>(second.R[3 * i + k]) * first.t[k];
        out.t[i] = static_cast<float>(s);
    }
    return out;
}

Pose invert(const Pose& pose) {
    Pose out;
    out.K = pose.K;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) out.R[3 * i + j] = pose.R[3 * j + i];
    for (int i = 0; i < 3; ++i) {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s -= static_cast<double>(out.R[3 * i + k]) * pose.t[k];
        out.t[i] = static_cast<float>(s);
    }
    return out;
}

Pose look_at(const Vec3& center, const Intrinsics& K) {
    const std::array<double, 3> c{center[0], center[1], center[2]};
    const auto z = normalized({-c[0], -c[1], -c[2]});
    // Image v grows downward, so camera y is world "down" projected.
    const auto x = normalized(cross(z, {0.0, 1.0, 0.0}));
    const auto y = cross(z, x);
    Pose p;
    p.K = K;
    for (int j = 0; j < 3; ++j) {
        p.R[j] = static_cast<float>(x[j]);
        p.R[3 + j] = static_cast<float>(y[j]);
        p.R[6 + j] = static_cast<float>(z[j]);
    }
    for (int i = 0; i < 3; ++i) {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s -= static_cast<double>(p.R[3 * i + k]) * c[k];
        p.t[i] = static_cast<float>(s);
    }
    return p;
}

Pose orbit_pose(float radius, float azimuth_deg, float elevation_deg, const Intrinsics& K) {
    const double a = azimuth_deg * kDeg, e = elevation_deg * kDeg;
    const Vec3 c{static_cast<float>(radius * std::cos(e) * std::sin(a)), static_cast<float>(radius * std::sin(e)),
                 static_cast<float>(radius * std::cos(e) * std::cos(a))};
    return look_at(c, K);
}

PointCloud transform_points(const PointCloud& pc, const Pose& pose) {
    PointCloud out;
    out.xyz.resize(pc.xyz.size());
    for (std::size_t i = 0; i < pc.size(); ++i) {
        const Vec3 q = to_camera(pose, pc.point(i));
        out.xyz[3 * i] = q[0];
        out.xyz[3 * i + 1] = q[1];
        out.xyz[3 * i + 2] = q[2];
    }
    return out;
}

Intrinsics ViewConfig::intrinsics() const {
    const float s = static_cast<float>(image_size);
    return {focal > 0.0f ? focal : 2.0f * s, s / 2.0f, s / 2.0f};
}

Pose NovelViewSampler::sample(std::uint64_t phase, std::uint64_t step, std::uint64_t index) const {
    std::seed_seq seq{static_cast<std::uint32_t>(config_.seed), static_cast<std::uint32_t>(config_.seed >> 32),
                      static_cast<std::uint32_t>(phase), static_cast<std::uint32_t>(step),
                      static_cast<std::uint32_t>(step >> 32), static_cast<std::uint32_t>(index)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<float> az(0.0f, 360.0f);
    std::uniform_real_distribution<float> el(config_.novel_elevation_min_deg, config_.novel_elevation_max_deg);
    const float a = az(rng);
    const float e = el(rng);
    return orbit_pose(config_.radius, a, e, config_.intrinsics());
}

std::vector<Pose> NovelViewSampler::sample_many(std::uint64_t phase, std::uint64_t step, int count) const {
    std::vector<Pose> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) out.push_back(sample(phase, step, static_cast<std::uint64_t>(i)));
    return out;
}

ViewpointSet make_fixed_views(const ViewConfig& config) {
    if (!(config.radius > 0.0f)) throw std::invalid_argument("view radius must be positive");
    if (config.focal < 0.0f || config.image_size < 1) throw std::invalid_argument("focal and image size must be positive");
    ViewpointSet set{{}, NovelViewSampler(config)};
    const Intrinsics K = config.intrinsics();
    for (int i = 0; i < kFixedViews; ++i)
        set.fixed_views.push_back(orbit_pose(config.radius, 45.0f * static_cast<float>(i), config.elevation_deg, K));
    return set;
}

namespace {

Vec3 lift(const Pose& pose, int u, int v, float z) {
    const double x = static_cast<double>(z) * (u - static_cast<double>(pose.K.cx)) / pose.K.f;
    const double y = static_cast<double>(z) * (v - static_cast<double>(pose.K.cy)) / pose.K.f;
    return to_canonical(pose, {static_cast<float>(x), static_cast<float>(y), z});
}

// Shared by both backproject forms so they agree bit for bit whatever the
// optimizer does to each call site.
void lift_views(std::span<const float> depth, std::span<const float> mask, std::int64_t V, std::int64_t H,
                std::int64_t W, const std::vector<Pose>& poses, float threshold, std::vector<float>& pts,
                std::vector<std::int64_t>& pixel) {
    for (std::int64_t k = 0; k < V; ++k)
        for (std::int64_t v = 0; v < H; ++v)
            for (std::int64_t u = 0; u < W; ++u) {
                const std::int64_t i = (k * H + v) * W + u;
                if (!(mask[static_cast<std::size_t>(i)] >= threshold)) continue;
                const Vec3 p = lift(poses[static_cast<std::size_t>(k)], static_cast<int>(u), static_cast<int>(v),
                                    depth[static_cast<std::size_t>(i)]);
                pts.insert(pts.end(), p.begin(), p.end());
                pixel.push_back(i);
            }
}

}  // namespace

PointCloud backproject(const std::vector<DepthMaskView>& views, const std::vector<Pose>& poses, float mask_threshold) {
    if (views.size() != poses.size())
        throw std::invalid_argument("backproject: " + std::to_string(views.size()) + " views but " +
                                    std::to_string(poses.size()) + " poses");
    PointCloud pc;
    std::vector<std::int64_t> pixel;
    for (std::size_t k = 0; k < views.size(); ++k) {
        const auto& view = views[k];
        if (view.depth.size() != view.pixels() || view.mask.size() != view.pixels())
            throw std::invalid_argument("backproject: view buffers do not match its size");
        lift_views(view.depth, view.mask, 1, view.height, view.width, {poses[k]}, mask_threshold, pc.xyz, pixel);
    }
    return pc;
}

BackprojectResult backproject(const Tensor& depth, const std::vector<float>& mask_prob, const std::vector<Pose>& poses,
                              float mask_threshold) {
    if (depth.ndim() != 3) throw ShapeError("backproject expects depth [V,H,W], got " + shape_str(depth.shape()));
    const auto V = depth.dim(0), H = depth.dim(1), W = depth.dim(2);
    if (static_cast<std::size_t>(V) != poses.size())
        throw std::invalid_argument("backproject: " + std::to_string(V) + " views but " + std::to_string(poses.size()) +
                                    " poses");
    if (mask_prob.size() != depth.numel()) throw ShapeError("backproject: mask size differs from depth");

    BackprojectResult out;
    std::vector<float> pts;
    lift_views(depth.data(), mask_prob, V, H, W, poses, mask_threshold, pts, out.pixel);
    if (out.pixel.empty()) return out;

    // dp/dz = R^T ((u-cx)/f, (v-cy)/f, 1): the lift is linear in z.
    std::vector<float> dir(pts.size());
    for (std::size_t n = 0; n < out.pixel.size(); ++n) {
        const std::int64_t i = out.pixel[n];
        const std::int64_t k = i / (H * W), v = (i / W) % H, u = i % W;
        const Pose& pose = poses[static_cast<std::size_t>(k)];
        const double a = (u - static_cast<double>(pose.K.cx)) / pose.K.f;
        const double b = (v - static_cast<double>(pose.K.cy)) / pose.K.f;
        for (int c = 0; c < 3; ++c) dir[3 * n + c] = static_cast<float>(pose.R[c] * a + pose.R[3 + c] * b + pose.R[6 + c]);
    }
    auto pixel = out.pixel;
    const std::int64_t N = static_cast<std::int64_t>(pixel.size());
    out.points = detail::make_result("backproject", {N, 3}, std::move(pts), {&depth},
                                     [depth, pixel, dir](std::span<const float> g) {
                                         float* gd = detail::grad_of(depth);
                                         if (!gd) return;
                                         for (std::size_t n = 0; n < pixel.size(); ++n) {
                                             double s = 0.0;
                                             for (int c = 0; c < 3; ++c)
                                                 s += static_cast<double>(g[3 * n + c]) * dir[3 * n + c];
                                             gd[pixel[n]] += static_cast<float>(s);
                                         }
                                     });
    return out;
}

}  // namespace pcgen
