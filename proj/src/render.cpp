#include "pcgen/render.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace pcgen {

void RenderConfig::validate() const {
    if (height < 1 || width < 1) throw std::invalid_argument("render size must be positive");
    if (upsample < 1) throw std::invalid_argument("render upsample factor must be >= 1, got " + std::to_string(upsample));
    if (!(z_bg > 0.0f)) throw std::invalid_argument("background depth must be positive");
}

namespace {

enum class Fate { lit, behind, outside };

struct Projection {
    Fate fate = Fate::outside;
    float z = 0.0f;
    std::int64_t pixel = -1;  // output-resolution flat index
    int sub = 0;              // flat index inside the U x U fine window
};

// Pixel centers sit at integer coordinates, so pixel px covers
// [px - 0.5, px + 0.5). The fine cell is derived from the same offset, which
// guarantees that a fine pixel never straddles two output pixels. Kept out
// of line: both renderers must round identically, and at -O3 GCC vectorizes
// inlined copies of this arithmetic differently per call site.
[[gnu::noinline]] Projection project(const Pose& pose, const Vec3& p, const RenderConfig& cfg) {
    Projection out;
    const Vec3 q = to_camera(pose, p);
    out.z = q[2];
    if (!(q[2] > 0.0f)) {
        out.fate = Fate::behind;
        return out;
    }
    const double u = static_cast<double>(pose.K.f) * q[0] / q[2] + pose.K.cx + 0.5;
    const double v = static_cast<double>(pose.K.f) * q[1] / q[2] + pose.K.cy + 0.5;
    const double px = std::floor(u), py = std::floor(v);
    if (!(px >= 0.0 && px < cfg.width && py >= 0.0 && py < cfg.height)) return out;
    const int U = cfg.upsample;
    const int sx = std::min(U - 1, static_cast<int>((u - px) * U));
    const int sy = std::min(U - 1, static_cast<int>((v - py) * U));
    out.fate = Fate::lit;
    out.pixel = static_cast<std::int64_t>(py) * cfg.width + static_cast<std::int64_t>(px);
    out.sub = sy * U + sx;
    return out;
}

RenderResult empty_result(const PointCloud& pc, const RenderConfig& cfg) {
    RenderResult r;
    r.view.height = cfg.height;
    r.view.width = cfg.width;
    r.view.depth.assign(r.view.pixels(), cfg.z_bg);
    r.view.mask.assign(r.view.pixels(), 0.0f);
    r.view.mask_is_probability = true;
    r.winner.assign(r.view.pixels(), -1);
    r.meta.input_points = pc.size();
    return r;
}

void finish_meta(RenderResult& r) {
    std::size_t lit = 0;
    for (auto w : r.winner) lit += w >= 0;
    r.meta.lit_pixels = lit;
    r.meta.all_dropped = r.meta.input_points > 0 && lit == 0;
}

}  // namespace

RenderResult brute_force_render(const PointCloud& pc, const Pose& pose, const RenderConfig& cfg) {
    cfg.validate();
    RenderResult r = empty_result(pc, cfg);
    for (std::size_t i = 0; i < pc.size(); ++i) {
        const Projection p = project(pose, pc.point(i), cfg);
        if (p.fate == Fate::behind) {
            ++r.meta.dropped_behind;
            continue;
        }
        if (p.fate == Fate::outside) {
            ++r.meta.dropped_outside;
            continue;
        }
        const auto k = static_cast<std::size_t>(p.pixel);
        if (r.winner[k] < 0 || p.z < r.view.depth[k]) {
            r.view.depth[k] = p.z;
            r.view.mask[k] = 1.0f;
            r.winner[k] = static_cast<std::int64_t>(i);
        }
    }
    finish_meta(r);
    return r;
}

RenderResult pseudo_render(const PointCloud& pc, const Pose& pose, const RenderConfig& cfg) {
    cfg.validate();
    RenderResult r = empty_result(pc, cfg);
    const auto n = static_cast<std::int64_t>(pc.size());
    const auto npix = static_cast<std::int64_t>(r.view.pixels());
    const int U = cfg.upsample;

    std::vector<Projection> proj(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) proj[static_cast<std::size_t>(i)] = project(pose, pc.point(static_cast<std::size_t>(i)), cfg);

    // Stable counting sort of point indices by output pixel.
    std::vector<std::int64_t> start(static_cast<std::size_t>(npix) + 1, 0);
    for (const auto& p : proj) {
        if (p.fate == Fate::behind) ++r.meta.dropped_behind;
        else if (p.fate == Fate::outside) ++r.meta.dropped_outside;
        else ++start[static_cast<std::size_t>(p.pixel) + 1];
    }
    for (std::int64_t k = 0; k < npix; ++k) start[k + 1] += start[k];
    std::vector<std::int64_t> order(static_cast<std::size_t>(start[npix]));
    {
        std::vector<std::int64_t> fill(start.begin(), start.end() - 1);
        for (std::int64_t i = 0; i < n; ++i) {
            const auto& p = proj[static_cast<std::size_t>(i)];
            if (p.fate == Fate::lit) order[static_cast<std::size_t>(fill[p.pixel]++)] = i;
        }
    }

#pragma omp parallel
    {
        std::vector<double> inv(static_cast<std::size_t>(U) * U);
        std::vector<std::int64_t> idx(inv.size());
#pragma omp for schedule(dynamic, 64)
        for (std::int64_t k = 0; k < npix; ++k) {
            if (start[k] == start[k + 1]) continue;
            std::fill(inv.begin(), inv.end(), -std::numeric_limits<double>::infinity());
            std::fill(idx.begin(), idx.end(), -1);
            // Fine-resolution inverse-depth max; indices arrive ascending so a
            // strict comparison keeps the lowest index on ties.
            for (std::int64_t j = start[k]; j < start[k + 1]; ++j) {
                const std::int64_t i = order[static_cast<std::size_t>(j)];
                const auto& p = proj[static_cast<std::size_t>(i)];
                const double d = 1.0 / static_cast<double>(p.z);
                auto s = static_cast<std::size_t>(p.sub);
                if (d > inv[s]) {
                    inv[s] = d;
                    idx[s] = i;
                }
            }
            // U x U max-pool.
            double best = -std::numeric_limits<double>::infinity();
            std::int64_t who = -1;
            for (std::size_t s = 0; s < inv.size(); ++s) {
                if (idx[s] < 0) continue;
                if (inv[s] > best || (inv[s] == best && idx[s] < who)) {
                    best = inv[s];
                    who = idx[s];
                }
            }
            r.winner[static_cast<std::size_t>(k)] = who;
            r.view.depth[static_cast<std::size_t>(k)] = proj[static_cast<std::size_t>(who)].z;
            r.view.mask[static_cast<std::size_t>(k)] = 1.0f;
        }
    }
    finish_meta(r);
    return r;
}

RenderedTensors pseudo_render(const Tensor& points, const Tensor& logits, const Pose& pose, const RenderConfig& cfg) {
    PointCloud pc;
    if (points.defined()) {
        if (points.ndim() != 2 || points.dim(1) != 3)
            throw ShapeError("pseudo_render expects points [N,3], got " + shape_str(points.shape()));
        pc.xyz = points.vec();
    }
    if (logits.defined() && (!points.defined() || logits.numel() != pc.size()))
        throw ShapeError("pseudo_render: one logit per point required");

    RenderedTensors out;
    out.raster = pseudo_render(pc, pose, cfg);
    const auto& winner = out.raster.winner;
    const Shape shape{cfg.height, cfg.width};

    std::vector<float> ml(winner.size(), cfg.background_logit);
    if (logits.defined()) {
        auto ld = logits.data();
        for (std::size_t k = 0; k < winner.size(); ++k)
            if (winner[k] >= 0) ml[k] = ld[static_cast<std::size_t>(winner[k])];
    }

    const std::array<float, 3> zrow{pose.R[6], pose.R[7], pose.R[8]};
    out.depth = detail::make_result("pseudo_render_depth", shape, out.raster.view.depth, {&points},
                                    [points, winner, zrow](std::span<const float> g) {
                                        float* gp = detail::grad_of(points);
                                        if (!gp) return;
                                        for (std::size_t k = 0; k < winner.size(); ++k) {
                                            if (winner[k] < 0) continue;
                                            for (int c = 0; c < 3; ++c) gp[3 * winner[k] + c] += g[k] * zrow[c];
                                        }
                                    });
    out.mask_logits = detail::make_result("pseudo_render_mask", shape, std::move(ml), {&logits},
                                          [logits, winner](std::span<const float> g) {
                                              float* gl = detail::grad_of(logits);
                                              if (!gl) return;
                                              for (std::size_t k = 0; k < winner.size(); ++k)
                                                  if (winner[k] >= 0) gl[winner[k]] += g[k];
                                          });
    return out;
}

}  // namespace pcgen
