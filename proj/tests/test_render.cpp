#include <algorithm>
#include <numeric>
#include <random>

#include "doctest.h"
#include "pcgen/ops.hpp"
#include "pcgen/render.hpp"
#include "test_util.hpp"

using namespace pcgen;

namespace {

RenderConfig small_cfg(int size, int U) {
    RenderConfig c;
    c.height = c.width = size;
    c.upsample = U;
    return c;
}

Pose axis_pose(int size) {
    Pose p;
    p.K = {2.0f * size, size / 2.0f, size / 2.0f};
    return p;
}

void check_same(const RenderResult& a, const RenderResult& b) {
    CHECK(testing::bitwise_equal(a.view.depth, b.view.depth));
    CHECK(a.view.mask == b.view.mask);
    CHECK(a.winner == b.winner);
    CHECK(a.meta.dropped_behind == b.meta.dropped_behind);
    CHECK(a.meta.dropped_outside == b.meta.dropped_outside);
    CHECK(a.meta.lit_pixels == b.meta.lit_pixels);
}

}  // namespace

TEST_CASE("render: empty cloud, single axis point, nearest of two wins") {
    const auto cfg = small_cfg(8, 3);
    const Pose id = axis_pose(8);
    for (auto* fn : {&brute_force_render, static_cast<RenderResult (*)(const PointCloud&, const Pose&,
                                                                       const RenderConfig&)>(&pseudo_render)}) {
        auto e = fn(PointCloud{}, id, cfg);
        CHECK(std::all_of(e.view.mask.begin(), e.view.mask.end(), [](float m) { return m == 0.0f; }));
        CHECK(std::all_of(e.view.depth.begin(), e.view.depth.end(), [&](float d) { return d == cfg.z_bg; }));
        CHECK_FALSE(e.meta.all_dropped);

        auto one = fn(PointCloud{{0, 0, 2.5f}}, id, cfg);
        CHECK(one.meta.lit_pixels == 1);
        CHECK(one.view.mask[4 * 8 + 4] == 1.0f);
        CHECK(one.view.depth[4 * 8 + 4] == 2.5f);

        // Same ray, depths 3 and 2: the nearer one is kept whatever the order.
        auto two = fn(PointCloud{{0.3f, 0.0f, 3.0f, 0.2f, 0.0f, 2.0f}}, id, cfg);
        CHECK(two.meta.lit_pixels == 1);
        const std::size_t k = 4 * 8 + 6;  // u = 16 * 0.1 + 4 = 5.6 -> column 6
        CHECK(two.view.depth[k] == 2.0f);
        CHECK(two.winner[k] == 1);
    }
}

TEST_CASE("render: drops behind and outside are counted") {
    const auto cfg = small_cfg(8, 1);
    const Pose id = axis_pose(8);
    PointCloud pc{{0, 0, -1, 0, 0, 0, 5, 0, 1, 0, 0, 2}};
    for (const auto& r : {brute_force_render(pc, id, cfg), pseudo_render(pc, id, cfg)}) {
        CHECK(r.meta.input_points == 4);
        CHECK(r.meta.dropped_behind == 2);
        CHECK(r.meta.dropped_outside == 1);
        CHECK(r.meta.lit_pixels == 1);
        CHECK_FALSE(r.meta.all_dropped);
    }
    auto gone = pseudo_render(PointCloud{{0, 0, -1}}, id, cfg);
    CHECK(gone.meta.all_dropped);
}

TEST_CASE("brute force render is invariant to point order") {
    const auto cfg = small_cfg(32, 1);
    const Pose pose = make_fixed_views(ViewConfig{32}).fixed_views[3];
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<float> u(-0.5f, 0.5f);
    PointCloud pc;
    for (int i = 0; i < 900; ++i) pc.xyz.push_back(u(rng));
    auto base = brute_force_render(pc, pose, cfg);
    std::vector<std::size_t> perm(pc.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    PointCloud shuffled;
    for (auto i : perm) shuffled.xyz.insert(shuffled.xyz.end(), pc.xyz.begin() + 3 * i, pc.xyz.begin() + 3 * i + 3);
    auto other = brute_force_render(shuffled, pose, cfg);
    CHECK(testing::bitwise_equal(base.view.depth, other.view.depth));
    CHECK(base.view.mask == other.view.mask);
}

TEST_CASE("pseudo_render equals brute force on random clouds") {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> npts(0, 500);
    std::uniform_real_distribution<float> coord(-0.8f, 0.8f);
    ViewConfig vc{32};
    vc.seed = 11;
    NovelViewSampler sampler(vc);
    int cases = 0;
    for (int U : {1, 3, 5}) {
        for (int c = 0; c < 60; ++c) {
            PointCloud pc;
            const int n = npts(rng);
            for (int i = 0; i < n; ++i) {
                // A fifth of the points duplicate an earlier one to force exact ties.
                if (i > 0 && rng() % 5 == 0) {
                    const std::size_t j = rng() % static_cast<std::size_t>(i);
                    pc.xyz.insert(pc.xyz.end(), pc.xyz.begin() + 3 * j, pc.xyz.begin() + 3 * j + 3);
                } else {
                    for (int k = 0; k < 3; ++k) pc.xyz.push_back(coord(rng));
                }
            }
            Pose pose = sampler.sample(0, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(U));
            if (c % 7 == 0) pose.t[2] = 0.3f;  // camera inside the cloud: some points behind
            check_same(pseudo_render(pc, pose, small_cfg(32, U)), brute_force_render(pc, pose, small_cfg(32, U)));
            ++cases;
        }
    }
    CHECK(cases == 180);
}

TEST_CASE("render: lit count bounded; finer upsampling never loses pixels") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<float> coord(-0.5f, 0.5f);
    const Pose pose = make_fixed_views(ViewConfig{16}).fixed_views[1];
    for (int t = 0; t < 20; ++t) {
        PointCloud pc;
        const int n = 10 + t * 30;
        for (int i = 0; i < 3 * n; ++i) pc.xyz.push_back(coord(rng));
        std::size_t prev = 0;
        for (int U = 1; U <= 6; ++U) {
            auto r = pseudo_render(pc, pose, small_cfg(16, U));
            CHECK(r.meta.lit_pixels <= std::min<std::size_t>(pc.size(), 256));
            CHECK(r.meta.lit_pixels >= prev);
            prev = r.meta.lit_pixels;
        }
    }
}

TEST_CASE("render gradient: sum of lit depth moves 1:1 with the winner's camera depth") {
    const auto cfg = small_cfg(16, 3);
    const Pose pose = make_fixed_views(ViewConfig{16}).fixed_views[2];
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<float> coord(-0.5f, 0.5f);
    std::vector<float> xyz;
    for (int i = 0; i < 3 * 300; ++i) xyz.push_back(coord(rng));
    auto pts = Tensor::from_data({300, 3}, xyz, true);

    reset_tape();
    auto r = pseudo_render(pts, Tensor(), pose, cfg);
    auto lit = r.raster.view.mask;
    backward(sum(mul(r.depth, Tensor::from_data({16, 16}, lit))));
    const std::array<float, 3> zdir{pose.R[6], pose.R[7], pose.R[8]};

    auto lit_sum = [&](const std::vector<float>& p) {
        PointCloud pc{p};
        auto rr = pseudo_render(pc, pose, cfg);
        double s = 0.0;
        for (std::size_t k = 0; k < rr.view.pixels(); ++k)
            if (rr.view.mask[k] > 0.0f) s += rr.view.depth[k];
        return std::pair{s, rr.winner};
    };
    int winners = 0, checked = 0;
    for (std::size_t i = 0; i < 300; ++i) {
        double analytic = 0.0;
        for (int c = 0; c < 3; ++c) analytic += static_cast<double>(pts.grad()[3 * i + c]) * zdir[c];
        const bool wins = std::find(r.raster.winner.begin(), r.raster.winner.end(), static_cast<std::int64_t>(i)) !=
                          r.raster.winner.end();
        CHECK(analytic == doctest::Approx(wins ? 1.0 : 0.0).epsilon(1e-5));

        // Finite difference along the camera z axis; skip steps that change
        // the selection (ties or pixel-edge crossings).
        const float h = 1e-3f;
        auto plus = xyz, minus = xyz;
        for (int c = 0; c < 3; ++c) {
            plus[3 * i + c] += h * zdir[c];
            minus[3 * i + c] -= h * zdir[c];
        }
        auto [fp, wp] = lit_sum(plus);
        auto [fm, wm] = lit_sum(minus);
        if (wp != r.raster.winner || wm != r.raster.winner) continue;
        const double numeric = (fp - fm) / (2.0 * h);
        CHECK(numeric == doctest::Approx(wins ? 1.0 : 0.0).epsilon(1e-2).scale(1.0));
        ++checked;
        winners += wins;
    }
    CHECK(checked > 200);
    CHECK(winners > 20);
}

TEST_CASE("render tensors: values match the raster and logits route to winners") {
    const auto cfg = small_cfg(16, 2);
    const Pose pose = make_fixed_views(ViewConfig{16}).fixed_views[0];
    auto pts = testing::random_tensor({200, 3}, 31, -0.5f, 0.5f);
    auto logits = testing::random_tensor({200}, 32, -2.0f, 2.0f);
    auto r = pseudo_render(pts, logits, pose, cfg);
    PointCloud pc{pts.vec()};
    auto plain = pseudo_render(pc, pose, cfg);
    CHECK(testing::bitwise_equal(r.depth.data(), plain.view.depth));
    for (std::size_t k = 0; k < plain.winner.size(); ++k) {
        const float expect = plain.winner[k] >= 0 ? logits.vec()[static_cast<std::size_t>(plain.winner[k])]
                                                  : cfg.background_logit;
        CHECK(r.mask_logits.vec()[k] == expect);
    }
    auto f = [&](const Tensor& t) { return pseudo_render(pts, t, pose, cfg).mask_logits; };
    CHECK(testing::op_check(f, logits).max_rel_error < testing::kOpTol);

    auto empty = pseudo_render(Tensor(), Tensor(), pose, cfg);
    CHECK(empty.depth.numel() == 256);
    CHECK(empty.raster.meta.lit_pixels == 0);
    CHECK_THROWS_AS(pseudo_render(pts, Tensor::zeros({3}), pose, cfg), ShapeError);
}
