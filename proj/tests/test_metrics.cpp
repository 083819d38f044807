#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "pcgen/metrics.hpp"
#include "pcgen/ops.hpp"
#include "test_util.hpp"

using namespace pcgen;

namespace {

PointCloud random_cloud(std::size_t n, std::uint64_t seed, float lo = -0.5f, float hi = 0.5f) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(lo, hi);
    PointCloud pc;
    for (std::size_t i = 0; i < 3 * n; ++i) pc.xyz.push_back(u(rng));
    return pc;
}

// Direct float64 definition of BCE, no log-sum-exp trick.
double bce_definition(const std::vector<float>& logits, const std::vector<float>& gt) {
    double s = 0.0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[i])));
        s += -(gt[i] * std::log(p) + (1.0 - gt[i]) * std::log(1.0 - p));
    }
    return s / static_cast<double>(gt.size());
}

double scalar_bce(double l, double y) { return std::max(l, 0.0) - l * y + std::log1p(std::exp(-std::abs(l))); }

RenderConfig cfg16() {
    RenderConfig c;
    c.height = c.width = 16;
    c.upsample = 3;
    return c;
}

}  // namespace

TEST_CASE("mask_bce: constants, saturation, definitional oracle, binary gt") {
    std::vector<float> gt{0, 1, 1, 0, 1, 0};
    CHECK(mask_bce(Tensor::zeros({2, 3}), gt).item() == doctest::Approx(std::log(2.0)).epsilon(1e-7));
    std::vector<float> sat;
    for (float g : gt) sat.push_back(g == 1.0f ? 20.0f : -20.0f);
    CHECK(mask_bce(Tensor::from_data({2, 3}, sat), gt).item() < 1e-6);

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> l(-6.0f, 6.0f);
    std::vector<float> logits, g2;
    for (int i = 0; i < 256; ++i) {
        logits.push_back(l(rng));
        g2.push_back(static_cast<float>(rng() % 2));
    }
    CHECK(std::abs(mask_bce(Tensor::from_data({16, 16}, logits), g2).item() - bce_definition(logits, g2)) <= 1e-6);
    CHECK_THROWS_AS(mask_bce(Tensor::zeros({2}), {0.0f, 0.5f}), std::invalid_argument);

    // Convex in the logit.
    for (int i = 0; i < 1000; ++i) {
        const double a = l(rng), b = l(rng), y = static_cast<double>(rng() % 2);
        CHECK(scalar_bce((a + b) / 2, y) <= (scalar_bce(a, y) + scalar_bce(b, y)) / 2 + 1e-7);
    }
}

TEST_CASE("depth_l1: zero, unit offset, oracle, empty mask") {
    auto gt = testing::random_tensor({8, 8}, 5, 2.0f, 4.0f).vec();
    std::vector<float> mask(64, 0.0f);
    for (int i = 0; i < 64; i += 3) mask[i] = 1.0f;
    CHECK(depth_l1(Tensor::from_data({8, 8}, gt), gt, mask).item() == 0.0f);
    std::vector<float> shifted = gt;
    for (int i = 0; i < 64; ++i)
        if (mask[i] == 1.0f) shifted[i] += 1.0f;
    CHECK(depth_l1(Tensor::from_data({8, 8}, shifted), gt, mask).item() == doctest::Approx(1.0).epsilon(1e-6));

    auto pred = testing::random_tensor({8, 8}, 6, 2.0f, 4.0f).vec();
    double s = 0.0;
    int n = 0;
    for (int i = 0; i < 64; ++i)
        if (mask[i] == 1.0f) {
            s += std::abs(static_cast<double>(pred[i]) - gt[i]);
            ++n;
        }
    CHECK(std::abs(depth_l1(Tensor::from_data({8, 8}, pred), gt, mask).item() - s / n) <= 1e-6);
    CHECK(depth_l1(Tensor::from_data({8, 8}, pred), gt, std::vector<float>(64, 0.0f)).item() == 0.0f);
}

TEST_CASE("chamfer: analytic cases, errors, symmetry, invariances") {
    PointCloud a{{0, 0, 0}}, b{{0, 0, 0, 1, 0, 0}};
    auto r = chamfer_bidirectional(a, b);
    CHECK(r.pred_to_gt == 0.0);
    CHECK(r.gt_to_pred == 0.5);
    CHECK_THROWS_AS(chamfer_bidirectional(PointCloud{}, b), std::invalid_argument);
    CHECK_THROWS_AS(chamfer_brute_force(a, PointCloud{}), std::invalid_argument);

    auto c = random_cloud(500, 7);
    auto self = chamfer_bidirectional(c, c);
    CHECK(self.pred_to_gt == 0.0);
    CHECK(self.gt_to_pred == 0.0);

    auto d = random_cloud(300, 8);
    auto base = chamfer_bidirectional(c, d);
    auto swapped = chamfer_bidirectional(d, c);
    CHECK(base.pred_to_gt == swapped.gt_to_pred);
    CHECK(base.gt_to_pred == swapped.pred_to_gt);

    PointCloud rev;
    for (std::size_t i = d.size(); i-- > 0;) rev.xyz.insert(rev.xyz.end(), d.xyz.begin() + 3 * i, d.xyz.begin() + 3 * i + 3);
    auto pr = chamfer_bidirectional(c, rev);
    CHECK(pr.pred_to_gt == base.pred_to_gt);
    CHECK(pr.gt_to_pred == doctest::Approx(base.gt_to_pred).epsilon(1e-12));

    auto shift = [](PointCloud p) {
        for (std::size_t i = 0; i < p.xyz.size(); ++i) p.xyz[i] += (i % 3 == 0 ? 0.25f : -0.125f);
        return p;
    };
    auto moved = chamfer_bidirectional(shift(c), shift(d));
    CHECK(std::abs(moved.pred_to_gt - base.pred_to_gt) <= 1e-6);
    CHECK(std::abs(moved.gt_to_pred - base.gt_to_pred) <= 1e-6);
}

TEST_CASE("chamfer: tree search equals brute force exactly") {
    std::mt19937_64 rng(99);
    std::uniform_int_distribution<std::size_t> size(1, 2000);
    for (int t = 0; t < 40; ++t) {
        PointCloud p = random_cloud(size(rng), 1000 + t), g;
        if (t % 4 == 0) {
            g = random_cloud(size(rng), 2000 + t, -3.0f, 0.1f);  // partly disjoint boxes
        } else if (t % 4 == 1) {
            g = random_cloud(size(rng), 2000 + t);
            for (std::size_t i = 0; i < g.size(); ++i) g.xyz[3 * i + 2] = 0.0f;  // flat cloud
        } else {
            g = random_cloud(size(rng), 2000 + t);
        }
        auto fast = chamfer_bidirectional(p, g);
        auto slow = chamfer_brute_force(p, g);
        CHECK(fast.pred_to_gt == slow.pred_to_gt);
        CHECK(fast.gt_to_pred == slow.gt_to_pred);
    }
}

TEST_CASE("count_generated_points: full grid, empty, consistent with backproject") {
    DepthMaskView full{128, 128, std::vector<float>(128 * 128, 3.0f), std::vector<float>(128 * 128, 1.0f), true};
    CHECK(count_generated_points(std::vector<DepthMaskView>(8, full), 0.5f) == 131072);
    DepthMaskView none = full;
    std::fill(none.mask.begin(), none.mask.end(), 0.0f);
    CHECK(count_generated_points(std::vector<DepthMaskView>(8, none), 0.5f) == 0);

    auto set = make_fixed_views(ViewConfig{12});
    std::vector<DepthMaskView> views;
    for (int k = 0; k < 8; ++k) {
        auto m = testing::random_tensor({12, 12}, 40 + k, 0.0f, 1.0f).vec();
        views.push_back({12, 12, std::vector<float>(144, 4.0f), m, true});
    }
    for (float th : {0.1f, 0.5f, 0.9f}) CHECK(count_generated_points(views, th) == backproject(views, set.fixed_views, th).size());
}

TEST_CASE("joint_2d_loss: empty cloud, single-view composition, gradients") {
    const auto cfg = cfg16();
    auto set = make_fixed_views(ViewConfig{16});
    auto gt_cloud = random_cloud(400, 11);
    std::vector<DepthMaskView> gts;
    for (int k = 0; k < 3; ++k) gts.push_back(brute_force_render(gt_cloud, set.fixed_views[k], cfg).view);
    std::vector<Pose> poses(set.fixed_views.begin(), set.fixed_views.begin() + 3);

    auto empty = joint_2d_loss(Tensor(), Tensor(), gts, poses, cfg, 1.0f);
    double expect = 0.0;
    for (const auto& g : gts) expect += bce_definition(std::vector<float>(g.pixels(), cfg.background_logit), g.mask);
    CHECK(empty.mask_bce == doctest::Approx(expect).epsilon(1e-6));
    CHECK(empty.depth_l1 == 0.0);

    auto pts = testing::random_tensor({300, 3}, 12, -0.5f, 0.5f);
    auto logits = testing::random_tensor({300}, 13, -1.0f, 3.0f);
    auto one = joint_2d_loss(pts, logits, {gts[0]}, {poses[0]}, cfg, 0.7f);
    auto r = pseudo_render(pts, logits, poses[0], cfg);
    std::vector<float> both(256);
    for (int i = 0; i < 256; ++i) both[i] = (r.raster.winner[i] >= 0 && gts[0].mask[i] == 1.0f) ? 1.0f : 0.0f;
    const double direct = mask_bce(r.mask_logits, gts[0].mask).item() + 0.7 * depth_l1(r.depth, gts[0].depth, both).item();
    CHECK(one.total_value == doctest::Approx(direct).epsilon(1e-6));
    CHECK(one.total_value == doctest::Approx(one.mask_bce + 0.7 * one.depth_l1).epsilon(1e-6));
    CHECK(one.mask_bce >= 0.0);
    CHECK(one.depth_l1 >= 0.0);

    // Finite differences on point coordinates, skipping any perturbation that
    // changes which point wins which pixel.
    auto three = [&](const Tensor& p) { return joint_2d_loss(p, logits, gts, poses, cfg, 1.0f).total; };
    auto leaf = Tensor::from_data(pts.shape(), pts.vec(), true);
    reset_tape();
    backward(three(leaf));
    auto winners = [&](const Tensor& p) {
        std::vector<std::int64_t> w;
        for (const auto& pose : poses) {
            auto rr = pseudo_render(PointCloud{p.vec()}, pose, cfg);
            w.insert(w.end(), rr.winner.begin(), rr.winner.end());
        }
        return w;
    };
    const auto base_w = winners(pts);
    // Points whose rendered depth sits within the step of the GT depth would
    // cross the L1 kink.
    std::vector<bool> near_kink(300, false);
    for (std::size_t k = 0; k < poses.size(); ++k) {
        auto rr = pseudo_render(PointCloud{pts.vec()}, poses[k], cfg);
        for (std::size_t q = 0; q < rr.winner.size(); ++q)
            if (rr.winner[q] >= 0 && gts[k].mask[q] == 1.0f && std::abs(rr.view.depth[q] - gts[k].depth[q]) < 5e-3f)
                near_kink[static_cast<std::size_t>(rr.winner[q])] = true;
    }
    NoGradGuard ng;
    int checked = 0;
    double worst = 0.0;
    for (std::size_t i = 0; i < pts.numel(); ++i) {
        const float h = 1e-3f;
        if (near_kink[i / 3]) continue;
        auto plus = pts.vec(), minus = pts.vec();
        plus[i] += h;
        minus[i] -= h;
        auto tp = Tensor::from_data(pts.shape(), plus), tm = Tensor::from_data(pts.shape(), minus);
        if (winners(tp) != base_w || winners(tm) != base_w) continue;
        const double num = (static_cast<double>(three(tp).item()) - three(tm).item()) / (static_cast<double>(plus[i]) - minus[i]);
        const double a = leaf.grad()[i];
        const double e = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-2});
        worst = std::max(worst, e);
        ++checked;
    }
    CHECK(checked > 500);
    CHECK(worst < 1e-2);
}

TEST_CASE("report CSV round trip and validation") {
    std::vector<ErrorReport> rows{{"transformer", "phase1", 7.823, 4.1, 4096.5}, {"gt", "fixture", 0.0, 1e-3, 131072}};
    std::stringstream ss;
    write_report_csv(ss, rows);
    const std::string text = ss.str();
    CHECK(text.rfind("method,phase,pred_to_gt_x100,gt_to_pred_x100,points\n", 0) == 0);
    auto back = read_report_csv(ss);
    REQUIRE(back.size() == 2);
    CHECK(back[0].method == "transformer");
    CHECK(back[0].pred_to_gt_x100 == 7.823);
    CHECK(back[1].points == 131072.0);

    std::stringstream bad("method,phase\nx,y\n");
    CHECK_THROWS(read_report_csv(bad));
    std::stringstream bad_row(std::string(kReportHeader) + "\nx,y,1,abc,3\n");
    CHECK_THROWS(read_report_csv(bad_row));
    std::stringstream out;
    CHECK_THROWS(write_report_csv(out, {{"a,b", "p", 0, 0, 0}}));
}
