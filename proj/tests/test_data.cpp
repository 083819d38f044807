#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "pcgen/data.hpp"
#include "pcgen/metrics.hpp"
#include "pcgen/render.hpp"
#include "pcgen/tnsr.hpp"
#include "test_util.hpp"

using namespace pcgen;
namespace fs = std::filesystem;

namespace {

SynthConfig small_synth(int S) {
    SynthConfig c;
    c.views.image_size = S;
    c.cloud_points = 2000;
    return c;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("pcgen_test_data_" + tag);
        fs::remove_all(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// 12 objects cycling over the shape kinds.
std::vector<ObjectEntry> write_fixture(const fs::path& root, int S) {
    std::vector<ObjectEntry> entries;
    const auto kinds = all_shape_kinds();
    auto cfg = small_synth(S);
    cfg.cloud_points = 500;
    for (int i = 0; i < 12; ++i) {
        auto s = synth_object(kinds[static_cast<std::size_t>(i) % kinds.size()], 100 + i, cfg);
        s.object_id = "obj" + std::to_string(i);
        write_sample(root, s);
        entries.push_back({s.object_id, s.category, s.input_azimuth_deg, s.input_elevation_deg});
    }
    write_manifest(root, S, cfg.views, entries);
    return entries;
}

}  // namespace

TEST_CASE("cube samples lie on the cube surface") {
    const auto s = synth_object(ShapeKind::cube, 7, small_synth(16));
    REQUIRE(s.gt_cloud.size() == 2000);
    for (std::size_t i = 0; i < s.gt_cloud.size(); ++i) {
        const auto p = s.gt_cloud.point(i);
        float m = 0.0f;
        for (float v : p) m = std::max(m, std::abs(v));
        CHECK(std::abs(m - 0.5f) <= 1e-6f);
    }
}

TEST_CASE("cube front face renders at constant depth") {
    auto cfg = small_synth(32);
    const auto s = synth_object(ShapeKind::cube, 3, cfg);
    RenderConfig rc;
    rc.height = rc.width = 32;
    rc.upsample = 1;
    const auto v = brute_force_render(s.dense_cloud, orbit_pose(4.0f, 0.0f, 0.0f, cfg.views.intrinsics()), rc).view;
    int interior = 0;
    for (int y = 1; y < 31; ++y)
        for (int x = 1; x < 31; ++x) {
            bool full = true;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) full = full && v.mask[(y + dy) * 32 + x + dx] > 0.5f;
            if (!full) continue;
            ++interior;
            CHECK(std::abs(v.depth[y * 32 + x] - 3.5f) <= 1e-6f);
        }
    CHECK(interior > 20);
}

TEST_CASE("synthetic clouds are normalized and touch the bound") {
    for (auto kind : all_shape_kinds()) {
        for (std::uint64_t seed : {1u, 2u, 3u}) {
            const auto s = synth_object(kind, seed, small_synth(16));
            const auto fit = cloud_fit(s.gt_cloud, 1e-6f);
            CHECK(fit.inside);
            CHECK(fit.max_abs >= 0.5f - 1e-6f);
            CHECK(s.rgb.shape() == Shape{3, 16, 16});
            CHECK(s.gt_views_fixed.size() == 8u);
        }
    }
    PointCloud pc;
    pc.xyz = {1, 2, 3, 5, 2, 3, 3, 4, 3};
    const auto [c, scale] = normalize_cloud(pc);
    CHECK(c[0] == 3.0f);
    CHECK(scale == doctest::Approx(0.25));
    const auto fit = cloud_fit(pc, 0.0f);
    CHECK(fit.inside);
    CHECK(fit.max_abs == 0.5f);
}

TEST_CASE("synthesis is a pure function of kind and seed") {
    const auto a = synth_object(ShapeKind::chair_proxy, 9, small_synth(16));
    const auto b = synth_object(ShapeKind::chair_proxy, 9, small_synth(16));
    const auto c = synth_object(ShapeKind::chair_proxy, 10, small_synth(16));
    CHECK(testing::bitwise_equal(a.gt_cloud.xyz, b.gt_cloud.xyz));
    CHECK(testing::bitwise_equal(a.rgb.data(), b.rgb.data()));
    CHECK_FALSE(testing::bitwise_equal(a.gt_cloud.xyz, c.gt_cloud.xyz));
}

TEST_CASE("back-project then re-render stays within the half-pixel bound") {
    const int S = 32;
    const auto cfg = small_synth(S);
    const auto K = cfg.views.intrinsics();
    const auto poses = make_fixed_views(cfg.views).fixed_views;
    RenderConfig rc;
    rc.height = rc.width = S;
    rc.upsample = 1;
    for (auto kind : all_shape_kinds()) {
        const auto s = synth_object(kind, 21, cfg);
        const auto cloud = backproject(s.gt_views_fixed, poses, 0.5f);
        REQUIRE(!cloud.empty());
        float zmax = 0.0f;
        for (const auto& v : s.gt_views_fixed)
            for (std::size_t i = 0; i < v.pixels(); ++i)
                if (v.mask[i] > 0.5f) zmax = std::max(zmax, v.depth[i]);
        const double delta = half_pixel_offset(zmax, K);
        const double round = 1e-4;

        for (std::size_t vi = 0; vi < poses.size(); ++vi) {
            const auto& V = s.gt_views_fixed[vi];
            const auto R = brute_force_render(cloud, poses[vi], rc).view;
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x) {
                    const int p = y * S + x;
                    if (V.mask[p] < 0.5f) continue;
                    REQUIRE(R.mask[p] > 0.5f);
                    CHECK(R.depth[p] <= V.depth[p] + round);
                    float lo = 1e30f;
                    for (int dy = -2; dy <= 2; ++dy)
                        for (int dx = -2; dx <= 2; ++dx) {
                            const int yy = y + dy, xx = x + dx;
                            if (yy < 0 || xx < 0 || yy >= S || xx >= S) continue;
                            if (V.mask[yy * S + xx] > 0.5f) lo = std::min(lo, V.depth[yy * S + xx]);
                        }
                    CHECK(R.depth[p] >= lo - delta - round);
                }
        }

        // Every lifted point is within delta of the dense cloud it came from.
        const auto ch = chamfer_bidirectional(cloud, s.dense_cloud);
        CHECK(ch.pred_to_gt <= delta);
    }
}

TEST_CASE("dataset round trip with a 12-object fixture") {
    TempDir dir("fixture");
    const auto entries = write_fixture(dir.path, 16);
    const auto m = load_dataset(dir.path, 5);
    CHECK(m.objects.size() == 12u);
    CHECK(m.corrupt.empty());
    CHECK(m.categories.size() == 4u);
    CHECK(m.image_size == 16);
    CHECK(m.train.size() + m.val.size() + m.test.size() == 12u);

    const auto s = load_sample(m, 3);
    CHECK(s.object_id == "obj3");
    CHECK(s.rgb.shape() == Shape{3, 16, 16});
    REQUIRE(s.gt_views_fixed.size() == 8u);
    CHECK(s.gt_cloud.size() == 500u);
    CHECK(s.input_azimuth_deg == entries[3].input_azimuth_deg);

    // Poses echo the configured ring.
    const auto a = make_fixed_views(m.views).fixed_views;
    ViewConfig want;
    want.image_size = 16;
    const auto b = make_fixed_views(want).fixed_views;
    for (std::size_t i = 0; i < 8; ++i) CHECK(a[i].t == b[i].t);
}

TEST_CASE("missing or empty root is a clear error") {
    TempDir dir("empty");
    CHECK_THROWS_AS(load_dataset(dir.path, 0), DataError);
    fs::create_directories(dir.path);
    try {
        load_dataset(dir.path, 0);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("manifest.json") != std::string::npos);
        CHECK(std::string(e.what()).find("expected layout") != std::string::npos);
    }
}

TEST_CASE("corrupt objects are reported, not skipped silently") {
    TempDir dir("corrupt");
    write_fixture(dir.path, 16);
    fs::remove(dir.path / "obj1" / "mask.tnsr");
    tnsr::save(dir.path / "obj2" / "depth.tnsr", Tensor::zeros({8, 16, 16}));
    tnsr::save(dir.path / "obj4" / "rgb.tnsr", Tensor::zeros({3, 8, 8}));
    {
        std::ofstream f(dir.path / "obj5" / "cloud.tnsr", std::ios::trunc);
        f << "garbage";
    }
    const auto m = load_dataset(dir.path, 0);
    CHECK(m.objects.size() == 8u);
    REQUIRE(m.corrupt.size() == 4u);
    std::set<std::string> ids;
    for (const auto& [id, why] : m.corrupt) {
        ids.insert(id);
        CHECK(!why.empty());
    }
    CHECK(ids == std::set<std::string>{"obj1", "obj2", "obj4", "obj5"});
    CHECK(m.corrupt[0].second.find("mask.tnsr") != std::string::npos);
}

TEST_CASE("splits are deterministic and disjoint") {
    std::vector<std::size_t> a1, b1, c1, a2, b2, c2;
    split_indices(100, 42, a1, b1, c1);
    split_indices(100, 42, a2, b2, c2);
    CHECK(a1 == a2);
    CHECK(b1 == b2);
    CHECK(c1 == c2);
    CHECK(a1.size() == 80u);
    CHECK(b1.size() == 10u);
    CHECK(c1.size() == 10u);
    std::set<std::size_t> all(a1.begin(), a1.end());
    all.insert(b1.begin(), b1.end());
    all.insert(c1.begin(), c1.end());
    CHECK(all.size() == 100u);

    split_indices(100, 43, a2, b2, c2);
    CHECK(a1 != a2);
}

TEST_CASE("batch iterator covers every item once per epoch") {
    std::vector<std::size_t> items(12);
    for (std::size_t i = 0; i < 12; ++i) items[i] = i;
    BatchIterator it(items, 5, 7, 0);
    CHECK(it.batches() == 3u);
    std::vector<std::size_t> sizes, seen;
    while (it.has_next()) {
        const auto b = it.next();
        sizes.push_back(b.size());
        seen.insert(seen.end(), b.begin(), b.end());
    }
    CHECK(sizes == std::vector<std::size_t>{5, 5, 2});
    auto sorted = seen;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == items);

    BatchIterator same(items, 5, 7, 0), next_epoch(items, 5, 7, 1);
    CHECK(same.next() == std::vector<std::size_t>(seen.begin(), seen.begin() + 5));
    std::vector<std::size_t> e1;
    while (next_epoch.has_next()) {
        const auto b = next_epoch.next();
        e1.insert(e1.end(), b.begin(), b.end());
    }
    CHECK(e1 != seen);
}
