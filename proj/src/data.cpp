#include "pcgen/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "pcgen/render.hpp"
#include "pcgen/tnsr.hpp"

namespace pcgen {

namespace fs = std::filesystem;

const char* shape_kind_name(ShapeKind kind) {
    switch (kind) {
        case ShapeKind::cube: return "cube";
        case ShapeKind::box_stack: return "box_stack";
        case ShapeKind::chair_proxy: return "chair_proxy";
        case ShapeKind::sphere: return "sphere";
    }
    return "?";
}

ShapeKind parse_shape_kind(const std::string& name) {
    for (auto k : all_shape_kinds())
        if (name == shape_kind_name(k)) return k;
    throw std::invalid_argument("unknown shape kind '" + name + "' (expected cube, box_stack, chair_proxy or sphere)");
}

std::vector<ShapeKind> all_shape_kinds() {
    return {ShapeKind::cube, ShapeKind::box_stack, ShapeKind::chair_proxy, ShapeKind::sphere};
}

namespace {

struct Box {
    std::array<double, 3> c, h;  // center, half extents
};

std::mt19937_64 stream(std::uint64_t seed, ShapeKind kind, std::uint32_t which) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(kind), which};
    return std::mt19937_64(seq);
}

std::vector<Box> make_boxes(ShapeKind kind, std::mt19937_64& rng) {
    auto U = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    std::vector<Box> boxes;
    if (kind == ShapeKind::cube) {
        boxes.push_back({{0, 0, 0}, {0.5, 0.5, 0.5}});
    } else if (kind == ShapeKind::box_stack) {
        const int n = 2 + static_cast<int>(rng() % 2);
        double y0 = 0.0;
        for (int i = 0; i < n; ++i) {
            const double hy = U(0.1, 0.25);
            boxes.push_back({{U(-0.15, 0.15), y0 + hy, U(-0.15, 0.15)}, {U(0.25, 0.5), hy, U(0.25, 0.5)}});
            y0 += 2 * hy;
        }
    } else {  // chair_proxy
        const double sx = U(0.35, 0.5), sz = U(0.35, 0.5), st = U(0.04, 0.07);
        const double leg = U(0.35, 0.6), lt = U(0.03, 0.06);
        const double back = U(0.4, 0.7), bt = U(0.03, 0.06);
        boxes.push_back({{0, leg + st, 0}, {sx, st, sz}});  // seat
        for (double ix : {-1.0, 1.0})
            for (double iz : {-1.0, 1.0}) boxes.push_back({{ix * (sx - lt), leg / 2, iz * (sz - lt)}, {lt, leg / 2, lt}});
        boxes.push_back({{0, leg + 2 * st + back / 2, -(sz - bt)}, {sx, back / 2, bt}});  // back rest
    }
    return boxes;
}

bool inside_closed(const Box& b, const std::array<double, 3>& p) {
    for (int a = 0; a < 3; ++a)
        if (std::abs(p[a] - b.c[a]) > b.h[a] + 1e-12) return false;
    return true;
}

// Uniform samples of the union's outer surface: faces by area, rejecting
// points that lie in (or on) another box.
std::vector<std::array<double, 3>> sample_boxes(const std::vector<Box>& boxes, std::size_t n, std::mt19937_64& rng) {
    struct Face {
        std::size_t box;
        int axis;
        double side;
    };
    std::vector<Face> faces;
    std::vector<double> area;
    for (std::size_t b = 0; b < boxes.size(); ++b) {
        for (int a = 0; a < 3; ++a) {
            const double ar = 4 * boxes[b].h[(a + 1) % 3] * boxes[b].h[(a + 2) % 3];
            for (double s : {-1.0, 1.0}) {
                faces.push_back({b, a, s});
                area.push_back(ar);
            }
        }
    }
    std::discrete_distribution<std::size_t> pick(area.begin(), area.end());
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<std::array<double, 3>> out;
    out.reserve(n);
    while (out.size() < n) {
        const Face& f = faces[pick(rng)];
        const Box& b = boxes[f.box];
        std::array<double, 3> p{};
        for (int a = 0; a < 3; ++a) p[a] = a == f.axis ? b.c[a] + f.side * b.h[a] : b.c[a] + u(rng) * b.h[a];
        bool hidden = false;
        for (std::size_t k = 0; k < boxes.size() && !hidden; ++k) hidden = k != f.box && inside_closed(boxes[k], p);
        if (!hidden) out.push_back(p);
    }
    return out;
}

std::vector<std::array<double, 3>> sample_sphere(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<std::array<double, 3>> out(n);
    for (auto& p : out) {
        double len = 0.0;
        do {
            p = {g(rng), g(rng), g(rng)};
            len = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
        } while (len < 1e-9);
        for (auto& v : p) v *= 0.5 / len;
    }
    return out;
}

PointCloud to_cloud(const std::vector<std::array<double, 3>>& pts, const std::array<double, 3>& center, double scale) {
    PointCloud pc;
    pc.xyz.reserve(3 * pts.size());
    for (const auto& p : pts)
        for (int a = 0; a < 3; ++a) pc.xyz.push_back(static_cast<float>((p[a] - center[a]) * scale));
    return pc;
}

// Bounding-box fit of the GT samples; the dense cloud reuses it so both
// describe the same surface.
void fit_box(const std::vector<std::array<double, 3>>& pts, std::array<double, 3>& center, double& scale) {
    std::array<double, 3> lo{1e300, 1e300, 1e300}, hi{-1e300, -1e300, -1e300};
    for (const auto& p : pts)
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], p[a]);
            hi[a] = std::max(hi[a], p[a]);
        }
    double ext = 0.0;
    for (int a = 0; a < 3; ++a) {
        center[a] = 0.5 * (lo[a] + hi[a]);
        ext = std::max(ext, hi[a] - lo[a]);
    }
    scale = ext > 0.0 ? 1.0 / ext : 1.0;
}

}  // namespace

std::pair<Vec3, double> normalize_cloud(PointCloud& pc) {
    if (pc.empty()) return {{0, 0, 0}, 1.0};
    std::vector<std::array<double, 3>> pts(pc.size());
    for (std::size_t i = 0; i < pc.size(); ++i)
        for (int a = 0; a < 3; ++a) pts[i][a] = pc.xyz[3 * i + a];
    std::array<double, 3> c{};
    double s = 1.0;
    fit_box(pts, c, s);
    pc = to_cloud(pts, c, s);
    return {{static_cast<float>(c[0]), static_cast<float>(c[1]), static_cast<float>(c[2])}, s};
}

CloudFit cloud_fit(const PointCloud& pc, float tol) {
    CloudFit f;
    f.inside = true;
    for (float v : pc.xyz) {
        f.max_abs = std::max(f.max_abs, std::abs(v));
        if (!(std::abs(v) <= 0.5f + tol)) f.inside = false;
    }
    return f;
}

double half_pixel_offset(double depth, const Intrinsics& K) { return depth * (std::sqrt(2.0) / 2.0) / K.f; }

Sample synth_object(ShapeKind kind, std::uint64_t seed, const SynthConfig& cfg) {
    const int S = cfg.views.image_size;
    if (S < 1) throw std::invalid_argument("synth_object: image size must be >= 1");
    if (cfg.cloud_points < 1) throw std::invalid_argument("synth_object: cloud_points must be >= 1");
    const std::size_t dense_n =
        cfg.dense_points > 0 ? cfg.dense_points : std::max<std::size_t>(10000, 40 * static_cast<std::size_t>(S) * S);

    auto shape_rng = stream(seed, kind, 0);
    auto gt_rng = stream(seed, kind, 1);
    auto dense_rng = stream(seed, kind, 2);
    auto view_rng = stream(seed, kind, 3);

    std::vector<std::array<double, 3>> gt, dense;
    if (kind == ShapeKind::sphere) {
        gt = sample_sphere(cfg.cloud_points, gt_rng);
        dense = sample_sphere(dense_n, dense_rng);
    } else {
        const auto boxes = make_boxes(kind, shape_rng);
        gt = sample_boxes(boxes, cfg.cloud_points, gt_rng);
        dense = sample_boxes(boxes, dense_n, dense_rng);
    }
    std::array<double, 3> center{};
    double scale = 1.0;
    fit_box(gt, center, scale);

    Sample s;
    s.category = shape_kind_name(kind);
    s.gt_cloud = to_cloud(gt, center, scale);
    s.dense_cloud = to_cloud(dense, center, scale);

    const auto vs = make_fixed_views(cfg.views);
    RenderConfig rc;
    rc.height = rc.width = S;
    rc.upsample = 1;
    for (const auto& pose : vs.fixed_views) s.gt_views_fixed.push_back(brute_force_render(s.dense_cloud, pose, rc).view);

    // RGB proxy: shaded depth from a random viewpoint, grey replicated to 3 channels.
    std::uniform_real_distribution<float> az(0.0f, 360.0f);
    std::uniform_real_distribution<float> el(cfg.views.novel_elevation_min_deg, cfg.views.novel_elevation_max_deg);
    s.input_azimuth_deg = az(view_rng);
    s.input_elevation_deg = el(view_rng);
    const auto in_pose = orbit_pose(cfg.views.radius, s.input_azimuth_deg, s.input_elevation_deg, cfg.views.intrinsics());
    const auto in_view = brute_force_render(s.dense_cloud, in_pose, rc).view;
    const double half_diag = std::sqrt(3.0) / 2.0;
    const double zn = cfg.views.radius - half_diag, zf = cfg.views.radius + half_diag;
    std::vector<float> rgb(3 * in_view.pixels());
    for (std::size_t i = 0; i < in_view.pixels(); ++i) {
        float v = 0.0f;
        if (in_view.mask[i] > 0.5f)
            v = static_cast<float>(0.2 + 0.8 * std::clamp((zf - in_view.depth[i]) / (zf - zn), 0.0, 1.0));
        for (int c = 0; c < 3; ++c) rgb[c * in_view.pixels() + i] = v;
    }
    s.rgb = Tensor::from_data({3, S, S}, std::move(rgb));
    return s;
}

// --- stacking ------------------------------------------------------------------------

namespace {

Tensor stack(const std::vector<DepthMaskView>& views, bool depth) {
    if (views.empty()) throw std::invalid_argument("stack: no views");
    const int H = views[0].height, W = views[0].width;
    std::vector<float> d;
    d.reserve(views.size() * views[0].pixels());
    for (const auto& v : views) {
        if (v.height != H || v.width != W) throw std::invalid_argument("stack: views differ in size");
        const auto& src = depth ? v.depth : v.mask;
        d.insert(d.end(), src.begin(), src.end());
    }
    return Tensor::from_data({static_cast<std::int64_t>(views.size()), H, W}, std::move(d));
}

std::vector<DepthMaskView> unstack(const Tensor& depth, const Tensor& mask) {
    const auto V = depth.dim(0), H = depth.dim(1), W = depth.dim(2);
    const auto plane = static_cast<std::size_t>(H * W);
    std::vector<DepthMaskView> out(static_cast<std::size_t>(V));
    for (std::int64_t v = 0; v < V; ++v) {
        auto& o = out[static_cast<std::size_t>(v)];
        o.height = static_cast<int>(H);
        o.width = static_cast<int>(W);
        const auto off = static_cast<std::ptrdiff_t>(static_cast<std::size_t>(v) * plane);
        o.depth.assign(depth.vec().begin() + off, depth.vec().begin() + off + static_cast<std::ptrdiff_t>(plane));
        o.mask.assign(mask.vec().begin() + off, mask.vec().begin() + off + static_cast<std::ptrdiff_t>(plane));
        o.mask_is_probability = true;
    }
    return out;
}

}  // namespace

Tensor stack_depth(const std::vector<DepthMaskView>& views) { return stack(views, true); }
Tensor stack_mask(const std::vector<DepthMaskView>& views) { return stack(views, false); }

// --- on-disk layout ----------------------------------------------------------------------

namespace {

constexpr const char* kDatasetFormat = "pcgen-dataset";
constexpr const char* kLayout =
    "expected layout: <root>/manifest.json plus <root>/<id>/{rgb,depth,mask,cloud}.tnsr "
    "(rgb [3,S,S], depth and mask [8,S,S], cloud [N,3])";

const char* kFiles[] = {"rgb", "depth", "mask", "cloud"};

Tensor cloud_tensor(const PointCloud& pc) {
    return Tensor::from_data({static_cast<std::int64_t>(pc.size()), 3}, pc.xyz);
}

struct LoadedObject {
    Tensor rgb, depth, mask, cloud;
};

// Loads and validates one object; throws DataError naming the problem.
LoadedObject load_object(const fs::path& root, const std::string& id, int S) {
    LoadedObject o;
    Tensor* slots[] = {&o.rgb, &o.depth, &o.mask, &o.cloud};
    for (int i = 0; i < 4; ++i) {
        const auto p = root / id / (std::string(kFiles[i]) + ".tnsr");
        if (!fs::exists(p)) throw DataError("missing file " + p.string());
        try {
            *slots[i] = tnsr::load(p);
        } catch (const std::exception& e) {
            throw DataError("unreadable " + p.string() + ": " + e.what());
        }
    }
    auto expect = [&](const Tensor& t, const char* what, const Shape& want) {
        if (t.shape() != want)
            throw DataError(std::string(what) + " has shape " + shape_str(t.shape()) + ", expected " + shape_str(want));
    };
    expect(o.rgb, "rgb", {3, S, S});
    expect(o.depth, "depth", {kFixedViews, S, S});
    expect(o.mask, "mask", {kFixedViews, S, S});
    if (o.cloud.ndim() != 2 || o.cloud.dim(1) != 3) throw DataError("cloud has shape " + shape_str(o.cloud.shape()) + ", expected [N,3]");
    for (float v : o.rgb.data())
        if (!(v >= 0.0f && v <= 1.0f)) throw DataError("rgb values outside [0,1]");
    for (float v : o.depth.data())
        if (!std::isfinite(v) || v <= 0.0f) throw DataError("depth has non-positive or non-finite values");
    for (float v : o.mask.data())
        if (v != 0.0f && v != 1.0f) throw DataError("mask is not binary");
    PointCloud pc;
    pc.xyz = o.cloud.vec();
    const auto fit = cloud_fit(pc, 1e-5f);
    if (!fit.inside || fit.max_abs < 0.5f - 1e-3f)
        throw DataError("cloud is not normalized to [-0.5,0.5]^3 (max |coordinate| " + std::to_string(fit.max_abs) + ")");
    return o;
}

}  // namespace

void write_sample(const fs::path& root, const Sample& s) {
    if (s.object_id.empty()) throw DataError("write_sample: empty object id");
    const auto dir = root / s.object_id;
    fs::create_directories(dir);
    tnsr::save(dir / "rgb.tnsr", s.rgb);
    tnsr::save(dir / "depth.tnsr", stack_depth(s.gt_views_fixed));
    tnsr::save(dir / "mask.tnsr", stack_mask(s.gt_views_fixed));
    tnsr::save(dir / "cloud.tnsr", cloud_tensor(s.gt_cloud));
}

void write_manifest(const fs::path& root, int image_size, const ViewConfig& views, const std::vector<ObjectEntry>& objects) {
    fs::create_directories(root);
    nlohmann::json j;
    j["format"] = kDatasetFormat;
    j["version"] = 1;
    j["image_size"] = image_size;
    j["views"] = {{"focal", views.intrinsics().f},
                  {"radius", views.radius},
                  {"elevation_deg", views.elevation_deg},
                  {"novel_elevation_min_deg", views.novel_elevation_min_deg},
                  {"novel_elevation_max_deg", views.novel_elevation_max_deg}};
    j["objects"] = nlohmann::json::array();
    for (const auto& o : objects) {
        nlohmann::json files;
        for (const char* f : kFiles) files[f] = o.id + "/" + f + ".tnsr";
        j["objects"].push_back({{"id", o.id},
                                {"category", o.category},
                                {"input_azimuth_deg", o.input_azimuth_deg},
                                {"input_elevation_deg", o.input_elevation_deg},
                                {"files", files}});
    }
    std::ofstream out(root / "manifest.json");
    out << j.dump(2) << '\n';
    if (!out) throw DataError("cannot write " + (root / "manifest.json").string());
}

const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        case Split::all: return "all";
    }
    return "?";
}

Split parse_split(const std::string& name) {
    for (auto s : {Split::train, Split::val, Split::test, Split::all})
        if (name == split_name(s)) return s;
    throw std::invalid_argument("unknown split '" + name + "' (expected train, val, test or all)");
}

const std::vector<std::size_t>& DatasetManifest::indices(Split s) const {
    switch (s) {
        case Split::train: return train;
        case Split::val: return val;
        case Split::test: return test;
        case Split::all: break;
    }
    throw std::invalid_argument("use all_indices() for the 'all' split");
}

std::vector<std::size_t> DatasetManifest::all_indices() const {
    std::vector<std::size_t> v(objects.size());
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
}

void split_indices(std::size_t n, std::uint64_t seed, std::vector<std::size_t>& train, std::vector<std::size_t>& val,
                   std::vector<std::size_t>& test) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(n)));
    const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n))));
    train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
    for (auto* v : {&train, &val, &test}) std::sort(v->begin(), v->end());
}

DatasetManifest load_dataset(const fs::path& root, std::uint64_t split_seed) {
    if (!fs::is_directory(root)) throw DataError("dataset root " + root.string() + " is not a directory; " + kLayout);
    const auto mpath = root / "manifest.json";
    std::ifstream in(mpath);
    if (!in) throw DataError("no manifest.json in " + root.string() + "; " + kLayout);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed " + mpath.string() + ": " + e.what());
    }

    DatasetManifest m;
    m.root = root;
    m.split_seed = split_seed;
    std::set<std::string> cats, ids;
    try {
        if (j.value("format", "") != kDatasetFormat) throw DataError(mpath.string() + " is not a pcgen dataset manifest");
        m.image_size = j.at("image_size").get<int>();
        if (m.image_size < 1) throw DataError("image_size must be >= 1");
        const auto& v = j.at("views");
        m.views.image_size = m.image_size;
        m.views.focal = v.at("focal").get<float>();
        m.views.radius = v.at("radius").get<float>();
        m.views.elevation_deg = v.at("elevation_deg").get<float>();
        m.views.novel_elevation_min_deg = v.value("novel_elevation_min_deg", m.views.novel_elevation_min_deg);
        m.views.novel_elevation_max_deg = v.value("novel_elevation_max_deg", m.views.novel_elevation_max_deg);
        for (const auto& o : j.at("objects")) {
            ObjectEntry e;
            e.id = o.at("id").get<std::string>();
            e.category = o.value("category", std::string("unknown"));
            e.input_azimuth_deg = o.value("input_azimuth_deg", 0.0f);
            e.input_elevation_deg = o.value("input_elevation_deg", 0.0f);
            if (e.id.empty() || e.id.find('/') != std::string::npos || e.id == "." || e.id == "..") {
                m.corrupt.emplace_back(e.id, "invalid object id");
                continue;
            }
            if (!ids.insert(e.id).second) {
                m.corrupt.emplace_back(e.id, "duplicate object id");
                continue;
            }
            try {
                load_object(root, e.id, m.image_size);
            } catch (const DataError& err) {
                m.corrupt.emplace_back(e.id, err.what());
                continue;
            }
            cats.insert(e.category);
            m.objects.push_back(e);
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("bad manifest " + mpath.string() + ": " + e.what());
    }
    m.categories.assign(cats.begin(), cats.end());
    split_indices(m.objects.size(), split_seed, m.train, m.val, m.test);
    return m;
}

Sample load_sample(const DatasetManifest& m, std::size_t index) {
    if (index >= m.objects.size()) throw std::out_of_range("load_sample: index out of range");
    const auto& e = m.objects[index];
    auto o = load_object(m.root, e.id, m.image_size);
    Sample s;
    s.object_id = e.id;
    s.category = e.category;
    s.rgb = o.rgb;
    s.gt_views_fixed = unstack(o.depth, o.mask);
    for (auto& v : s.gt_views_fixed) v.mask_is_probability = false;
    s.gt_cloud.xyz = o.cloud.vec();
    s.input_azimuth_deg = e.input_azimuth_deg;
    s.input_elevation_deg = e.input_elevation_deg;
    return s;
}

// --- batching -------------------------------------------------------------------------------

BatchIterator::BatchIterator(std::vector<std::size_t> items, std::size_t batch_size, std::uint64_t shuffle_seed,
                             std::uint64_t epoch, bool shuffle)
    : order_(std::move(items)), batch_size_(batch_size) {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (shuffle) {
        std::seed_seq seq{static_cast<std::uint32_t>(shuffle_seed), static_cast<std::uint32_t>(shuffle_seed >> 32),
                          static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
        std::mt19937_64 rng(seq);
        std::shuffle(order_.begin(), order_.end(), rng);
    }
}

std::vector<std::size_t> BatchIterator::next() {
    if (!has_next()) throw std::out_of_range("BatchIterator: no more batches");
    const auto end = std::min(order_.size(), pos_ + batch_size_);
    std::vector<std::size_t> b(order_.begin() + static_cast<std::ptrdiff_t>(pos_), order_.begin() + static_cast<std::ptrdiff_t>(end));
    pos_ = end;
    return b;
}

}  // namespace pcgen
