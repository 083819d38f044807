#include "pcgen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "pcgen/ops.hpp"

namespace pcgen {

Tensor mask_bce(const Tensor& pred_logits, const std::vector<float>& gt_mask) {
    for (float g : gt_mask)
        if (g != 0.0f && g != 1.0f) throw std::invalid_argument("mask_bce: ground-truth mask must be binary");
    return bce_with_logits(pred_logits, gt_mask);
}

Tensor depth_l1(const Tensor& pred_depth, const std::vector<float>& gt_depth, const std::vector<float>& gt_mask) {
    return masked_l1(pred_depth, gt_depth, gt_mask);
}

std::size_t LossBreakdown::all_dropped_views() const {
    return static_cast<std::size_t>(
        std::count_if(per_view.begin(), per_view.end(), [](const ViewLoss& v) { return v.render.all_dropped; }));
}

LossBreakdown joint_2d_loss(const Tensor& points, const Tensor& logits, const std::vector<DepthMaskView>& gt_views,
                            const std::vector<Pose>& poses, const RenderConfig& cfg, float lambda_depth,
                            float foreground_logit) {
    if (gt_views.empty()) throw std::invalid_argument("joint_2d_loss needs at least one view");
    if (gt_views.size() != poses.size()) throw std::invalid_argument("joint_2d_loss: views and poses differ in count");
    LossBreakdown out;
    Tensor total;
    for (std::size_t k = 0; k < gt_views.size(); ++k) {
        const auto& gt = gt_views[k];
        if (gt.height != cfg.height || gt.width != cfg.width)
            throw ShapeError("joint_2d_loss: ground-truth view size differs from the render size");
        auto r = pseudo_render(points, logits, poses[k], cfg);
        Tensor mask_logits = r.mask_logits;
        if (!logits.defined()) {
            std::vector<float> ml(r.raster.winner.size());
            for (std::size_t i = 0; i < ml.size(); ++i)
                ml[i] = r.raster.winner[i] >= 0 ? foreground_logit : cfg.background_logit;
            mask_logits = Tensor::from_data({cfg.height, cfg.width}, std::move(ml));
        }
        std::vector<float> both(gt.pixels());
        for (std::size_t i = 0; i < both.size(); ++i) both[i] = (r.raster.winner[i] >= 0 && gt.mask[i] >= 0.5f) ? 1.0f : 0.0f;

        Tensor mb = mask_bce(mask_logits, gt.mask);
        Tensor dl = depth_l1(r.depth, gt.depth, both);
        Tensor view_total = add(mb, scale(dl, lambda_depth));
        total = total.defined() ? add(total, view_total) : view_total;

        ViewLoss v{mb.item(), dl.item(), r.raster.meta};
        out.mask_bce += v.mask_bce;
        out.depth_l1 += v.depth_l1;
        out.per_view.push_back(v);
    }
    out.total = total;
    out.total_value = total.item();
    return out;
}

namespace {

inline double sq_dist(const float* a, const float* b) {
    const double dx = static_cast<double>(a[0]) - b[0];
    const double dy = static_cast<double>(a[1]) - b[1];
    const double dz = static_cast<double>(a[2]) - b[2];
    return dx * dx + dy * dy + dz * dz;
}

double mean_sqrt(const std::vector<double>& d2) {
    double s = 0.0;
    for (double v : d2) s += std::sqrt(v);
    return s / static_cast<double>(d2.size());
}

std::vector<double> nearest_brute(const PointCloud& query, const PointCloud& target) {
    const auto n = static_cast<std::int64_t>(query.size());
    const std::size_t m = target.size();
    std::vector<double> best(query.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        const float* q = &query.xyz[3 * static_cast<std::size_t>(i)];
        double b = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < m; ++j) b = std::min(b, sq_dist(q, &target.xyz[3 * j]));
        best[static_cast<std::size_t>(i)] = b;
    }
    return best;
}

// Median-split k-d tree over the target points. Pruning is exact: a float
// coordinate difference is exact in double and squaring/summing round
// monotonically, so a subtree is skipped only when every point in it has
// sq_dist >= its plane bound > current best.
class KdTree {
public:
    explicit KdTree(const PointCloud& pts) : pts_(pts), order_(pts.size()) {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        nodes_.reserve(2 * pts.size() / kLeaf + 2);
        build(0, order_.size());
    }

    double nearest_sq(const float* q) const {
        double best = std::numeric_limits<double>::infinity();
        search(0, q, best);
        return best;
    }

private:
    static constexpr std::size_t kLeaf = 8;

    struct Node {
        std::size_t begin, end;
        int axis = -1;  // -1: leaf
        float split = 0.0f;
        std::size_t left = 0, right = 0;
    };

    std::size_t build(std::size_t begin, std::size_t end) {
        const std::size_t id = nodes_.size();
        nodes_.push_back({begin, end});
        if (end - begin <= kLeaf) return id;
        int axis = 0;
        float widest = -1.0f;
        for (int a = 0; a < 3; ++a) {
            float lo = std::numeric_limits<float>::infinity(), hi = -lo;
            for (std::size_t i = begin; i < end; ++i) {
                const float v = pts_.xyz[3 * order_[i] + a];
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            if (hi - lo > widest) {
                widest = hi - lo;
                axis = a;
            }
        }
        if (widest <= 0.0f) return id;  // all coincident
        const std::size_t mid = begin + (end - begin) / 2;
        auto key = [&](std::size_t i) { return pts_.xyz[3 * i + axis]; };
        std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin), order_.begin() + static_cast<std::ptrdiff_t>(mid),
                         order_.begin() + static_cast<std::ptrdiff_t>(end),
                         [&](std::size_t x, std::size_t y) { return key(x) < key(y) || (key(x) == key(y) && x < y); });
        // Left holds coordinates <= split, right >= split.
        const float split = key(order_[mid]);
        const std::size_t l = build(begin, mid);
        const std::size_t r = build(mid, end);
        nodes_[id].axis = axis;
        nodes_[id].split = split;
        nodes_[id].left = l;
        nodes_[id].right = r;
        return id;
    }

    void search(std::size_t id, const float* q, double& best) const {
        const Node& n = nodes_[id];
        if (n.axis < 0) {
            for (std::size_t i = n.begin; i < n.end; ++i) best = std::min(best, sq_dist(q, &pts_.xyz[3 * order_[i]]));
            return;
        }
        const double d = static_cast<double>(q[n.axis]) - n.split;
        const std::size_t near = d <= 0.0 ? n.left : n.right;
        const std::size_t far = d <= 0.0 ? n.right : n.left;
        search(near, q, best);
        if (d * d <= best) search(far, q, best);
    }

    const PointCloud& pts_;
    std::vector<std::size_t> order_;
    std::vector<Node> nodes_;
};

std::vector<double> nearest_tree(const PointCloud& query, const PointCloud& target) {
    const KdTree tree(target);
    const auto n = static_cast<std::int64_t>(query.size());
    std::vector<double> best(query.size());
#pragma omp parallel for schedule(dynamic, 256)
    for (std::int64_t i = 0; i < n; ++i) best[static_cast<std::size_t>(i)] = tree.nearest_sq(&query.xyz[3 * static_cast<std::size_t>(i)]);
    return best;
}

void require_nonempty(const PointCloud& pred, const PointCloud& gt) {
    if (pred.empty()) throw std::invalid_argument("chamfer: predicted cloud is empty");
    if (gt.empty()) throw std::invalid_argument("chamfer: ground-truth cloud is empty");
}

}  // namespace

ChamferResult chamfer_brute_force(const PointCloud& pred, const PointCloud& gt) {
    require_nonempty(pred, gt);
    return {mean_sqrt(nearest_brute(pred, gt)), mean_sqrt(nearest_brute(gt, pred))};
}

ChamferResult chamfer_bidirectional(const PointCloud& pred, const PointCloud& gt) {
    require_nonempty(pred, gt);
    return {mean_sqrt(nearest_tree(pred, gt)), mean_sqrt(nearest_tree(gt, pred))};
}

std::size_t count_generated_points(const std::vector<DepthMaskView>& views, float threshold) {
    std::size_t n = 0;
    for (const auto& v : views)
        for (float m : v.mask) n += m >= threshold;
    return n;
}

namespace {

std::string fmt(double v) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
}

double parse_double(const std::string& s, const std::string& what) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error("report: bad " + what + " value '" + s + "'");
    }
}

}  // namespace

void write_report_csv(std::ostream& out, const std::vector<ErrorReport>& rows) {
    out << kReportHeader << '\n';
    for (const auto& r : rows) {
        if (r.method.find_first_of(",\n\"") != std::string::npos || r.phase.find_first_of(",\n\"") != std::string::npos)
            throw std::invalid_argument("report: method/phase must not contain commas, quotes or newlines");
        out << r.method << ',' << r.phase << ',' << fmt(r.pred_to_gt_x100) << ',' << fmt(r.gt_to_pred_x100) << ','
            << fmt(r.points) << '\n';
    }
}

std::vector<ErrorReport> read_report_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != kReportHeader) throw std::runtime_error("report: unexpected CSV header");
    std::vector<ErrorReport> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() != 5) throw std::runtime_error("report: expected 5 columns in '" + line + "'");
        rows.push_back({f[0], f[1], parse_double(f[2], "pred_to_gt_x100"), parse_double(f[3], "gt_to_pred_x100"),
                        parse_double(f[4], "points")});
    }
    return rows;
}

}  // namespace pcgen
