#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "pcgen/geometry.hpp"
#include "pcgen/render.hpp"
#include "pcgen/tensor.hpp"

namespace pcgen {

/// Mean BCE(sigmoid(logit), gt) over pixels. Throws std::invalid_argument
/// unless every gt value is exactly 0 or 1.
Tensor mask_bce(const Tensor& pred_logits, const std::vector<float>& gt_mask);

/// Mean |pred - gt| over pixels with gt_mask == 1; zero if the mask is empty.
Tensor depth_l1(const Tensor& pred_depth, const std::vector<float>& gt_depth, const std::vector<float>& gt_mask);

struct ViewLoss {
    double mask_bce = 0.0;
    double depth_l1 = 0.0;
    RenderMeta render;
};

struct LossBreakdown {
    Tensor total;  // differentiable scalar
    double mask_bce = 0.0;  // summed over views
    double depth_l1 = 0.0;  // summed over views
    double total_value = 0.0;
    std::vector<ViewLoss> per_view;

    /// Views whose render dropped every point of a nonempty cloud.
    std::size_t all_dropped_views() const;
};

/// Pseudo-renders the cloud at each GT pose and sums, per view,
/// mask_bce + lambda_depth * depth_l1. The depth term covers pixels lit in
/// both the render and the GT. `points` [N,3] and `logits` [N] may be
/// undefined (empty cloud / no per-point logits); without logits a lit pixel
/// scores `foreground_logit`.
LossBreakdown joint_2d_loss(const Tensor& points, const Tensor& logits, const std::vector<DepthMaskView>& gt_views,
                            const std::vector<Pose>& poses, const RenderConfig& cfg, float lambda_depth,
                            float foreground_logit = 5.0f);

/// Mean nearest-neighbour Euclidean distance pred->gt and gt->pred.
/// Both clouds must be nonempty (std::invalid_argument otherwise).
struct ChamferResult {
    double pred_to_gt = 0.0;
    double gt_to_pred = 0.0;
};

/// Exhaustive O(N*M) search, parallel over query points.
ChamferResult chamfer_brute_force(const PointCloud& pred, const PointCloud& gt);
/// k-d tree search; exactly equal to the brute force (same distance
/// function, exact min, same summation order).
ChamferResult chamfer_bidirectional(const PointCloud& pred, const PointCloud& gt);

/// Pixels with mask >= threshold across all views.
std::size_t count_generated_points(const std::vector<DepthMaskView>& views, float threshold);

struct ErrorReport {
    std::string method;
    std::string phase;
    double pred_to_gt_x100 = 0.0;
    double gt_to_pred_x100 = 0.0;
    double points = 0.0;  // mean generated point count
};

inline constexpr const char* kReportHeader = "method,phase,pred_to_gt_x100,gt_to_pred_x100,points";

void write_report_csv(std::ostream& out, const std::vector<ErrorReport>& rows);
/// Parses what write_report_csv emits; throws std::runtime_error on a bad
/// header or row.
std::vector<ErrorReport> read_report_csv(std::istream& in);

}  // namespace pcgen
