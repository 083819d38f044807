#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "pcgen/tensor.hpp"

namespace pcgen {

struct GradCheckOptions {
    double eps = 1e-3;
    /// Denominator floor for the relative error, so that coordinates whose
    /// true gradient is ~0 are judged on absolute error instead.
    double denom_floor = 1e-3;
    /// Additional floor as a fraction of the largest analytic gradient
    /// magnitude. Float32 outputs cannot resolve a coordinate whose gradient
    /// is 1e-4 of its neighbours', so such coordinates are judged on absolute
    /// error relative to the gradient's scale.
    double scale_floor = 0.0;
    /// Combine central differences at eps and 2*eps, (4 D(eps) - D(2 eps)) / 3,
    /// cancelling the O(eps^2) truncation term. Lets eps be large enough that
    /// float32 output rounding stops dominating.
    bool richardson = false;
    /// Check at most this many coordinates (0 = all), sampled with `seed`.
    std::size_t max_coords = 0;
    std::uint64_t seed = 1234;
};

/// Settings that float32 code can actually pass: eps 2e-2 with Richardson
/// extrapolation and a 1% scale floor. At eps 1e-3 the output rounding of a
/// float32 forward pass dominates the difference quotient.
inline GradCheckOptions float32_options() {
    GradCheckOptions o;
    o.eps = 2e-2;
    o.richardson = true;
    o.scale_floor = 1e-2;
    return o;
}

struct GradCheckResult {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t coords_checked = 0;
    std::size_t worst_coord = 0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
};

/// One coordinate of a leaf tensor to perturb.
struct LeafCoord {
    Tensor leaf;
    std::size_t index;
};

/// Compares reverse-mode gradients with central differences
/// (f(x+eps e) - f(x-eps e)) / 2 eps.
///
/// Non-scalar outputs are reduced to a scalar with fixed random weights; the
/// perturbed evaluations are reduced in double so that float32 rounding of
/// the unperturbed outputs cancels exactly. Returns the worst coordinate; the
/// caller decides the tolerance.
GradCheckResult finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                        const GradCheckOptions& options = {});

/// Same check over arbitrary leaf coordinates (typically model parameters);
/// `f` reads the leaves it closes over.
GradCheckResult finite_difference_check_leaves(const std::function<Tensor()>& f,
                                               const std::vector<LeafCoord>& coords,
                                               const GradCheckOptions& options = {});

}  // namespace pcgen
