#include "pcgen/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "pcgen/ops.hpp"

namespace pcgen {

namespace {

std::vector<float> projection_weights(std::size_t n, std::uint64_t seed) {
    if (n == 1) return {1.0f};
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    std::vector<float> w(n);
    for (auto& v : w) v = u(rng);
    return w;
}

double project(const Tensor& y, const std::vector<float>& w) {
    double s = 0.0;
    auto yd = y.data();
    for (std::size_t i = 0; i < w.size(); ++i) s += static_cast<double>(yd[i]) * w[i];
    return s;
}

}  // namespace

GradCheckResult finite_difference_check_leaves(const std::function<Tensor()>& f, const std::vector<LeafCoord>& coords,
                                               const GradCheckOptions& options) {
    GradCheckResult result;
    std::vector<float> w;
    {
        reset_tape();
        for (const auto& c : coords) Tensor(c.leaf).zero_grad();
        Tensor y = f();
        w = projection_weights(y.numel(), options.seed);
        Tensor loss = sum(mul(y, Tensor::from_data(y.shape(), w)));
        backward(loss);
    }
    std::vector<double> analytic;
    analytic.reserve(coords.size());
    for (const auto& c : coords) analytic.push_back(c.leaf.has_grad() ? c.leaf.grad()[c.index] : 0.0);
    reset_tape();

    double floor = options.denom_floor;
    if (options.scale_floor > 0.0) {
        double gmax = 0.0;
        for (double a : analytic) gmax = std::max(gmax, std::abs(a));
        floor = std::max(floor, options.scale_floor * gmax);
    }

    NoGradGuard no_grad;
    for (std::size_t i = 0; i < coords.size(); ++i) {
        Tensor leaf = coords[i].leaf;
        float& v = leaf.mutable_data()[coords[i].index];
        const float orig = v;
        // Central difference using the float steps actually taken.
        auto central = [&](double h) {
            v = static_cast<float>(orig + h);
            const double hi_step = static_cast<double>(v) - orig;
            const double fp = project(f(), w);
            v = static_cast<float>(orig - h);
            const double lo_step = orig - static_cast<double>(v);
            const double fm = project(f(), w);
            v = orig;
            return (fp - fm) / (hi_step + lo_step);
        };
        double numeric = central(options.eps);
        if (options.richardson) numeric = (4.0 * numeric - central(2.0 * options.eps)) / 3.0;
        const double a = analytic[i];
        const double abs_err = std::abs(a - numeric);
        const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
        result.max_abs_error = std::max(result.max_abs_error, abs_err);
        if (rel > result.max_rel_error || result.coords_checked == 0) {
            result.max_rel_error = std::max(rel, result.max_rel_error);
            result.worst_coord = i;
            result.analytic_at_worst = a;
            result.numeric_at_worst = numeric;
        }
        ++result.coords_checked;
    }
    return result;
}

GradCheckResult finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                        const GradCheckOptions& options) {
    Tensor leaf = Tensor::from_data(x.shape(), x.vec(), true);
    std::vector<std::size_t> idx(leaf.numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (options.max_coords && idx.size() > options.max_coords) {
        std::mt19937_64 rng(options.seed);
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(options.max_coords);
        std::sort(idx.begin(), idx.end());
    }
    std::vector<LeafCoord> coords;
    coords.reserve(idx.size());
    for (auto i : idx) coords.push_back({leaf, i});
    auto r = finite_difference_check_leaves([&] { return f(leaf); }, coords, options);
    r.worst_coord = coords.empty() ? 0 : idx[r.worst_coord];
    return r;
}

}  // namespace pcgen
