#include "pcgen/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <numeric>

#include "pcgen/kernels.hpp"

namespace pcgen {

using detail::grad_of;
using detail::make_result;

namespace {

int normalize_axis(int axis, int ndim) {
    int a = axis < 0 ? axis + ndim : axis;
    if (a < 0 || a >= ndim) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(ndim));
    }
    return a;
}

struct AxisSplit {
    std::int64_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
    AxisSplit r;
    for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
    r.n = s[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

std::vector<float> transpose_copy(std::span<const float> src, std::int64_t rows, std::int64_t cols) {
    std::vector<float> out(static_cast<std::size_t>(rows * cols));
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < cols; ++c) out[static_cast<std::size_t>(c * rows + r)] = src[r * cols + c];
    return out;
}

template <typename F>
Tensor unary(const char* op, const Tensor& x, F&& fwd_and_deriv) {
    const auto n = x.numel();
    std::vector<float> out(n);
    const bool rec = detail::needs_grad({&x});
    std::shared_ptr<std::vector<float>> deriv;
    if (rec) deriv = std::make_shared<std::vector<float>>(n);
    auto xd = x.data();
    for (std::size_t i = 0; i < n; ++i) {
        double d = 0.0;
        out[i] = static_cast<float>(fwd_and_deriv(static_cast<double>(xd[i]), d));
        if (rec) (*deriv)[i] = static_cast<float>(d);
    }
    return make_result(op, x.shape(), std::move(out), {&x}, [x, deriv](std::span<const float> g) {
        if (float* gx = grad_of(x))
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*deriv)[i];
    });
}

}  // namespace

// ---------------------------------------------------------------------------
// shape

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != static_cast<std::int64_t>(x.numel())) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    return make_result("reshape", std::move(shape), x.vec(), {&x}, [x](std::span<const float> g) {
        if (float* gx = grad_of(x))
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

Tensor permute(const Tensor& x, const std::vector<int>& order) {
    const auto& s = x.shape();
    const int nd = x.ndim();
    if (static_cast<int>(order.size()) != nd) throw ShapeError("permute: order rank mismatch for " + shape_str(s));
    std::vector<bool> seen(static_cast<std::size_t>(nd), false);
    for (int o : order) {
        if (o < 0 || o >= nd || seen[static_cast<std::size_t>(o)]) throw ShapeError("permute: invalid axis order");
        seen[static_cast<std::size_t>(o)] = true;
    }
    std::vector<std::int64_t> in_stride(static_cast<std::size_t>(nd), 1);
    for (int i = nd - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * s[i + 1];
    Shape out_shape(static_cast<std::size_t>(nd));
    std::vector<std::int64_t> src_stride(static_cast<std::size_t>(nd));
    for (int i = 0; i < nd; ++i) {
        out_shape[i] = s[order[i]];
        src_stride[i] = in_stride[order[i]];
    }
    // map[i] = flat source index of output element i
    auto map = std::make_shared<std::vector<std::int64_t>>(x.numel());
    std::vector<std::int64_t> idx(static_cast<std::size_t>(nd), 0);
    std::int64_t src = 0;
    for (std::size_t flat = 0; flat < x.numel(); ++flat) {
        (*map)[flat] = src;
        for (int d = nd - 1; d >= 0; --d) {
            ++idx[d];
            src += src_stride[d];
            if (idx[d] < out_shape[d]) break;
            src -= src_stride[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    std::vector<float> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[static_cast<std::size_t>((*map)[i])];
    return make_result("permute", std::move(out_shape), std::move(out), {&x}, [x, map](std::span<const float> g) {
        if (float* gx = grad_of(x))
            for (std::size_t i = 0; i < g.size(); ++i) gx[(*map)[i]] += g[i];
    });
}

Tensor transpose(const Tensor& x) {
    const int nd = x.ndim();
    if (nd < 2) throw ShapeError("transpose: needs rank >= 2, got " + shape_str(x.shape()));
    std::vector<int> order(static_cast<std::size_t>(nd));
    std::iota(order.begin(), order.end(), 0);
    std::swap(order[nd - 1], order[nd - 2]);
    return permute(x, order);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const int nd = parts[0].ndim();
    const int ax = normalize_axis(axis, nd);
    Shape out_shape = parts[0].shape();
    out_shape[ax] = 0;
    for (const auto& p : parts) {
        if (p.ndim() != nd) throw ShapeError("concat: rank mismatch");
        for (int d = 0; d < nd; ++d) {
            if (d != ax && p.shape()[d] != parts[0].shape()[d]) {
                throw ShapeError("concat: shapes " + shape_str(parts[0].shape()) + " and " + shape_str(p.shape()) +
                                 " differ off the concat axis");
            }
        }
        out_shape[ax] += p.shape()[ax];
    }
    const auto split = split_axis(out_shape, ax);
    std::vector<float> out(static_cast<std::size_t>(shape_numel(out_shape)));
    std::vector<std::int64_t> offsets;
    std::int64_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const auto len = p.shape()[ax] * split.inner;
        auto pd = p.data();
        for (std::int64_t o = 0; o < split.outer; ++o) {
            std::copy_n(pd.data() + o * len, len, out.data() + o * split.n * split.inner + off);
        }
        off += len;
    }
    std::vector<const Tensor*> inputs;
    for (const auto& p : parts) inputs.push_back(&p);
    return make_result("concat", out_shape, std::move(out), inputs,
                       [parts, offsets, split, ax](std::span<const float> g) {
                           for (std::size_t k = 0; k < parts.size(); ++k) {
                               float* gp = grad_of(parts[k]);
                               if (!gp) continue;
                               const auto len = parts[k].shape()[ax] * split.inner;
                               for (std::int64_t o = 0; o < split.outer; ++o) {
                                   const float* src = g.data() + o * split.n * split.inner + offsets[k];
                                   for (std::int64_t i = 0; i < len; ++i) gp[o * len + i] += src[i];
                               }
                           }
                       });
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
    const int ax = normalize_axis(axis, x.ndim());
    const auto split = split_axis(x.shape(), ax);
    if (start < 0 || length <= 0 || start + length > split.n) {
        throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of bounds for " + shape_str(x.shape()) + " axis " + std::to_string(axis));
    }
    Shape out_shape = x.shape();
    out_shape[ax] = length;
    const auto len = length * split.inner;
    std::vector<float> out(static_cast<std::size_t>(split.outer * len));
    auto xd = x.data();
    for (std::int64_t o = 0; o < split.outer; ++o) {
        std::copy_n(xd.data() + (o * split.n + start) * split.inner, len, out.data() + o * len);
    }
    return make_result("slice", std::move(out_shape), std::move(out), {&x},
                       [x, split, start, len](std::span<const float> g) {
                           if (float* gx = grad_of(x))
                               for (std::int64_t o = 0; o < split.outer; ++o)
                                   for (std::int64_t i = 0; i < len; ++i)
                                       gx[(o * split.n + start) * split.inner + i] += g[o * len + i];
                       });
}

Tensor index_select_flat(const Tensor& x, const std::vector<std::int64_t>& index) {
    if (index.empty()) throw ShapeError("index_select_flat: empty index");
    std::vector<float> out(index.size());
    auto xd = x.data();
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= static_cast<std::int64_t>(x.numel())) {
            throw ShapeError("index_select_flat: index out of range");
        }
        out[i] = xd[static_cast<std::size_t>(index[i])];
    }
    auto idx = std::make_shared<std::vector<std::int64_t>>(index);
    return make_result("index_select", {static_cast<std::int64_t>(index.size())}, std::move(out), {&x},
                       [x, idx](std::span<const float> g) {
                           if (float* gx = grad_of(x))
                               for (std::size_t i = 0; i < g.size(); ++i) gx[(*idx)[i]] += g[i];
                       });
}

// ---------------------------------------------------------------------------
// arithmetic

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<float> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
    return make_result("add", a.shape(), std::move(out), {&a, &b}, [a, b](std::span<const float> g) {
        if (float* ga = grad_of(a))
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        if (float* gb = grad_of(b))
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<float> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
    return make_result("sub", a.shape(), std::move(out), {&a, &b}, [a, b](std::span<const float> g) {
        if (float* ga = grad_of(a))
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        if (float* gb = grad_of(b))
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<float> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
    return make_result("mul", a.shape(), std::move(out), {&a, &b}, [a, b](std::span<const float> g) {
        auto ad = a.data(), bd = b.data();
        if (float* ga = grad_of(a))
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i];
        if (float* gb = grad_of(b))
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad[i];
    });
}

Tensor scale(const Tensor& x, float factor) {
    std::vector<float> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * factor;
    return make_result("scale", x.shape(), std::move(out), {&x}, [x, factor](std::span<const float> g) {
        if (float* gx = grad_of(x))
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
}

Tensor add_scalar(const Tensor& x, float value) {
    std::vector<float> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] + value;
    return make_result("add_scalar", x.shape(), std::move(out), {&x}, [x](std::span<const float> g) {
        if (float* gx = grad_of(x))
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    const auto n = x.dim(-1);
    if (bias.ndim() != 1 || bias.dim(0) != n) {
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match last dim of " +
                         shape_str(x.shape()));
    }
    const auto rows = static_cast<std::int64_t>(x.numel()) / n;
    std::vector<float> out(x.numel());
    auto xd = x.data(), bd = bias.data();
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < n; ++j) out[r * n + j] = xd[r * n + j] + bd[j];
    return make_result("add_bias", x.shape(), std::move(out), {&x, &bias},
                       [x, bias, rows, n](std::span<const float> g) {
                           if (float* gx = grad_of(x))
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                           if (float* gb = grad_of(bias)) {
                               for (std::int64_t j = 0; j < n; ++j) {
                                   double s = 0.0;
                                   for (std::int64_t r = 0; r < rows; ++r) s += g[r * n + j];
                                   gb[j] += static_cast<float>(s);
                               }
                           }
                       });
}

Tensor add_rows(const Tensor& x, const Tensor& rows_t) {
    if (rows_t.ndim() != 2 || x.ndim() < 2 || x.dim(-1) != rows_t.dim(1) || x.dim(-2) != rows_t.dim(0)) {
        throw ShapeError("add_rows: " + shape_str(rows_t.shape()) + " does not match trailing dims of " +
                         shape_str(x.shape()));
    }
    const auto block = static_cast<std::int64_t>(rows_t.numel());
    const auto reps = static_cast<std::int64_t>(x.numel()) / block;
    std::vector<float> out(x.numel());
    auto xd = x.data(), rd = rows_t.data();
    for (std::int64_t r = 0; r < reps; ++r)
        for (std::int64_t j = 0; j < block; ++j) out[r * block + j] = xd[r * block + j] + rd[j];
    return make_result("add_rows", x.shape(), std::move(out), {&x, &rows_t},
                       [x, rows_t, reps, block](std::span<const float> g) {
                           if (float* gx = grad_of(x))
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                           if (float* gr = grad_of(rows_t)) {
                               for (std::int64_t j = 0; j < block; ++j) {
                                   double s = 0.0;
                                   for (std::int64_t r = 0; r < reps; ++r) s += g[r * block + j];
                                   gr[j] += static_cast<float>(s);
                               }
                           }
                       });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() < 2 || b.ndim() < 2) {
        throw ShapeError("matmul: needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const auto m = a.dim(-2), k = a.dim(-1), kb = b.dim(-2), n = b.dim(-1);
    Shape batch_a(a.shape().begin(), a.shape().end() - 2);
    Shape batch_b(b.shape().begin(), b.shape().end() - 2);
    if (k != kb || (!batch_a.empty() && !batch_b.empty() && batch_a != batch_b)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const Shape& batch = batch_a.empty() ? batch_b : batch_a;
    const auto nb = shape_numel(batch);
    const bool a_batched = !batch_a.empty(), b_batched = !batch_b.empty();
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);

    std::vector<float> out(static_cast<std::size_t>(nb * m * n));
    auto ad = a.data(), bd = b.data();
    if (!b_batched) {
        // Fold the batch into rows: one [nb*m, k] x [k, n] product.
        kernels::matmul(ad, bd, out, nb * m, k, n);
    } else {
        for (std::int64_t i = 0; i < nb; ++i) {
            kernels::matmul(ad.subspan(static_cast<std::size_t>(a_batched ? i * m * k : 0), static_cast<std::size_t>(m * k)),
                            bd.subspan(static_cast<std::size_t>(i * k * n), static_cast<std::size_t>(k * n)),
                            std::span<float>(out).subspan(static_cast<std::size_t>(i * m * n), static_cast<std::size_t>(m * n)), m, k, n);
        }
    }
    return make_result("matmul", std::move(out_shape), std::move(out), {&a, &b},
                       [a, b, nb, m, k, n, a_batched, b_batched](std::span<const float> g) {
                           auto ad = a.data(), bd = b.data();
                           if (float* ga = grad_of(a)) {
                               std::vector<float> tmp(static_cast<std::size_t>(m * k));
                               for (std::int64_t i = 0; i < nb; ++i) {
                                   auto bt = transpose_copy(bd.subspan(static_cast<std::size_t>(b_batched ? i * k * n : 0), static_cast<std::size_t>(k * n)), k, n);
                                   kernels::matmul(g.subspan(static_cast<std::size_t>(i * m * n), static_cast<std::size_t>(m * n)), bt, tmp, m, n, k);
                                   float* dst = ga + (a_batched ? i * m * k : 0);
                                   for (std::int64_t j = 0; j < m * k; ++j) dst[j] += tmp[j];
                               }
                           }
                           if (float* gb = grad_of(b)) {
                               if (!b_batched) {
                                   auto at = transpose_copy(ad, nb * m, k);
                                   std::vector<float> tmp(static_cast<std::size_t>(k * n));
                                   kernels::matmul(at, g, tmp, k, nb * m, n);
                                   for (std::int64_t j = 0; j < k * n; ++j) gb[j] += tmp[j];
                               } else {
                                   std::vector<float> tmp(static_cast<std::size_t>(k * n));
                                   for (std::int64_t i = 0; i < nb; ++i) {
                                       auto at = transpose_copy(ad.subspan(static_cast<std::size_t>(a_batched ? i * m * k : 0), static_cast<std::size_t>(m * k)), m, k);
                                       kernels::matmul(at, g.subspan(static_cast<std::size_t>(i * m * n), static_cast<std::size_t>(m * n)), tmp, k, m, n);
                                       float* dst = gb + i * k * n;
                                       for (std::int64_t j = 0; j < k * n; ++j) dst[j] += tmp[j];
                                   }
                               }
                           }
                       });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (float v : x.data()) s += v;
    return make_result("sum", {1}, {static_cast<float>(s)}, {&x}, [x](std::span<const float> g) {
        if (float* gx = grad_of(x))
            for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[0];
    });
}

Tensor mean(const Tensor& x) {
    double s = 0.0;
    for (float v : x.data()) s += v;
    const double n = static_cast<double>(x.numel());
    return make_result("mean", {1}, {static_cast<float>(s / n)}, {&x}, [x, n](std::span<const float> g) {
        if (float* gx = grad_of(x)) {
            const float gv = static_cast<float>(g[0] / n);
            for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += gv;
        }
    });
}

// ---------------------------------------------------------------------------
// elementwise

Tensor relu(const Tensor& x) {
    // Subgradient at exactly 0 is 0.
    return unary("relu", x, [](double v, double& d) {
        d = v > 0.0 ? 1.0 : 0.0;
        return v > 0.0 ? v : 0.0;
    });
}

Tensor gelu(const Tensor& x) {
    return unary("gelu", x, [](double v, double& d) {
        const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        d = cdf + v * pdf;
        return v * cdf;
    });
}

Tensor sigmoid(const Tensor& x) {
    return unary("sigmoid", x, [](double v, double& d) {
        const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        d = s * (1.0 - s);
        return s;
    });
}

Tensor softplus(const Tensor& x) {
    return unary("softplus", x, [](double v, double& d) {
        d = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
    });
}

Tensor abs(const Tensor& x) {
    return unary("abs", x, [](double v, double& d) {
        d = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
        return std::abs(v);
    });
}

// ---------------------------------------------------------------------------
// normalization

Tensor softmax(const Tensor& x, int axis) {
    const int ax = normalize_axis(axis, x.ndim());
    const auto sp = split_axis(x.shape(), ax);
    std::vector<float> out(x.numel());
    auto xd = x.data();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
        for (std::int64_t in = 0; in < sp.inner; ++in) {
            const auto base = o * sp.n * sp.inner + in;
            double mx = -INFINITY;
            for (std::int64_t i = 0; i < sp.n; ++i) mx = std::max(mx, static_cast<double>(xd[base + i * sp.inner]));
            double s = 0.0;
            for (std::int64_t i = 0; i < sp.n; ++i) s += std::exp(static_cast<double>(xd[base + i * sp.inner]) - mx);
            for (std::int64_t i = 0; i < sp.n; ++i)
                out[base + i * sp.inner] = static_cast<float>(std::exp(static_cast<double>(xd[base + i * sp.inner]) - mx) / s);
        }
    }
    auto y = std::make_shared<std::vector<float>>(out);
    return make_result("softmax", x.shape(), std::move(out), {&x}, [x, y, sp](std::span<const float> g) {
        float* gx = grad_of(x);
        if (!gx) return;
        for (std::int64_t o = 0; o < sp.outer; ++o) {
            for (std::int64_t in = 0; in < sp.inner; ++in) {
                const auto base = o * sp.n * sp.inner + in;
                double dot = 0.0;
                for (std::int64_t i = 0; i < sp.n; ++i) dot += static_cast<double>(g[base + i * sp.inner]) * (*y)[base + i * sp.inner];
                for (std::int64_t i = 0; i < sp.n; ++i) {
                    const auto j = base + i * sp.inner;
                    gx[j] += static_cast<float>((*y)[j] * (g[j] - dot));
                }
            }
        }
    });
}

Tensor causal_softmax(const Tensor& scores) {
    if (scores.ndim() < 2) throw ShapeError("causal_softmax: needs rank >= 2");
    const auto q = scores.dim(-2), k = scores.dim(-1);
    const auto blocks = static_cast<std::int64_t>(scores.numel()) / (q * k);
    const auto offset = k - q;
    std::vector<float> out(scores.numel(), 0.0f);
    auto xd = scores.data();
    for (std::int64_t b = 0; b < blocks; ++b) {
        for (std::int64_t i = 0; i < q; ++i) {
            const auto row = (b * q + i) * k;
            const auto visible = std::min(k, i + offset + 1);
            if (visible <= 0) continue;
            double mx = -INFINITY;
            for (std::int64_t j = 0; j < visible; ++j) mx = std::max(mx, static_cast<double>(xd[row + j]));
            double s = 0.0;
            for (std::int64_t j = 0; j < visible; ++j) s += std::exp(static_cast<double>(xd[row + j]) - mx);
            for (std::int64_t j = 0; j < visible; ++j)
                out[row + j] = static_cast<float>(std::exp(static_cast<double>(xd[row + j]) - mx) / s);
        }
    }
    auto y = std::make_shared<std::vector<float>>(out);
    return make_result("causal_softmax", scores.shape(), std::move(out), {&scores},
                       [scores, y, blocks, q, k, offset](std::span<const float> g) {
                           float* gx = grad_of(scores);
                           if (!gx) return;
                           for (std::int64_t b = 0; b < blocks; ++b) {
                               for (std::int64_t i = 0; i < q; ++i) {
                                   const auto row = (b * q + i) * k;
                                   const auto visible = std::min(k, i + offset + 1);
                                   double dot = 0.0;
                                   for (std::int64_t j = 0; j < visible; ++j) dot += static_cast<double>(g[row + j]) * (*y)[row + j];
                                   for (std::int64_t j = 0; j < visible; ++j)
                                       gx[row + j] += static_cast<float>((*y)[row + j] * (g[row + j] - dot));
                               }
                           }
                       });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int axis) {
    const int ax = normalize_axis(axis, x.ndim());
    const auto sp = split_axis(x.shape(), ax);
    for (const Tensor* p : {&gamma, &beta}) {
        if (p->defined() && (p->ndim() != 1 || p->dim(0) != sp.n)) {
            throw ShapeError("layer_norm: affine parameter " + shape_str(p->shape()) + " does not match axis size " +
                             std::to_string(sp.n));
        }
    }
    const auto slices = sp.outer * sp.inner;
    auto xhat = std::make_shared<std::vector<float>>(x.numel());
    auto rstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(slices));
    std::vector<float> out(x.numel());
    auto xd = x.data();
    const float* gd = gamma.defined() ? gamma.data().data() : nullptr;
    const float* bd = beta.defined() ? beta.data().data() : nullptr;
    for (std::int64_t o = 0; o < sp.outer; ++o) {
        for (std::int64_t in = 0; in < sp.inner; ++in) {
            const auto base = o * sp.n * sp.inner + in;
            double mu = 0.0;
            for (std::int64_t i = 0; i < sp.n; ++i) mu += xd[base + i * sp.inner];
            mu /= static_cast<double>(sp.n);
            double var = 0.0;
            for (std::int64_t i = 0; i < sp.n; ++i) {
                const double d = xd[base + i * sp.inner] - mu;
                var += d * d;
            }
            var /= static_cast<double>(sp.n);
            const double r = 1.0 / std::sqrt(var + kNormEpsilon);
            (*rstd)[o * sp.inner + in] = r;
            for (std::int64_t i = 0; i < sp.n; ++i) {
                const auto j = base + i * sp.inner;
                const double h = (xd[j] - mu) * r;
                (*xhat)[j] = static_cast<float>(h);
                out[j] = static_cast<float>(h * (gd ? gd[i] : 1.0) + (bd ? bd[i] : 0.0));
            }
        }
    }
    return make_result("layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
                       [x, gamma, beta, xhat, rstd, sp](std::span<const float> g) {
                           const float* gd = gamma.defined() ? gamma.data().data() : nullptr;
                           float* gx = grad_of(x);
                           float* gg = grad_of(gamma);
                           float* gbeta = grad_of(beta);
                           std::vector<double> acc_g(static_cast<std::size_t>(sp.n), 0.0), acc_b(static_cast<std::size_t>(sp.n), 0.0);
                           for (std::int64_t o = 0; o < sp.outer; ++o) {
                               for (std::int64_t in = 0; in < sp.inner; ++in) {
                                   const auto base = o * sp.n * sp.inner + in;
                                   double m1 = 0.0, m2 = 0.0;
                                   for (std::int64_t i = 0; i < sp.n; ++i) {
                                       const auto j = base + i * sp.inner;
                                       const double gh = static_cast<double>(g[j]) * (gd ? gd[i] : 1.0);
                                       m1 += gh;
                                       m2 += gh * (*xhat)[j];
                                       acc_g[i] += static_cast<double>(g[j]) * (*xhat)[j];
                                       acc_b[i] += g[j];
                                   }
                                   if (!gx) continue;
                                   m1 /= static_cast<double>(sp.n);
                                   m2 /= static_cast<double>(sp.n);
                                   const double r = (*rstd)[o * sp.inner + in];
                                   for (std::int64_t i = 0; i < sp.n; ++i) {
                                       const auto j = base + i * sp.inner;
                                       const double gh = static_cast<double>(g[j]) * (gd ? gd[i] : 1.0);
                                       gx[j] += static_cast<float>(r * (gh - m1 - (*xhat)[j] * m2));
                                   }
                               }
                           }
                           for (std::int64_t i = 0; i < sp.n; ++i) {
                               if (gg) gg[i] += static_cast<float>(acc_g[i]);
                               if (gbeta) gbeta[i] += static_cast<float>(acc_b[i]);
                           }
                       });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state, bool training) {
    if (x.ndim() < 2) throw ShapeError("batch_norm: needs [B, C, ...], got " + shape_str(x.shape()));
    const auto B = x.dim(0), C = x.dim(1);
    const auto spatial = static_cast<std::int64_t>(x.numel()) / (B * C);
    for (const Tensor* p : {&gamma, &beta}) {
        if (p->defined() && (p->ndim() != 1 || p->dim(0) != C)) throw ShapeError("batch_norm: affine shape mismatch");
    }
    if (state.running_mean.empty()) {
        state.running_mean.assign(static_cast<std::size_t>(C), 0.0f);
        state.running_var.assign(static_cast<std::size_t>(C), 1.0f);
    }
    if (static_cast<std::int64_t>(state.running_mean.size()) != C) throw ShapeError("batch_norm: running stats size mismatch");

    const auto count = static_cast<double>(B * spatial);
    auto xhat = std::make_shared<std::vector<float>>(x.numel());
    auto rstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C));
    std::vector<float> out(x.numel());
    auto xd = x.data();
    const float* gd = gamma.defined() ? gamma.data().data() : nullptr;
    const float* bd = beta.defined() ? beta.data().data() : nullptr;
    for (std::int64_t c = 0; c < C; ++c) {
        double mu, var;
        if (training) {
            mu = 0.0;
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t s = 0; s < spatial; ++s) mu += xd[(b * C + c) * spatial + s];
            mu /= count;
            var = 0.0;
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t s = 0; s < spatial; ++s) {
                    const double d = xd[(b * C + c) * spatial + s] - mu;
                    var += d * d;
                }
            var /= count;
            const double unbiased = count > 1 ? var * count / (count - 1) : var;
            state.running_mean[c] = static_cast<float>((1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu);
            state.running_var[c] = static_cast<float>((1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased);
        } else {
            mu = state.running_mean[c];
            var = state.running_var[c];
        }
        const double r = 1.0 / std::sqrt(var + kNormEpsilon);
        (*rstd)[c] = r;
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t s = 0; s < spatial; ++s) {
                const auto j = (b * C + c) * spatial + s;
                const double h = (xd[j] - mu) * r;
                (*xhat)[j] = static_cast<float>(h);
                out[j] = static_cast<float>(h * (gd ? gd[c] : 1.0) + (bd ? bd[c] : 0.0));
            }
    }
    return make_result("batch_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
                       [x, gamma, beta, xhat, rstd, B, C, spatial, count, training](std::span<const float> g) {
                           const float* gd = gamma.defined() ? gamma.data().data() : nullptr;
                           float* gx = grad_of(x);
                           float* gg = grad_of(gamma);
                           float* gbeta = grad_of(beta);
                           for (std::int64_t c = 0; c < C; ++c) {
                               double sg = 0.0, sgh = 0.0;
                               for (std::int64_t b = 0; b < B; ++b)
                                   for (std::int64_t s = 0; s < spatial; ++s) {
                                       const auto j = (b * C + c) * spatial + s;
                                       sg += g[j];
                                       sgh += static_cast<double>(g[j]) * (*xhat)[j];
                                   }
                               if (gg) gg[c] += static_cast<float>(sgh);
                               if (gbeta) gbeta[c] += static_cast<float>(sg);
                               if (!gx) continue;
                               const double gam = gd ? gd[c] : 1.0;
                               const double r = (*rstd)[c];
                               for (std::int64_t b = 0; b < B; ++b)
                                   for (std::int64_t s = 0; s < spatial; ++s) {
                                       const auto j = (b * C + c) * spatial + s;
                                       if (training) {
                                           gx[j] += static_cast<float>(gam * r * (g[j] - sg / count - (*xhat)[j] * sgh / count));
                                       } else {
                                           gx[j] += static_cast<float>(gam * r * g[j]);
                                       }
                                   }
                           }
                       });
}

// ---------------------------------------------------------------------------
// convolution

namespace {

void add_channel_bias(std::vector<float>& y, const Tensor& bias, std::int64_t B, std::int64_t C, std::int64_t plane) {
    if (!bias.defined()) return;
    if (bias.ndim() != 1 || bias.dim(0) != C) throw ShapeError("conv: bias " + shape_str(bias.shape()) + " does not match channels");
    auto bd = bias.data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t s = 0; s < plane; ++s) y[(b * C + c) * plane + s] += bd[c];
}

void accumulate_bias_grad(const Tensor& bias, std::span<const float> g, std::int64_t B, std::int64_t C, std::int64_t plane) {
    float* gb = grad_of(bias);
    if (!gb) return;
    for (std::int64_t c = 0; c < C; ++c) {
        double s = 0.0;
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t p = 0; p < plane; ++p) s += g[(b * C + c) * plane + p];
        gb[c] += static_cast<float>(s);
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::int64_t stride, std::int64_t padding) {
    if (x.ndim() != 4 || w.ndim() != 4 || x.dim(1) != w.dim(1)) {
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
    }
    if (stride < 1 || padding < 0) throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
    kernels::ConvGeometry geo{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), stride, padding};
    if (geo.kernel_h > geo.in_h + 2 * padding || geo.kernel_w > geo.in_w + 2 * padding) {
        throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " + shape_str(x.shape()));
    }
    const auto oh = geo.out_h(), ow = geo.out_w();
    std::vector<float> y(static_cast<std::size_t>(geo.batch * geo.out_channels * oh * ow));
    kernels::conv2d_forward(geo, x.data(), w.data(), y);
    add_channel_bias(y, bias, geo.batch, geo.out_channels, oh * ow);
    return make_result("conv2d", {geo.batch, geo.out_channels, oh, ow}, std::move(y), {&x, &w, &bias},
                       [x, w, bias, geo](std::span<const float> g) {
                           if (float* gx = grad_of(x)) {
                               std::vector<float> tmp(x.numel());
                               kernels::conv2d_backward_input(geo, g, w.data(), tmp);
                               for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
                           }
                           if (float* gw = grad_of(w)) {
                               std::vector<float> tmp(w.numel());
                               kernels::conv2d_backward_weight(geo, x.data(), g, tmp);
                               for (std::size_t i = 0; i < tmp.size(); ++i) gw[i] += tmp[i];
                           }
                           accumulate_bias_grad(bias, g, geo.batch, geo.out_channels, geo.out_h() * geo.out_w());
                       });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::int64_t stride, std::int64_t padding) {
    if (x.ndim() != 4 || w.ndim() != 4 || x.dim(1) != w.dim(0)) {
        throw ShapeError("conv_transpose2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
    }
    if (stride < 1 || padding < 0) throw ShapeError("conv_transpose2d: stride must be >= 1 and padding >= 0");
    const auto oh = (x.dim(2) - 1) * stride - 2 * padding + w.dim(2);
    const auto ow = (x.dim(3) - 1) * stride - 2 * padding + w.dim(3);
    if (oh < 1 || ow < 1) {
        throw ShapeError("conv_transpose2d: kernel " + shape_str(w.shape()) + " with padding " + std::to_string(padding) +
                         " leaves no output for input " + shape_str(x.shape()));
    }
    // The conv whose input-adjoint this op is: maps [B, O, oh, ow] -> [B, C_in, H, W].
    kernels::ConvGeometry geo{x.dim(0), w.dim(1), oh, ow, w.dim(0), w.dim(2), w.dim(3), stride, padding};
    std::vector<float> y(static_cast<std::size_t>(geo.batch * geo.in_channels * oh * ow));
    kernels::conv2d_backward_input(geo, x.data(), w.data(), y);
    add_channel_bias(y, bias, geo.batch, geo.in_channels, oh * ow);
    return make_result("conv_transpose2d", {geo.batch, geo.in_channels, oh, ow}, std::move(y), {&x, &w, &bias},
                       [x, w, bias, geo](std::span<const float> g) {
                           if (float* gx = grad_of(x)) {
                               std::vector<float> tmp(x.numel());
                               kernels::conv2d_forward(geo, g, w.data(), tmp);
                               for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
                           }
                           if (float* gw = grad_of(w)) {
                               std::vector<float> tmp(w.numel());
                               kernels::conv2d_backward_weight(geo, g, x.data(), tmp);
                               for (std::size_t i = 0; i < tmp.size(); ++i) gw[i] += tmp[i];
                           }
                           accumulate_bias_grad(bias, g, geo.batch, geo.in_channels, geo.in_h * geo.in_w);
                       });
}

namespace {

/// Flat-index map for pixel shuffle: out[i] = in[map[i]].
std::shared_ptr<std::vector<std::int64_t>> shuffle_map(std::int64_t lead, std::int64_t c_out, std::int64_t h,
                                                        std::int64_t w, std::int64_t r) {
    auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(lead * c_out * h * r * w * r));
    const auto c_in = c_out * r * r;
    std::size_t k = 0;
    for (std::int64_t l = 0; l < lead; ++l)
        for (std::int64_t c = 0; c < c_out; ++c)
            for (std::int64_t oy = 0; oy < h * r; ++oy)
                for (std::int64_t ox = 0; ox < w * r; ++ox) {
                    const auto ic = c * r * r + (oy % r) * r + (ox % r);
                    (*map)[k++] = ((l * c_in + ic) * h + oy / r) * w + ox / r;
                }
    return map;
}

}  // namespace

Tensor pixel_shuffle(const Tensor& x, std::int64_t r) {
    if (x.ndim() < 3 || r < 1) throw ShapeError("pixel_shuffle: needs [*, C*r^2, H, W] and r >= 1");
    const auto c = x.dim(-3), h = x.dim(-2), w = x.dim(-1);
    if (c % (r * r) != 0) {
        throw ShapeError("pixel_shuffle: channels " + std::to_string(c) + " not divisible by r^2 = " + std::to_string(r * r));
    }
    const auto lead = static_cast<std::int64_t>(x.numel()) / (c * h * w);
    auto map = shuffle_map(lead, c / (r * r), h, w, r);
    Shape out_shape(x.shape().begin(), x.shape().end() - 3);
    out_shape.insert(out_shape.end(), {c / (r * r), h * r, w * r});
    std::vector<float> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[static_cast<std::size_t>((*map)[i])];
    return make_result("pixel_shuffle", std::move(out_shape), std::move(out), {&x}, [x, map](std::span<const float> g) {
        if (float* gx = grad_of(x))
            for (std::size_t i = 0; i < g.size(); ++i) gx[(*map)[i]] += g[i];
    });
}

Tensor pixel_unshuffle(const Tensor& x, std::int64_t r) {
    if (x.ndim() < 3 || r < 1) throw ShapeError("pixel_unshuffle: needs [*, C, H*r, W*r] and r >= 1");
    const auto c = x.dim(-3), hr = x.dim(-2), wr = x.dim(-1);
    if (hr % r != 0 || wr % r != 0) throw ShapeError("pixel_unshuffle: spatial dims not divisible by r");
    const auto lead = static_cast<std::int64_t>(x.numel()) / (c * hr * wr);
    // map from the shuffled layout: shuffled[i] = unshuffled[map[i]]
    auto map = shuffle_map(lead, c, hr / r, wr / r, r);
    Shape out_shape(x.shape().begin(), x.shape().end() - 3);
    out_shape.insert(out_shape.end(), {c * r * r, hr / r, wr / r});
    std::vector<float> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[static_cast<std::size_t>((*map)[i])] = xd[i];
    return make_result("pixel_unshuffle", std::move(out_shape), std::move(out), {&x}, [x, map](std::span<const float> g) {
        if (float* gx = grad_of(x))
            for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[static_cast<std::size_t>((*map)[i])];
    });
}

// ---------------------------------------------------------------------------
// attention

Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, bool causal) {
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 || k.shape() != v.shape() || q.dim(1) != k.dim(1)) {
        throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                         shape_str(v.shape()) + " are incompatible");
    }
    const auto e = q.dim(1);
    if (heads < 1 || e % heads != 0) {
        throw ShapeError("attention: embed dim " + std::to_string(e) + " not divisible by " + std::to_string(heads) + " heads");
    }
    const auto dh = e / heads;
    const auto lq = q.dim(0), lk = k.dim(0);
    auto split_heads = [&](const Tensor& t, std::int64_t len) { return permute(reshape(t, {len, heads, dh}), {1, 0, 2}); };
    auto qh = split_heads(q, lq);
    auto kh = split_heads(k, lk);
    auto vh = split_heads(v, lk);
    auto scores = scale(matmul(qh, transpose(kh)), static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh))));
    auto probs = causal ? causal_softmax(scores) : softmax(scores, -1);
    auto ctx = matmul(probs, vh);
    return reshape(permute(ctx, {1, 0, 2}), {lq, e});
}

// ---------------------------------------------------------------------------
// losses

Tensor bce_with_logits(const Tensor& logits, const std::vector<float>& target) {
    if (target.size() != logits.numel()) throw ShapeError("bce_with_logits: target size mismatch");
    auto ld = logits.data();
    double s = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double l = ld[i];
        s += std::max(l, 0.0) - l * target[i] + std::log1p(std::exp(-std::abs(l)));
    }
    const double n = static_cast<double>(target.size());
    auto tgt = std::make_shared<std::vector<float>>(target);
    return make_result("bce_with_logits", {1}, {static_cast<float>(s / n)}, {&logits},
                       [logits, tgt, n](std::span<const float> g) {
                           float* gl = grad_of(logits);
                           if (!gl) return;
                           auto ld = logits.data();
                           for (std::size_t i = 0; i < tgt->size(); ++i) {
                               const double l = ld[i];
                               const double p = l >= 0.0 ? 1.0 / (1.0 + std::exp(-l)) : std::exp(l) / (1.0 + std::exp(l));
                               gl[i] += static_cast<float>(g[0] * (p - (*tgt)[i]) / n);
                           }
                       });
}

Tensor masked_l1(const Tensor& pred, const std::vector<float>& target, const std::vector<float>& mask) {
    if (target.size() != pred.numel() || mask.size() != pred.numel()) throw ShapeError("masked_l1: size mismatch");
    auto pd = pred.data();
    double s = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] == 0.0f) continue;
        s += std::abs(static_cast<double>(pd[i]) - target[i]);
        ++count;
    }
    const double denom = count ? static_cast<double>(count) : 1.0;
    auto tgt = std::make_shared<std::vector<float>>(target);
    auto msk = std::make_shared<std::vector<float>>(mask);
    return make_result("masked_l1", {1}, {static_cast<float>(s / denom)}, {&pred},
                       [pred, tgt, msk, denom](std::span<const float> g) {
                           float* gp = grad_of(pred);
                           if (!gp) return;
                           auto pd = pred.data();
                           for (std::size_t i = 0; i < msk->size(); ++i) {
                               if ((*msk)[i] == 0.0f) continue;
                               const double d = static_cast<double>(pd[i]) - (*tgt)[i];
                               const double sgn = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
                               gp[i] += static_cast<float>(g[0] * sgn / denom);
                           }
                       });
}

}  // namespace pcgen
