#include "pcgen/kernels.hpp"

#include <cstdlib>
#include <cstring>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pcgen::kernels {

int thread_count() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void set_thread_count(int n) {
#ifdef _OPENMP
    omp_set_num_threads(n < 1 ? 1 : n);
#else
    (void)n;
#endif
}

bool apply_determinism_from_env() {
    const char* v = std::getenv("PCGEN_DETERMINISTIC");
    if (v && std::string(v) == "1") {
        set_thread_count(1);
        return true;
    }
    return false;
}

void matmul(std::span<const float> a, std::span<const float> b, std::span<float> c, std::int64_t m,
            std::int64_t k, std::int64_t n) {
    // i-k-j order: row of c accumulated in doubles, k ascending per element.
#pragma omp parallel
    {
        std::vector<double> acc(static_cast<std::size_t>(n));
#pragma omp for schedule(static)
        for (std::int64_t i = 0; i < m; ++i) {
            std::fill(acc.begin(), acc.end(), 0.0);
            const float* arow = a.data() + i * k;
            for (std::int64_t p = 0; p < k; ++p) {
                const double av = arow[p];
                const float* brow = b.data() + p * n;
                for (std::int64_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
            }
            float* crow = c.data() + i * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] = static_cast<float>(acc[j]);
        }
    }
}

void matmul_reference(std::span<const float> a, std::span<const float> b, std::span<float> c,
                      std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::int64_t p = 0; p < k; ++p) {
                s += static_cast<double>(a[i * k + p]) * static_cast<double>(b[p * n + j]);
            }
            c[i * n + j] = static_cast<float>(s);
        }
    }
}

void conv2d_forward(const ConvGeometry& g, std::span<const float> x, std::span<const float> w,
                    std::span<float> y) {
    const auto oh = g.out_h(), ow = g.out_w();
    const auto plane_in = g.in_h * g.in_w;
    const auto ksize = g.kernel_h * g.kernel_w;
#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t b = 0; b < g.batch; ++b) {
        for (std::int64_t o = 0; o < g.out_channels; ++o) {
            const float* xb = x.data() + b * g.in_channels * plane_in;
            const float* wo = w.data() + o * g.in_channels * ksize;
            float* yo = y.data() + (b * g.out_channels + o) * oh * ow;
            for (std::int64_t oy = 0; oy < oh; ++oy) {
                for (std::int64_t ox = 0; ox < ow; ++ox) {
                    double s = 0.0;
                    for (std::int64_t c = 0; c < g.in_channels; ++c) {
                        const float* xc = xb + c * plane_in;
                        const float* wc = wo + c * ksize;
                        for (std::int64_t ky = 0; ky < g.kernel_h; ++ky) {
                            const auto iy = oy * g.stride - g.padding + ky;
                            if (iy < 0 || iy >= g.in_h) continue;
                            for (std::int64_t kx = 0; kx < g.kernel_w; ++kx) {
                                const auto ix = ox * g.stride - g.padding + kx;
                                if (ix < 0 || ix >= g.in_w) continue;
                                s += static_cast<double>(xc[iy * g.in_w + ix]) *
                                     static_cast<double>(wc[ky * g.kernel_w + kx]);
                            }
                        }
                    }
                    yo[oy * ow + ox] = static_cast<float>(s);
                }
            }
        }
    }
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const float> gy, std::span<const float> w,
                           std::span<float> gx) {
    const auto oh = g.out_h(), ow = g.out_w();
    const auto ksize = g.kernel_h * g.kernel_w;
#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t b = 0; b < g.batch; ++b) {
        for (std::int64_t c = 0; c < g.in_channels; ++c) {
            float* gxc = gx.data() + (b * g.in_channels + c) * g.in_h * g.in_w;
            for (std::int64_t iy = 0; iy < g.in_h; ++iy) {
                for (std::int64_t ix = 0; ix < g.in_w; ++ix) {
                    double s = 0.0;
                    for (std::int64_t o = 0; o < g.out_channels; ++o) {
                        const float* gyo = gy.data() + (b * g.out_channels + o) * oh * ow;
                        const float* wc = w.data() + (o * g.in_channels + c) * ksize;
                        for (std::int64_t ky = 0; ky < g.kernel_h; ++ky) {
                            const auto ny = iy + g.padding - ky;
                            if (ny < 0 || ny % g.stride != 0) continue;
                            const auto oy = ny / g.stride;
                            if (oy >= oh) continue;
                            for (std::int64_t kx = 0; kx < g.kernel_w; ++kx) {
                                const auto nx = ix + g.padding - kx;
                                if (nx < 0 || nx % g.stride != 0) continue;
                                const auto ox = nx / g.stride;
                                if (ox >= ow) continue;
                                s += static_cast<double>(gyo[oy * ow + ox]) *
                                     static_cast<double>(wc[ky * g.kernel_w + kx]);
                            }
                        }
                    }
                    gxc[iy * g.in_w + ix] = static_cast<float>(s);
                }
            }
        }
    }
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const float> x, std::span<const float> gy,
                            std::span<float> gw) {
    const auto oh = g.out_h(), ow = g.out_w();
    const auto plane_in = g.in_h * g.in_w;
#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t o = 0; o < g.out_channels; ++o) {
        for (std::int64_t c = 0; c < g.in_channels; ++c) {
            for (std::int64_t ky = 0; ky < g.kernel_h; ++ky) {
                for (std::int64_t kx = 0; kx < g.kernel_w; ++kx) {
                    double s = 0.0;
                    for (std::int64_t b = 0; b < g.batch; ++b) {
                        const float* xc = x.data() + (b * g.in_channels + c) * plane_in;
                        const float* gyo = gy.data() + (b * g.out_channels + o) * oh * ow;
                        for (std::int64_t oy = 0; oy < oh; ++oy) {
                            const auto iy = oy * g.stride - g.padding + ky;
                            if (iy < 0 || iy >= g.in_h) continue;
                            for (std::int64_t ox = 0; ox < ow; ++ox) {
                                const auto ix = ox * g.stride - g.padding + kx;
                                if (ix < 0 || ix >= g.in_w) continue;
                                s += static_cast<double>(xc[iy * g.in_w + ix]) *
                                     static_cast<double>(gyo[oy * ow + ox]);
                            }
                        }
                    }
                    gw[((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx] = static_cast<float>(s);
                }
            }
        }
    }
}

void conv2d_forward_reference(const ConvGeometry& g, std::span<const float> x, std::span<const float> w,
                              std::span<float> y) {
    const auto oh = g.out_h(), ow = g.out_w();
    std::vector<double> acc(static_cast<std::size_t>(g.batch * g.out_channels * oh * ow), 0.0);
    for (std::int64_t b = 0; b < g.batch; ++b)
        for (std::int64_t o = 0; o < g.out_channels; ++o)
            for (std::int64_t c = 0; c < g.in_channels; ++c)
                for (std::int64_t ky = 0; ky < g.kernel_h; ++ky)
                    for (std::int64_t kx = 0; kx < g.kernel_w; ++kx)
                        for (std::int64_t oy = 0; oy < oh; ++oy)
                            for (std::int64_t ox = 0; ox < ow; ++ox) {
                                const auto iy = oy * g.stride - g.padding + ky;
                                const auto ix = ox * g.stride - g.padding + kx;
                                if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
                                acc[static_cast<std::size_t>(((b * g.out_channels + o) * oh + oy) * ow + ox)] +=
                                    static_cast<double>(x[((b * g.in_channels + c) * g.in_h + iy) * g.in_w + ix]) *
                                    static_cast<double>(w[((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx]);
                            }
    for (std::size_t i = 0; i < acc.size(); ++i) y[i] = static_cast<float>(acc[i]);
}

}  // namespace pcgen::kernels
