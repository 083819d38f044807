#pragma once

#include <cstdint>
#include <span>

// Raw float kernels behind the differentiable ops.
//
// Every parallel kernel splits work over independent outputs only and
// accumulates each output in a fixed order, so its result is bit-identical
// for any thread count. The *_reference variants are plain serial loops kept
// for tests and benchmarks.
namespace pcgen::kernels {

/// Number of OpenMP threads kernels will use (1 when built without OpenMP or
/// when PCGEN_DETERMINISTIC=1 was applied).
int thread_count();
void set_thread_count(int n);

/// Applies PCGEN_DETERMINISTIC=1 from the environment: forces one thread.
/// Returns true if deterministic mode is active.
bool apply_determinism_from_env();

/// c[m,n] = a[m,k] * b[k,n], float64 accumulation over k.
void matmul(std::span<const float> a, std::span<const float> b, std::span<float> c, std::int64_t m,
            std::int64_t k, std::int64_t n);
void matmul_reference(std::span<const float> a, std::span<const float> b, std::span<float> c,
                      std::int64_t m, std::int64_t k, std::int64_t n);

struct ConvGeometry {
    std::int64_t batch, in_channels, in_h, in_w;
    std::int64_t out_channels, kernel_h, kernel_w;
    std::int64_t stride, padding;

    std::int64_t out_h() const { return (in_h + 2 * padding - kernel_h) / stride + 1; }
    std::int64_t out_w() const { return (in_w + 2 * padding - kernel_w) / stride + 1; }
};

/// Cross-correlation. x [B,C,H,W], w [O,C,kh,kw] -> y [B,O,oh,ow] (no bias).
void conv2d_forward(const ConvGeometry& g, std::span<const float> x, std::span<const float> w,
                    std::span<float> y);
/// Adjoint of conv2d_forward in x: gy [B,O,oh,ow] -> gx [B,C,H,W].
void conv2d_backward_input(const ConvGeometry& g, std::span<const float> gy, std::span<const float> w,
                           std::span<float> gx);
/// Gradient w.r.t. the weights: x, gy -> gw [O,C,kh,kw].
void conv2d_backward_weight(const ConvGeometry& g, std::span<const float> x, std::span<const float> gy,
                            std::span<float> gw);

/// Textbook serial loop for conv2d_forward.
void conv2d_forward_reference(const ConvGeometry& g, std::span<const float> x, std::span<const float> w,
                              std::span<float> y);

}  // namespace pcgen::kernels
