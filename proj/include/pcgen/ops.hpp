#pragma once

#include <cstdint>
#include <vector>

#include "pcgen/tensor.hpp"

// Differentiable tensor operations. Every op records itself on the calling
// thread's tape when any input requires grad and grad mode is enabled.
//
// Broadcasting is limited to leading batch dimensions (matmul) and the
// explicit bias/row helpers; anything else needs a reshape first.
namespace pcgen {

// --- shape -----------------------------------------------------------------
Tensor reshape(const Tensor& x, Shape shape);
/// General axis permutation, e.g. permute(x, {1, 0, 2}).
Tensor permute(const Tensor& x, const std::vector<int>& order);
/// Swaps the last two dimensions.
Tensor transpose(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length);
/// Gathers flat elements: out[i] = x.flat[index[i]]. Output shape [len(index)].
Tensor index_select_flat(const Tensor& x, const std::vector<std::int64_t>& index);

// --- arithmetic --------------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
Tensor add_scalar(const Tensor& x, float value);
/// x [..., n] + bias [n].
Tensor add_bias(const Tensor& x, const Tensor& bias);
/// x [..., n] + rows [n] broadcast over leading dims is add_bias; this adds
/// rows [r, n] to x [..., r, n].
Tensor add_rows(const Tensor& x, const Tensor& rows);
/// a [*, m, k] x b [*, k, n]; batch dims must match or one side has none.
Tensor matmul(const Tensor& a, const Tensor& b);

// --- reductions ----------------------------------------------------------------
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// --- elementwise ------------------------------------------------------------------
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor abs(const Tensor& x);

// --- normalization ---------------------------------------------------------------
inline constexpr float kNormEpsilon = 1e-5f;

Tensor softmax(const Tensor& x, int axis);
/// Softmax over the last axis of scores [*, q, k] where key j is visible to
/// query i iff j <= i + (k - q). Masked entries are exactly zero.
Tensor causal_softmax(const Tensor& scores);
/// Normalizes over `axis`; gamma/beta (shape [dim(axis)]) may be undefined.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int axis = -1);

struct BatchNormState {
    std::vector<float> running_mean;
    std::vector<float> running_var;
    float momentum = 0.1f;
};
/// x [B, C, ...]; statistics per channel over batch and spatial dims.
/// In training mode the batch statistics are used and `state` is updated.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  bool training);

// --- convolution -------------------------------------------------------------------
/// x [B,C,H,W], w [O,C,kh,kw], bias [O] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::int64_t stride,
              std::int64_t padding);
/// x [B,C,H,W], w [C,O,kh,kw] (input channels first), bias [O] or undefined.
/// Output size (H-1)*stride - 2*padding + kh.
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::int64_t stride,
                        std::int64_t padding);
/// [*, C*r*r, H, W] -> [*, C, H*r, W*r].
Tensor pixel_shuffle(const Tensor& x, std::int64_t r);
/// Inverse of pixel_shuffle.
Tensor pixel_unshuffle(const Tensor& x, std::int64_t r);

// --- attention ------------------------------------------------------------------------
/// softmax(Q K^T / sqrt(d_head)) V per head; q [Lq, E], k/v [Lk, E].
/// Returns the concatenated heads [Lq, E] (no output projection).
Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                                    bool causal);

// --- losses -----------------------------------------------------------------------------
/// Mean over elements of BCE(sigmoid(logits), target), stable logit form.
Tensor bce_with_logits(const Tensor& logits, const std::vector<float>& target);
/// Mean of |pred - target| over elements with mask != 0; zero if the mask is empty.
Tensor masked_l1(const Tensor& pred, const std::vector<float>& target, const std::vector<float>& mask);

}  // namespace pcgen
