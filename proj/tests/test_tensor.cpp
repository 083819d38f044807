#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "pcgen/gradcheck.hpp"
#include "pcgen/kernels.hpp"
#include "pcgen/ops.hpp"
#include "pcgen/tnsr.hpp"
#include "test_util.hpp"

using namespace pcgen;
using pcgen::testing::random_tensor;
using pcgen::testing::random_away_from_zero;
using pcgen::testing::op_check;
using pcgen::testing::kOpTol;

namespace {

// Direct 6-loop cross-correlation, written independently of the kernels.
std::vector<double> naive_conv(const Tensor& x, const Tensor& w, int stride, int pad) {
    const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const auto O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    const auto OH = (H + 2 * pad - KH) / stride + 1, OW = (W + 2 * pad - KW) / stride + 1;
    std::vector<double> y(static_cast<std::size_t>(B * O * OH * OW), 0.0);
    for (int b = 0; b < B; ++b)
        for (int o = 0; o < O; ++o)
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox)
                    for (int c = 0; c < C; ++c)
                        for (int ky = 0; ky < KH; ++ky)
                            for (int kx = 0; kx < KW; ++kx) {
                                int iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
                                if (iy < 0 || ix < 0 || iy >= H || ix >= W) continue;
                                y[((b * O + o) * OH + oy) * OW + ox] += x.at({b, c, iy, ix}) * w.at({o, c, ky, kx});
                            }
    return y;
}


}  // namespace

TEST_CASE("matmul: identity and permutation") {
    auto eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto v = Tensor::from_data({3, 1}, {1, 2, 3});
    auto r = matmul(eye, v);
    CHECK(r.shape() == Shape{3, 1});
    CHECK(r.vec() == std::vector<float>{1, 2, 3});

    auto a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    auto p = Tensor::from_data({2, 2}, {0, 1, 1, 0});
    CHECK(matmul(a, p).vec() == std::vector<float>{2, 1, 4, 3});
}

TEST_CASE("matmul: shape error names both shapes") {
    auto a = Tensor::zeros({2, 3});
    auto b = Tensor::zeros({4, 5});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("(2,3)") != std::string::npos);
        CHECK(msg.find("(4,5)") != std::string::npos);
    }
}

TEST_CASE("matmul: gradients match finite differences") {
    auto a = random_tensor({4, 5}, 1);
    auto b = random_tensor({5, 3}, 2);
    auto ra = op_check([&](const Tensor& x) { return matmul(x, b); }, a);
    auto rb = op_check([&](const Tensor& x) { return matmul(a, x); }, b);
    CHECK(ra.max_rel_error < kOpTol);
    CHECK(rb.max_rel_error < kOpTol);

    // batched on both sides and broadcast of a rank-2 operand
    auto ba = random_tensor({2, 3, 4}, 3);
    auto bb = random_tensor({2, 4, 2}, 4);
    CHECK(op_check([&](const Tensor& x) { return matmul(x, bb); }, ba).max_rel_error < kOpTol);
    CHECK(op_check([&](const Tensor& x) { return matmul(ba, x); }, bb).max_rel_error < kOpTol);
    auto w = random_tensor({4, 2}, 5);
    CHECK(op_check([&](const Tensor& x) { return matmul(ba, x); }, w).max_rel_error < kOpTol);
    auto left = random_tensor({3, 4}, 6);
    CHECK(op_check([&](const Tensor& x) { return matmul(x, bb); }, left).max_rel_error < kOpTol);
}

TEST_CASE("matmul kernel: parallel result is bit-identical to the serial reference") {
    auto a = random_tensor({37, 29}, 7);
    auto b = random_tensor({29, 41}, 8);
    std::vector<float> c1(37 * 41), c2(37 * 41);
    kernels::matmul(a.data(), b.data(), c1, 37, 29, 41);
    kernels::matmul_reference(a.data(), b.data(), c2, 37, 29, 41);
    CHECK(pcgen::testing::bitwise_equal(c1, c2));
}

TEST_CASE("conv2d: identity, summation, and naive-loop oracle") {
    auto x = random_tensor({1, 3, 5, 5}, 11);
    std::vector<float> wid(9, 0.0f);
    for (int c = 0; c < 3; ++c) wid[c * 3 + c] = 1.0f;
    auto y = conv2d(x, Tensor::from_data({3, 3, 1, 1}, wid), Tensor(), 1, 0);
    CHECK(y.vec() == x.vec());

    auto ones = Tensor::ones({1, 1, 3, 3});
    auto s = conv2d(ones, Tensor::ones({1, 1, 3, 3}), Tensor(), 1, 0);
    CHECK(s.shape() == Shape{1, 1, 1, 1});
    CHECK(s.item() == 9.0f);

    for (auto [stride, pad] : {std::pair{1, 0}, std::pair{2, 1}, std::pair{1, 2}}) {
        auto xi = random_tensor({2, 3, 7, 6}, 12 + stride);
        auto wi = random_tensor({4, 3, 3, 2}, 13 + pad);
        auto yi = conv2d(xi, wi, Tensor(), stride, pad);
        auto ref = naive_conv(xi, wi, stride, pad);
        REQUIRE(yi.numel() == ref.size());
        double worst = 0.0;
        for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(yi.vec()[i] - ref[i]));
        CHECK(worst < 1e-5);

        kernels::ConvGeometry g{2, 3, 7, 6, 4, 3, 2, stride, pad};
        std::vector<float> r2(yi.numel());
        kernels::conv2d_forward_reference(g, xi.data(), wi.data(), r2);
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(r2[i] - ref[i]) < 1e-5);
    }
}

TEST_CASE("conv2d: kernel larger than padded input is a shape error") {
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), Tensor(), 1, 0), ShapeError);
    CHECK_NOTHROW(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), Tensor(), 1, 1));
}

TEST_CASE("conv2d: gradients") {
    auto x = random_tensor({2, 2, 5, 5}, 21);
    auto w = random_tensor({3, 2, 3, 3}, 22);
    auto b = random_tensor({3}, 23);
    CHECK(op_check([&](const Tensor& t) { return conv2d(t, w, b, 2, 1); }, x).max_rel_error < kOpTol);
    CHECK(op_check([&](const Tensor& t) { return conv2d(x, t, b, 2, 1); }, w).max_rel_error < kOpTol);
    CHECK(op_check([&](const Tensor& t) { return conv2d(x, w, t, 2, 1); }, b).max_rel_error < kOpTol);
}

TEST_CASE("conv_transpose2d: identity, shape, adjoint") {
    auto x = random_tensor({1, 2, 4, 4}, 31);
    auto y = conv_transpose2d(x, Tensor::from_data({2, 2, 1, 1}, {1, 0, 0, 1}), Tensor(), 1, 0);
    CHECK(y.vec() == x.vec());

    auto up = conv_transpose2d(Tensor::zeros({1, 1, 8, 8}), Tensor::zeros({1, 1, 4, 4}), Tensor(), 2, 1);
    CHECK(up.shape() == Shape{1, 1, 16, 16});

    // <conv(a), b> == <a, conv^T(b)>
    for (int trial = 0; trial < 5; ++trial) {
        auto w = random_tensor({3, 2, 4, 4}, 40 + trial);  // conv: 2 -> 3 channels
        auto a = random_tensor({1, 2, 16, 16}, 50 + trial);
        auto ca = conv2d(a, w, Tensor(), 2, 1);
        auto bt = random_tensor(ca.shape(), 60 + trial);
        auto ctb = conv_transpose2d(bt, w, Tensor(), 2, 1);
        REQUIRE(ctb.shape() == a.shape());
        double lhs = pcgen::testing::dot(ca.data(), bt.data());
        double rhs = pcgen::testing::dot(a.data(), ctb.data());
        CHECK(std::abs(lhs - rhs) <= 1e-4 * std::max(1.0, std::abs(lhs)));
    }
}

TEST_CASE("conv_transpose2d: gradients") {
    auto x = random_tensor({1, 3, 3, 3}, 71);
    auto w = random_tensor({3, 2, 4, 4}, 72);
    auto b = random_tensor({2}, 73);
    CHECK(op_check([&](const Tensor& t) { return conv_transpose2d(t, w, b, 2, 1); }, x).max_rel_error < kOpTol);
    CHECK(op_check([&](const Tensor& t) { return conv_transpose2d(x, t, b, 2, 1); }, w).max_rel_error < kOpTol);
    CHECK(op_check([&](const Tensor& t) { return conv_transpose2d(x, w, t, 2, 1); }, b).max_rel_error < kOpTol);
}

TEST_CASE("pixel_shuffle: identity, shape chain, round trip, bijection") {
    auto x = random_tensor({1, 4, 3, 3}, 81);
    CHECK(pixel_shuffle(x, 1).vec() == x.vec());

    CHECK(pixel_shuffle(Tensor::zeros({512, 8, 8}), 16).shape() == Shape{2, 128, 128});

    std::vector<float> distinct(2 * 9 * 4 * 5);
    std::iota(distinct.begin(), distinct.end(), 0.0f);
    auto d = Tensor::from_data({2, 9, 4, 5}, distinct);
    auto s = pixel_shuffle(d, 3);
    CHECK(s.shape() == Shape{2, 1, 12, 15});
    auto sorted = s.vec();
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == distinct);
    CHECK(pixel_unshuffle(s, 3).vec() == distinct);

    // channel c*r^2 + i*r + j lands at (h*r + i, w*r + j)
    auto t = Tensor::from_data({4, 1, 1}, {10, 11, 12, 13});
    CHECK(pixel_shuffle(t, 2).vec() == std::vector<float>{10, 11, 12, 13});

    CHECK_THROWS_AS(pixel_shuffle(Tensor::zeros({1, 6, 2, 2}), 2), ShapeError);
}

TEST_CASE("pixel_shuffle: gradient") {
    auto x = random_tensor({1, 8, 2, 3}, 91);
    CHECK(op_check([](const Tensor& t) { return pixel_shuffle(t, 2); }, x).max_rel_error < kOpTol);
}

TEST_CASE("softmax: symmetry, normalization, shift invariance") {
    auto s = softmax(Tensor::zeros({3}), 0);
    for (float v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-7));

    auto x = random_tensor({4, 5, 3}, 101, -5.0f, 5.0f);
    for (int axis : {0, 1, 2}) {
        auto y = softmax(x, axis);
        auto shifted = softmax(add_scalar(x, 3.25f), axis);
        for (std::size_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y.vec()[i] - shifted.vec()[i]) < 1e-6);
    }
    auto y = softmax(x, 1);
    for (int a = 0; a < 4; ++a)
        for (int c = 0; c < 3; ++c) {
            double tot = 0.0;
            for (int b = 0; b < 5; ++b) tot += y.at({a, b, c});
            CHECK(std::abs(tot - 1.0) < 1e-6);
        }
    CHECK(op_check([](const Tensor& t) { return softmax(t, 1); }, x).max_rel_error < kOpTol);
}

TEST_CASE("elementwise: relu values and gradients of smooth ops") {
    auto r = relu(Tensor::from_data({2}, {-2.0f, 3.0f}));
    CHECK(r.vec() == std::vector<float>{0.0f, 3.0f});

    auto x = random_away_from_zero({6, 7}, 111, 5e-2f);
    CHECK(op_check([](const Tensor& t) { return relu(t); }, x).max_rel_error < kOpTol);
    CHECK(op_check([](const Tensor& t) { return abs(t); }, x).max_rel_error < kOpTol);
    CHECK(op_check([](const Tensor& t) { return gelu(t); }, x).max_rel_error < kOpTol);
    CHECK(op_check([](const Tensor& t) { return softplus(t); }, x).max_rel_error < kOpTol);
    CHECK(op_check([](const Tensor& t) { return sum(sigmoid(t)); }, x).max_rel_error < kOpTol);
}

TEST_CASE("relu subgradient at exactly zero is zero") {
    auto x = Tensor::from_data({3}, {0.0f, 1.0f, -1.0f}, true);
    reset_tape();
    backward(sum(relu(x)));
    CHECK(x.grad()[0] == 0.0f);
    CHECK(x.grad()[1] == 1.0f);
    CHECK(x.grad()[2] == 0.0f);
}

TEST_CASE("layer_norm: normalized slices and gradient") {
    auto x = random_tensor({4, 8}, 121, -3.0f, 3.0f);
    auto y = layer_norm(x, Tensor(), Tensor(), -1);
    for (int r = 0; r < 4; ++r) {
        double mu = 0.0, var = 0.0;
        for (int c = 0; c < 8; ++c) mu += y.at({r, c});
        mu /= 8;
        for (int c = 0; c < 8; ++c) var += (y.at({r, c}) - mu) * (y.at({r, c}) - mu);
        var /= 8;
        CHECK(std::abs(mu) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-4);
    }
    auto gamma = random_tensor({8}, 122);
    auto beta = random_tensor({8}, 123);
    CHECK(op_check([&](const Tensor& t) { return layer_norm(t, gamma, beta, -1); }, x).max_rel_error < kOpTol);
    CHECK(op_check([&](const Tensor& t) { return layer_norm(x, t, beta, -1); }, gamma).max_rel_error < kOpTol);
    CHECK(op_check([&](const Tensor& t) { return layer_norm(x, gamma, t, -1); }, beta).max_rel_error < kOpTol);

    auto x3 = random_tensor({3, 4, 2}, 124);
    auto g4 = random_tensor({4}, 125);
    CHECK(op_check([&](const Tensor& t) { return layer_norm(t, g4, Tensor(), 1); }, x3).max_rel_error < kOpTol);

    // zero-variance slice stays finite through the epsilon
    auto flat = layer_norm(Tensor::full({1, 4}, 2.0f), Tensor(), Tensor(), -1);
    for (float v : flat.data()) CHECK(v == 0.0f);
}

TEST_CASE("batch_norm: training gradient, running stats, eval mode") {
    auto x = random_tensor({2, 3, 2, 2}, 131, -2.0f, 2.0f);
    auto gamma = random_tensor({3}, 132);
    auto beta = random_tensor({3}, 133);
    BatchNormState st;
    auto f = [&](const Tensor& t) {
        BatchNormState tmp;
        return batch_norm(t, gamma, beta, tmp, true);
    };
    CHECK(op_check(f, x).max_rel_error < kOpTol);

    batch_norm(x, gamma, beta, st, true);
    REQUIRE(st.running_mean.size() == 3);
    double mu0 = 0.0;
    for (int b = 0; b < 2; ++b)
        for (int i = 0; i < 4; ++i) mu0 += x.vec()[static_cast<std::size_t>(b * 12 + i)];
    mu0 /= 8;
    CHECK(st.running_mean[0] == doctest::Approx(0.1 * mu0).epsilon(1e-5));

    auto e = [&](const Tensor& t) { return batch_norm(t, gamma, beta, st, false); };
    CHECK(op_check(e, x).max_rel_error < kOpTol);
}

TEST_CASE("attention: single position, causal probe, gradient") {
    auto q = random_tensor({1, 4}, 141);
    auto k = random_tensor({1, 4}, 142);
    auto v = random_tensor({1, 4}, 143);
    auto o = scaled_dot_product_attention(q, k, v, 1, false);
    CHECK(o.vec() == v.vec());

    auto qs = random_tensor({5, 8}, 144);
    auto ks = random_tensor({5, 8}, 145);
    auto vs = random_tensor({5, 8}, 146);
    auto base = scaled_dot_product_attention(qs, ks, vs, 2, true);
    for (int t = 0; t < 4; ++t) {
        auto k2 = ks.detach();
        auto v2 = vs.detach();
        auto q2 = qs.detach();
        for (int c = 0; c < 8; ++c) {
            k2.mutable_data()[(t + 1) * 8 + c] += 0.5f;
            v2.mutable_data()[(t + 1) * 8 + c] -= 0.7f;
            q2.mutable_data()[(t + 1) * 8 + c] *= 1.3f;
        }
        auto pert = scaled_dot_product_attention(q2, k2, v2, 2, true);
        CHECK(pcgen::testing::bitwise_equal(base.data().subspan(0, (t + 1) * 8), pert.data().subspan(0, (t + 1) * 8)));
        CHECK_FALSE(pcgen::testing::bitwise_equal(base.data(), pert.data()));
    }

    auto q2 = random_tensor({2, 8}, 147);
    auto k2 = random_tensor({2, 8}, 148);
    auto v2 = random_tensor({2, 8}, 149);
    for (bool causal : {false, true}) {
        CHECK(op_check([&](const Tensor& t) { return scaled_dot_product_attention(t, k2, v2, 2, causal); }, q2).max_rel_error < kOpTol);
        CHECK(op_check([&](const Tensor& t) { return scaled_dot_product_attention(q2, t, v2, 2, causal); }, k2).max_rel_error < kOpTol);
        CHECK(op_check([&](const Tensor& t) { return scaled_dot_product_attention(q2, k2, t, 2, causal); }, v2).max_rel_error < kOpTol);
    }
    CHECK_THROWS_AS(scaled_dot_product_attention(q2, k2, v2, 3, false), ShapeError);
}

TEST_CASE("shape ops: gradients of permute, concat, slice, index_select, add_rows") {
    auto x = random_tensor({2, 3, 4}, 151);
    CHECK(op_check([](const Tensor& t) { return permute(t, {2, 0, 1}); }, x).max_rel_error < kOpTol);
    auto other = random_tensor({2, 1, 4}, 152);
    CHECK(op_check([&](const Tensor& t) { return concat({t, other, t}, 1); }, x).max_rel_error < kOpTol);
    CHECK(op_check([](const Tensor& t) { return slice(t, 2, 1, 2); }, x).max_rel_error < kOpTol);
    CHECK(op_check([](const Tensor& t) { return index_select_flat(t, {3, 3, 0, 23}); }, x).max_rel_error < kOpTol);
    auto rows = random_tensor({3, 4}, 153);
    CHECK(op_check([&](const Tensor& t) { return add_rows(x, t); }, rows).max_rel_error < kOpTol);
    auto b = random_tensor({4}, 154);
    CHECK(op_check([&](const Tensor& t) { return add_bias(x, t); }, b).max_rel_error < kOpTol);
}

TEST_CASE("losses: bce_with_logits and masked_l1 gradients") {
    auto l = random_tensor({3, 4}, 161, -3.0f, 3.0f);
    std::vector<float> tgt{1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 0, 0};
    CHECK(op_check([&](const Tensor& t) { return bce_with_logits(t, tgt); }, l).max_rel_error < kOpTol);
    auto p = random_away_from_zero({12}, 162, 0.05f);
    std::vector<float> zeros(12, 0.0f), mask{1, 1, 0, 1, 0, 1, 1, 1, 0, 1, 1, 0};
    CHECK(op_check([&](const Tensor& t) { return masked_l1(t, zeros, mask); }, p).max_rel_error < kOpTol);
}

TEST_CASE("backward: analytic cases and tape contract") {
    auto x = Tensor::from_data({2}, {1.0f, 2.0f}, true);
    reset_tape();
    backward(sum(x));
    CHECK(std::vector<float>(x.grad().begin(), x.grad().end()) == std::vector<float>{1, 1});

    x.zero_grad();
    reset_tape();
    auto loss = sum(mul(x, x));
    backward(loss);
    CHECK(std::vector<float>(x.grad().begin(), x.grad().end()) == std::vector<float>{2, 4});
    CHECK_THROWS_AS(backward(loss), TapeError);

    reset_tape();
    CHECK_THROWS_AS(backward(loss), TapeError);  // stale

    reset_tape();
    CHECK_THROWS_AS(backward(mul(x, x)), TapeError);  // non-scalar
}

TEST_CASE("backward visits ops in reverse execution order") {
    reset_tape();
    auto x = Tensor::from_data({2}, {0.5f, -0.25f}, true);
    auto y = sigmoid(scale(x, 2.0f));
    auto z = sum(mul(y, y));
    auto& tape = Tape::current();
    std::vector<std::string> ops;
    for (const auto& e : tape.entries()) ops.push_back(e.op);
    CHECK(ops == std::vector<std::string>{"scale", "sigmoid", "mul", "sum"});
    backward(z);
    CHECK(x.has_grad());
}

TEST_CASE("gradcheck: linear function is exact to rounding; corrupted gradients are caught") {
    auto x = random_tensor({5}, 171);
    auto w = random_tensor({5}, 172);
    auto r = op_check([&](const Tensor& t) { return sum(mul(t, w)); }, x);
    CHECK(r.max_rel_error < 1e-5);

    Tape::current().set_corruption("sigmoid", 1.5f);
    auto bad = op_check([](const Tensor& t) { return sum(sigmoid(t)); }, x);
    Tape::current().clear_corruption();
    CHECK(bad.max_rel_error > 0.1);
}

TEST_CASE("non-finite results raise instead of propagating") {
    auto x = Tensor::full({2}, 3e38f);
    CHECK_THROWS_AS(scale(x, 10.0f), NumericError);
}

TEST_CASE("forward ops are deterministic") {
    auto x = random_tensor({1, 3, 9, 9}, 181);
    auto w = random_tensor({5, 3, 3, 3}, 182);
    auto a = gelu(conv2d(x, w, Tensor(), 1, 1));
    auto b = gelu(conv2d(x, w, Tensor(), 1, 1));
    CHECK(pcgen::testing::bitwise_equal(a.data(), b.data()));
}

TEST_CASE("TNSR round trip and header validation") {
    auto x = random_tensor({2, 3, 4}, 191);
    auto bytes = tnsr::encode(x);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "TNSR");
    CHECK(bytes.size() == 4 + 4 + 4 + 4 + 3 * 8 + 24 * 4);
    auto y = tnsr::decode(bytes);
    CHECK(y.shape() == x.shape());
    CHECK(pcgen::testing::bitwise_equal(x.data(), y.data()));

    auto tmp = std::filesystem::temp_directory_path() / "pcgen_tnsr_test.tnsr";
    tnsr::save(tmp, x);
    CHECK(pcgen::testing::bitwise_equal(tnsr::load(tmp).data(), x.data()));
    std::filesystem::remove(tmp);

    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(tnsr::decode(bad), tnsr::FormatError);
    auto truncated = bytes;
    truncated.pop_back();
    CHECK_THROWS_AS(tnsr::decode(truncated), tnsr::FormatError);
}
