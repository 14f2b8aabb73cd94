#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "obsd/common.hpp"
#include "obsd/nn/modules.hpp"
#include "obsd/nn/ops.hpp"
#include "test_util.hpp"

using namespace obsd;
using namespace obsd::nn;
using obsd::testutil::max_rel_grad_err;

static Tensor randn_param(Rng& rng, std::vector<int> shape, double scale = 1.0) {
    Tensor t = Tensor::param(std::move(shape));
    for (auto& v : t.values()) v = rng.normal() * scale;
    return t;
}

TEST_CASE("matmul against naive oracle") {
    Rng rng(1);
    Tensor a = randn_param(rng, {3, 4});
    Tensor b = randn_param(rng, {4, 5});
    Tensor c = matmul(a, b);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 5; ++j) {
            double want = 0.0;
            for (int k = 0; k < 4; ++k)
                want += a.data()[i * 4 + k] * b.data()[k * 5 + j];
            CHECK(c.data()[i * 5 + j] == doctest::Approx(want).epsilon(1e-12));
        }
}

TEST_CASE("conv2d against naive direct convolution") {
    Rng rng(2);
    Tensor x = randn_param(rng, {2, 3, 5, 6});
    Tensor w = randn_param(rng, {4, 3, 3, 3});
    Tensor b = randn_param(rng, {4});
    Tensor y = conv2d(x, w, b, 1, 1);
    CHECK(y.shape() == std::vector<int>{2, 4, 5, 6});
    for (int n = 0; n < 2; ++n)
        for (int co = 0; co < 4; ++co)
            for (int oy = 0; oy < 5; ++oy)
                for (int ox = 0; ox < 6; ++ox) {
                    double want = b.data()[co];
                    for (int ci = 0; ci < 3; ++ci)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                int iy = oy + ky - 1, ix = ox + kx - 1;
                                if (iy < 0 || iy >= 5 || ix < 0 || ix >= 6) continue;
                                want += x.data()[((n * 3 + ci) * 5 + iy) * 6 + ix] *
                                        w.data()[((co * 3 + ci) * 3 + ky) * 3 + kx];
                            }
                    CHECK(y.data()[((n * 4 + co) * 5 + oy) * 6 + ox] ==
                          doctest::Approx(want).epsilon(1e-10));
                }
}

TEST_CASE("strided conv2d shape and gradient") {
    Rng rng(3);
    Tensor x = randn_param(rng, {1, 2, 6, 6});
    Tensor w = randn_param(rng, {3, 2, 3, 3});
    Tensor b = randn_param(rng, {3});
    Tensor y = conv2d(x, w, b, 2, 1);
    CHECK(y.shape() == std::vector<int>{1, 3, 3, 3});
    auto f = [&]() { return mse(conv2d(x, w, b, 2, 1), Tensor::zeros({1, 3, 3, 3})); };
    CHECK(max_rel_grad_err(f, {x, w, b}) < 1e-6);
}

TEST_CASE("elementwise and reduction gradients") {
    Rng rng(4);
    Tensor a = randn_param(rng, {7});
    Tensor b = randn_param(rng, {7});
    auto f1 = [&]() { return mean_all(mul(silu(a), add(b, mul_scalar(a, 0.5)))); };
    CHECK(max_rel_grad_err(f1, {a, b}) < 1e-6);
    auto f2 = [&]() { return mse(relu(a), b); };
    CHECK(max_rel_grad_err(f2, {a, b}) < 1e-6);
    auto f3 = [&]() { return mean_all(sub(a, mul(b, b))); };
    CHECK(max_rel_grad_err(f3, {a, b}) < 1e-6);
}

TEST_CASE("linear gradient") {
    Rng rng(5);
    Tensor x = randn_param(rng, {3, 4});
    Tensor w = randn_param(rng, {2, 4});
    Tensor b = randn_param(rng, {2});
    Tensor tgt = randn_param(rng, {3, 2});
    auto f = [&]() { return mse(linear(x, w, b), tgt); };
    CHECK(max_rel_grad_err(f, {x, w, b}) < 1e-6);
}

TEST_CASE("softmax rows sum to one and gradient checks") {
    Rng rng(6);
    Tensor x = randn_param(rng, {5, 9});
    Tensor y = softmax_rows(x);
    for (int r = 0; r < 5; ++r) {
        double s = 0.0;
        for (int j = 0; j < 9; ++j) s += y.data()[r * 9 + j];
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
    Tensor m = randn_param(rng, {5, 9});
    auto f = [&]() { return mean_all(mul(softmax_rows(x), m)); };
    CHECK(max_rel_grad_err(f, {x}) < 1e-6);
}

TEST_CASE("group_norm matches direct normalization + gradient") {
    Rng rng(7);
    Tensor x = randn_param(rng, {2, 4, 3, 3});
    ParamStore ps(77);
    GroupNorm gn(ps, "gn", 4, 2);
    Tensor y = gn(x);
    // per (n, group) mean 0 var 1 before affine (gamma=1, beta=0 initially)
    for (int n = 0; n < 2; ++n)
        for (int g = 0; g < 2; ++g) {
            double mean = 0.0, var = 0.0;
            for (int c = g * 2; c < g * 2 + 2; ++c)
                for (int j = 0; j < 9; ++j) mean += y.data()[((n * 4 + c) * 9) + j];
            mean /= 18.0;
            for (int c = g * 2; c < g * 2 + 2; ++c)
                for (int j = 0; j < 9; ++j) {
                    double d = y.data()[((n * 4 + c) * 9) + j] - mean;
                    var += d * d;
                }
            var /= 18.0;
            CHECK(std::abs(mean) < 1e-10);
            CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
        }
    Tensor tgt = randn_param(rng, {2, 4, 3, 3});
    auto f = [&]() { return mse(gn(x), tgt); };
    CHECK(max_rel_grad_err(f, {x, gn.gamma, gn.beta}) < 1e-5);
}

TEST_CASE("broadcast ops gradients") {
    Rng rng(8);
    Tensor x = randn_param(rng, {2, 3, 2, 2});
    Tensor cb = randn_param(rng, {3});
    Tensor sc = randn_param(rng, {2, 3}, 0.3);
    Tensor sh = randn_param(rng, {2, 3}, 0.3);
    Tensor tgt = randn_param(rng, {2, 3, 2, 2});
    auto f1 = [&]() { return mse(add_channel_bias(x, cb), tgt); };
    CHECK(max_rel_grad_err(f1, {x, cb}) < 1e-6);
    auto f2 = [&]() { return mse(add_sample_channel(x, sc), tgt); };
    CHECK(max_rel_grad_err(f2, {x, sc}) < 1e-6);
    auto f3 = [&]() { return mse(film(x, sc, sh), tgt); };
    CHECK(max_rel_grad_err(f3, {x, sc, sh}) < 1e-6);
}

TEST_CASE("spatial ops gradients") {
    Rng rng(9);
    Tensor x = randn_param(rng, {2, 3, 4, 4});
    Tensor t1 = randn_param(rng, {2, 3, 8, 8});
    auto f1 = [&]() { return mse(upsample2x(x), t1); };
    CHECK(max_rel_grad_err(f1, {x}) < 1e-6);
    Tensor t2 = randn_param(rng, {2, 3, 2, 2});
    auto f2 = [&]() { return mse(avgpool2(x), t2); };
    CHECK(max_rel_grad_err(f2, {x}) < 1e-6);
    Tensor t3 = randn_param(rng, {2, 3});
    auto f3 = [&]() { return mse(global_avgpool(x), t3); };
    CHECK(max_rel_grad_err(f3, {x}) < 1e-6);
    Tensor b = randn_param(rng, {2, 2, 4, 4});
    Tensor t4 = randn_param(rng, {2, 5, 4, 4});
    auto f4 = [&]() { return mse(concat_channels(x, b), t4); };
    CHECK(max_rel_grad_err(f4, {x, b}) < 1e-6);
}

TEST_CASE("batch select/stack round trip and gradients") {
    Rng rng(10);
    Tensor x = randn_param(rng, {3, 2, 2, 2});
    std::vector<Tensor> parts;
    for (int i = 0; i < 3; ++i) parts.push_back(select_batch(x, i));
    Tensor y = stack_batch(parts);
    CHECK(y.values() == x.values());
    Tensor tgt = randn_param(rng, {3, 2, 2, 2});
    auto f = [&]() {
        std::vector<Tensor> ps;
        for (int i = 0; i < 3; ++i) ps.push_back(select_batch(x, i));
        return mse(stack_batch(ps), tgt);
    };
    CHECK(max_rel_grad_err(f, {x}) < 1e-6);
}

TEST_CASE("cross_entropy gradient and value") {
    Rng rng(11);
    Tensor logits = randn_param(rng, {4, 6});
    std::vector<int> labels{0, 5, 2, 2};
    Tensor l = cross_entropy(logits, labels);
    CHECK(l.item() > 0.0);
    auto f = [&]() { return cross_entropy(logits, labels); };
    CHECK(max_rel_grad_err(f, {logits}) < 1e-6);
}

TEST_CASE("deformable conv with zero offsets equals standard conv exactly") {
    Rng rng(12);
    Tensor x = randn_param(rng, {2, 3, 6, 7});
    Tensor w = randn_param(rng, {4, 3, 3, 3});
    Tensor b = randn_param(rng, {4});
    Tensor zero_off = Tensor::zeros({2, 18, 6, 7});
    Tensor via_dcn = deformable_conv2d(x, zero_off, w, b);
    Tensor via_conv = conv2d(x, w, b, 1, 1);
    for (size_t i = 0; i < via_dcn.values().size(); ++i)
        CHECK(via_dcn.values()[i] == via_conv.values()[i]);
}

TEST_CASE("deformable conv integer offset equals shifted-input conv exactly") {
    Rng rng(13);
    int H = 5, W = 6;
    Tensor x = randn_param(rng, {1, 2, H, W});
    Tensor w = randn_param(rng, {3, 2, 3, 3});
    Tensor b = Tensor::zeros({3});
    // all taps shifted by (0, +1): same as convolving the input shifted left
    // by one column with zero fill
    Tensor off = Tensor::zeros({1, 18, H, W});
    for (int k = 0; k < 9; ++k)
        for (int j = 0; j < H * W; ++j) off.data()[(2 * k + 1) * H * W + j] = 1.0;
    Tensor shifted = Tensor::zeros({1, 2, H, W});
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < H; ++y)
            for (int xq = 0; xq + 1 < W; ++xq)
                shifted.data()[(c * H + y) * W + xq] = x.data()[(c * H + y) * W + xq + 1];
    Tensor a = deformable_conv2d(x, off, w, b);
    Tensor c = conv2d(shifted, w, b, 1, 1);
    // At output column 0 the gx = -1 tap re-enters the support under offset
    // sampling (position -1+1 = 0), which the shifted-then-zero-filled input
    // cannot represent; the identity is exact on every other column.
    for (int co = 0; co < 3; ++co)
        for (int y = 0; y < H; ++y)
            for (int xq = 1; xq < W; ++xq) {
                size_t i = ((size_t)co * H + y) * W + xq;
                CHECK(a.values()[i] == c.values()[i]);
            }
    // with only the center tap the identity holds on the full image
    Tensor wc = Tensor::zeros({1, 2, 3, 3});
    wc.data()[4] = 0.7;
    wc.data()[9 + 4] = -0.3;
    Tensor off1 = Tensor::zeros({1, 18, H, W});
    for (int j = 0; j < H * W; ++j) off1.data()[(2 * 4 + 1) * H * W + j] = 1.0;
    Tensor a1 = deformable_conv2d(x, off1, wc, Tensor());
    Tensor c1 = conv2d(shifted, wc, Tensor(), 1, 1);
    for (size_t i = 0; i < a1.values().size(); ++i)
        CHECK(a1.values()[i] == c1.values()[i]);
}

TEST_CASE("deformable conv half-pixel shift on a linear ramp") {
    // v(x) = x, single-tap center kernel weight 1, offset (0, 0.5):
    // interior output = x + 0.5 because bilinear interpolation is exact on ramps
    int H = 4, W = 8;
    Tensor x = Tensor::zeros({1, 1, H, W});
    for (int y = 0; y < H; ++y)
        for (int xq = 0; xq < W; ++xq) x.data()[y * W + xq] = (double)xq;
    Tensor w = Tensor::zeros({1, 1, 3, 3});
    w.data()[4] = 1.0;  // center tap only
    Tensor off = Tensor::zeros({1, 18, H, W});
    for (int j = 0; j < H * W; ++j) off.data()[(2 * 4 + 1) * H * W + j] = 0.5;
    Tensor y = deformable_conv2d(x, off, w, Tensor());
    for (int yy = 0; yy < H; ++yy)
        for (int xq = 0; xq + 1 < W; ++xq)
            CHECK(y.data()[yy * W + xq] == doctest::Approx(xq + 0.5).epsilon(1e-12));
}

TEST_CASE("deformable conv gradient check (input, offsets, weights)") {
    Rng rng(14);
    Tensor x = randn_param(rng, {1, 2, 4, 4});
    Tensor w = randn_param(rng, {2, 2, 3, 3});
    Tensor b = randn_param(rng, {2});
    // non-integer offsets keep bilinear interpolation differentiable
    Tensor off = Tensor::param({1, 18, 4, 4});
    for (auto& v : off.values()) v = rng.uniform(-0.9, 0.9) + 0.001;
    Tensor tgt = randn_param(rng, {1, 2, 4, 4});
    auto f = [&]() { return mse(deformable_conv2d(x, off, w, b), tgt); };
    CHECK(max_rel_grad_err(f, {x, off, w, b}, 1e-6) < 1e-5);
}

TEST_CASE("offset_mean_norm closed forms") {
    // one offset pair (3,4) -> norm 5
    Tensor o1 = Tensor::zeros({1, 2, 1, 1});
    o1.data()[0] = 3.0;
    o1.data()[1] = 4.0;
    CHECK(offset_mean_norm(o1).item() == doctest::Approx(5.0).epsilon(1e-12));
    // pairs {(3,4),(0,0)} -> mean 2.5
    Tensor o2 = Tensor::zeros({1, 4, 1, 1});
    o2.data()[0] = 3.0;
    o2.data()[1] = 4.0;
    CHECK(offset_mean_norm(o2).item() == doctest::Approx(2.5).epsilon(1e-12));
    // zero -> 0
    CHECK(offset_mean_norm(Tensor::zeros({2, 6, 3, 3})).item() == 0.0);
}

TEST_CASE("offset_mean_norm is positively 1-homogeneous and non-negative") {
    Rng rng(15);
    Tensor o = randn_param(rng, {2, 6, 3, 3});
    double base = offset_mean_norm(o).item();
    CHECK(base >= 0.0);
    for (double a : {0.0, 0.5, 2.0, 7.25}) {
        Tensor oa = Tensor::param({2, 6, 3, 3});
        for (size_t i = 0; i < o.values().size(); ++i) oa.values()[i] = a * o.values()[i];
        CHECK(offset_mean_norm(oa).item() == doctest::Approx(a * base).epsilon(1e-9));
    }
    auto f = [&]() { return offset_mean_norm(o); };
    CHECK(max_rel_grad_err(f, {o}) < 1e-6);
}

TEST_CASE("adam with lr 0 leaves parameters bit-identical") {
    Rng rng(16);
    ParamStore ps(123);
    Linear lin(ps, "l", 4, 3);
    std::vector<double> before = lin.w.values();
    AdamConfig cfg;
    cfg.lr = 0.0;
    Adam opt(ps.all(), cfg);
    for (int i = 0; i < 5; ++i) {
        Tensor x = randn_param(rng, {2, 4});
        Tensor loss = mse(lin(x), Tensor::zeros({2, 3}));
        opt.zero_grad();
        backward(loss);
        opt.step();
    }
    CHECK(lin.w.values() == before);
}

TEST_CASE("adam reduces a simple regression loss") {
    Rng rng(17);
    ParamStore ps(55);
    Linear lin(ps, "l", 3, 1);
    AdamConfig cfg;
    cfg.lr = 0.05;
    cfg.weight_decay = 0.0;
    Adam opt(ps.all(), cfg);
    Tensor x = randn_param(rng, {16, 3});
    Tensor tgt = Tensor::zeros({16, 1});
    for (int r = 0; r < 16; ++r)
        tgt.data()[r] = 2.0 * x.data()[r * 3] - x.data()[r * 3 + 1] + 0.5;
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 300; ++i) {
        Tensor loss = mse(lin(x), tgt);
        if (i == 0) first = loss.item();
        last = loss.item();
        opt.zero_grad();
        backward(loss);
        opt.step();
    }
    CHECK(last < 0.01 * first);
}

TEST_CASE("timestep embedding deterministic, in range, distinct") {
    Tensor a = timestep_embedding({1, 500, 1000}, 32);
    Tensor b = timestep_embedding({1, 500, 1000}, 32);
    CHECK(a.values() == b.values());
    for (double v : a.values()) CHECK(std::abs(v) <= 1.0);
    double diff = 0.0;
    for (int j = 0; j < 32; ++j) diff += std::abs(a.data()[j] - a.data()[32 + j]);
    CHECK(diff > 0.1);
}

TEST_CASE("no-grad mode builds no graph") {
    Rng rng(18);
    Tensor x = randn_param(rng, {4});
    NoGradGuard guard;
    Tensor y = silu(x);
    CHECK(y.node()->parents.empty());
    CHECK_FALSE(y.requires_grad());
}
