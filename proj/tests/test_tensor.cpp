#include <gtest/gtest.h>

#include <cmath>

#include "medvae/optim.hpp"
#include "medvae/tensor.hpp"
#include "support/fd.hpp"

using namespace medvae;
using medvae::testsupport::check_gradients;
using medvae::testsupport::rel_err;

namespace {

// Independent nested-loop convolution oracle (2D, zero padding).
std::vector<double> oracle_conv2d(const std::vector<double>& x, int64_t N, int64_t Cin, int64_t H,
                                  int64_t W, const std::vector<double>& w, int64_t Cout, int64_t KH,
                                  int64_t KW, int64_t stride, int64_t pad) {
    const int64_t OH = (H + 2 * pad - KH) / stride + 1;
    const int64_t OW = (W + 2 * pad - KW) / stride + 1;
    std::vector<double> out(static_cast<size_t>(N * Cout * OH * OW), 0.0);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Cout; ++co)
            for (int64_t oy = 0; oy < OH; ++oy)
                for (int64_t ox = 0; ox < OW; ++ox) {
                    double acc = 0.0;
                    for (int64_t ci = 0; ci < Cin; ++ci)
                        for (int64_t ky = 0; ky < KH; ++ky)
                            for (int64_t kx = 0; kx < KW; ++kx) {
                                const int64_t iy = oy * stride - pad + ky;
                                const int64_t ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += x[((n * Cin + ci) * H + iy) * W + ix] *
                                       w[((co * Cin + ci) * KH + ky) * KW + kx];
                            }
                    out[((n * Cout + co) * OH + oy) * OW + ox] = acc;
                }
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

TEST(Conv, HandExample2x2) {
    Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor k({1, 1, 2, 2}, {1, 0, 0, 1});
    Tensor y = conv(x, k, 1, 0, 2);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_DOUBLE_EQ(y.item(), 5.0);
}

TEST(Conv, IdentityKernel) {
    Rng rng(7);
    Tensor x = Tensor::randn({2, 1, 5, 6}, rng);
    Tensor k({1, 1, 1, 1}, {1.0});
    Tensor y = conv(x, k, 1, 0, 2);
    ASSERT_EQ(y.shape(), x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv, ZeroKernel) {
    Rng rng(8);
    Tensor x = Tensor::randn({1, 2, 4, 4}, rng);
    Tensor k = Tensor::zeros({3, 2, 3, 3});
    Tensor y = conv(x, k, 1, 1, 2);
    for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Conv, MatchesNestedLoopOracle) {
    Rng rng(11);
    for (int trial = 0; trial < 6; ++trial) {
        const int64_t stride = 1 + static_cast<int64_t>(rng.uniform_below(2));
        const int64_t pad = static_cast<int64_t>(rng.uniform_below(2));
        Tensor x = Tensor::randn({2, 3, 7, 6}, rng);
        Tensor k = Tensor::randn({4, 3, 3, 3}, rng);
        Tensor y = conv(x, k, stride, pad, 2);
        auto expect = oracle_conv2d({x.data().begin(), x.data().end()}, 2, 3, 7, 6,
                                    {k.data().begin(), k.data().end()}, 4, 3, 3, stride, pad);
        ASSERT_EQ(static_cast<size_t>(y.numel()), expect.size());
        for (size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(y.data()[i], expect[i], 1e-12);
    }
}

TEST(Conv, ShapeMismatchNamesAxis) {
    Tensor x = Tensor::zeros({1, 1, 2, 2});
    Tensor k = Tensor::zeros({1, 1, 5, 5});
    try {
        conv(x, k, 1, 0, 2);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("axis"), std::string::npos);
    }
}

TEST(ConvTranspose, AdjointOfConv) {
    // Exact-tiling parameter combos, where (in + 2*pad - k) % stride == 0 and
    // the transpose output extent formula inverts conv's.
    struct Combo {
        int64_t k, stride, pad;
    };
    const std::vector<Combo> combos = {{3, 1, 1}, {3, 1, 0}, {2, 2, 0}, {4, 2, 1}, {1, 1, 0}};
    Rng rng(13);
    for (const auto& c : combos) {
        Tensor x = Tensor::randn({1, 2, 4, 4}, rng);
        Tensor k = Tensor::randn({3, 2, c.k, c.k}, rng);
        Tensor cx = conv(x, k, c.stride, c.pad, 2);
        Tensor y = Tensor::randn(cx.shape(), rng);
        Tensor ty = conv_transpose(y, k, c.stride, c.pad, 2);
        ASSERT_EQ(ty.shape(), x.shape());
        EXPECT_NEAR(dot(cx.data(), y.data()), dot(x.data(), ty.data()), 1e-8);
    }
}

TEST(ConvTranspose, AdjointOfConv3d) {
    Rng rng(14);
    Tensor x = Tensor::randn({1, 2, 4, 4, 4}, rng);
    Tensor k = Tensor::randn({3, 2, 4, 4, 4}, rng);
    Tensor cx = conv(x, k, 2, 1, 3);
    Tensor y = Tensor::randn(cx.shape(), rng);
    Tensor ty = conv_transpose(y, k, 2, 1, 3);
    ASSERT_EQ(ty.shape(), x.shape());
    EXPECT_NEAR(dot(cx.data(), y.data()), dot(x.data(), ty.data()), 1e-8);
}

TEST(ConvTranspose, UnitKernelIdentity) {
    Rng rng(15);
    Tensor x = Tensor::randn({1, 1, 3, 3}, rng);
    Tensor k({1, 1, 1, 1}, {1.0});
    Tensor y = conv_transpose(x, k, 1, 0, 2);
    ASSERT_EQ(y.shape(), x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.data()[i], x.data()[i]);
}

TEST(ConvTranspose, Stride2OutputShape) {
    Tensor x = Tensor::zeros({1, 1, 2, 2});
    Tensor k = Tensor::zeros({1, 1, 2, 2});
    Tensor y = conv_transpose(x, k, 2, 0, 2);
    EXPECT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
}

TEST(Elementwise, Examples) {
    Tensor x({4}, {1, 2, 3, 4});
    EXPECT_DOUBLE_EQ(mse(x, x).item(), 0.0);
    EXPECT_DOUBLE_EQ(mean_all(x).item(), 2.5);
    Tensor neg1 = Tensor::scalar(-1.0);
    EXPECT_DOUBLE_EQ(leaky_relu(neg1, 0.2).item(), -0.2);
}

TEST(Elementwise, BroadcastMismatchThrows) {
    Tensor a = Tensor::zeros({3});
    Tensor b = Tensor::zeros({4});
    EXPECT_THROW(add(a, b), ShapeError);
}

TEST(GroupNorm, NormalizesPerGroup) {
    Rng rng(21);
    Tensor x = Tensor::randn({2, 4, 5, 5}, rng);
    Tensor gamma = Tensor::full({4}, 1.0);
    Tensor beta = Tensor::zeros({4});
    Tensor y = group_norm(x, gamma, beta, 2);
    // per (n, group): mean 0 +- 1e-5, variance 1 +- 1e-4
    const int64_t P = 25, cpg = 2;
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t g = 0; g < 2; ++g) {
            double m = 0.0, v = 0.0;
            for (int64_t cc = 0; cc < cpg; ++cc)
                for (int64_t p = 0; p < P; ++p) m += y.data()[((n * 4 + g * cpg + cc) * P) + p];
            m /= static_cast<double>(cpg * P);
            for (int64_t cc = 0; cc < cpg; ++cc)
                for (int64_t p = 0; p < P; ++p) {
                    const double d = y.data()[((n * 4 + g * cpg + cc) * P) + p] - m;
                    v += d * d;
                }
            v /= static_cast<double>(cpg * P);
            EXPECT_NEAR(m, 0.0, 1e-5);
            EXPECT_NEAR(v, 1.0, 1e-4);
        }
}

TEST(GroupNorm, ConstantInputGivesZero) {
    Tensor x = Tensor::full({1, 2, 3, 3}, 4.2);
    Tensor gamma = Tensor::full({2}, 1.0);
    Tensor beta = Tensor::zeros({2});
    Tensor y = group_norm(x, gamma, beta, 1);
    for (double v : y.data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(GroupNorm, DivisibilityError) {
    Tensor x = Tensor::zeros({1, 3, 2, 2});
    Tensor gamma = Tensor::full({3}, 1.0);
    Tensor beta = Tensor::zeros({3});
    EXPECT_THROW(group_norm(x, gamma, beta, 2), ShapeError);
}

TEST(GroupNorm, BackwardMatchesFiniteDifferences) {
    Rng rng(31);
    Tensor x = Tensor::randn({2, 4, 3, 3}, rng, 1.0, true);
    Tensor gamma = Tensor::randn({4}, rng, 0.3, true);
    Tensor beta = Tensor::randn({4}, rng, 0.3, true);
    {
        auto g = gamma.mutable_data();
        for (auto& v : g) v += 1.0;
    }
    Tensor target = Tensor::randn({2, 4, 3, 3}, rng);
    std::vector<Tensor> params{x, gamma, beta};
    auto loss = [&]() { return mse(group_norm(x, gamma, beta, 2), target); };
    auto rep = check_gradients(loss, params, rng, 10);
    EXPECT_EQ(rep.failed, 0) << rep.worst_where;
}

TEST(Backward, SumOfSquares) {
    Tensor x({2}, {1, 2}, true);
    Tensor loss = sum_all(mul(x, x));
    backward(loss);
    auto g = x.grad();
    EXPECT_DOUBLE_EQ(g[0], 2.0);
    EXPECT_DOUBLE_EQ(g[1], 4.0);
}

TEST(Backward, IndependentLeafHasZeroGrad) {
    Tensor x({2}, {1, 2}, true);
    Tensor y({2}, {3, 4}, true);
    Tensor loss = sum_all(mul(x, x));
    backward(loss);
    auto g = y.grad();
    EXPECT_DOUBLE_EQ(g[0], 0.0);
    EXPECT_DOUBLE_EQ(g[1], 0.0);
}

TEST(Backward, NonScalarLossRejected) {
    Tensor x({2}, {1, 2}, true);
    EXPECT_THROW(backward(x), ShapeError);
}

TEST(Backward, CompositeNetworkMatchesFiniteDifferences) {
    Rng rng(41);
    Tensor x = Tensor::randn({1, 2, 6, 6}, rng);
    Tensor k1 = Tensor::randn({4, 2, 3, 3}, rng, 0.4, true);
    Tensor b1 = Tensor::randn({4}, rng, 0.1, true);
    Tensor gamma = Tensor::full({4}, 1.0, true);
    Tensor beta = Tensor::zeros({4}, true);
    Tensor k2 = Tensor::randn({1, 4, 3, 3}, rng, 0.4, true);
    Tensor target = Tensor::randn({1, 1, 3, 3}, rng);
    std::vector<Tensor> params{k1, b1, gamma, beta, k2};
    auto loss = [&]() {
        Tensor h = conv(x, k1, 1, 1, 2, &b1);
        h = group_norm(h, gamma, beta, 2);
        h = silu(h);
        h = conv(h, k2, 2, 1, 2);
        return mse(h, target);
    };
    auto rep = check_gradients(loss, params, rng, 4);  // 5 params x 4 probes = 20
    EXPECT_GE(rep.checked, 20);
    EXPECT_EQ(rep.failed, 0) << rep.worst_where;
}

TEST(AdamW, SingleStepHandComputation) {
    Tensor theta = Tensor::scalar(1.0, true);
    Tensor loss = sum_all(mul_scalar(theta, 0.5));
    backward(loss);  // grad = 0.5
    AdamWOptions opts;
    opts.lr = 1e-4;
    opts.weight_decay = 0.0;
    AdamW opt(opts);
    std::vector<Tensor> params{theta};
    opt.step(params);
    // bias-corrected first step: mhat=0.5, vhat=0.25
    const double expected = 1.0 - 1e-4 * (0.5 / (std::sqrt(0.25) + 1e-8));
    EXPECT_NEAR(theta.item(), expected, 1e-15);
    EXPECT_NEAR(theta.item(), 1.0 - 1e-4, 1e-10);
}

TEST(AdamW, ZeroGradLeavesParamUnchanged) {
    Tensor theta = Tensor::scalar(3.0, true);
    AdamWOptions opts;
    opts.weight_decay = 0.0;
    AdamW opt(opts);
    std::vector<Tensor> params{theta};
    opt.step(params);  // no backward ran: grad is zero
    EXPECT_DOUBLE_EQ(theta.item(), 3.0);
}

TEST(AdamW, DecoupledDecayWithZeroGrad) {
    Tensor theta = Tensor::scalar(2.0, true);
    AdamWOptions opts;
    opts.lr = 0.01;
    opts.weight_decay = 0.1;
    AdamW opt(opts);
    std::vector<Tensor> params{theta};
    opt.step(params);
    EXPECT_DOUBLE_EQ(theta.item(), 2.0 * (1.0 - 0.01 * 0.1));
}

TEST(Rng, DeterministicAcrossRuns) {
    Rng a(1234), b(1234);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
    Rng c(1234), d(1234);
    for (int i = 0; i < 100; ++i) EXPECT_DOUBLE_EQ(c.normal(), d.normal());
}

TEST(Primitives, FiniteDifferenceSweep) {
    // Every differentiable primitive against central differences.
    Rng rng(51);
    struct Case {
        const char* name;
        std::function<Tensor(const Tensor&)> fn;
    };
    const std::vector<Case> cases = {
        {"neg", [](const Tensor& t) { return neg(t); }},
        {"abs", [](const Tensor& t) { return abs_op(t); }},
        {"exp", [](const Tensor& t) { return exp_op(t); }},
        {"log", [](const Tensor& t) { return log_op(add_scalar(mul(t, t), 0.5)); }},
        {"sqrt", [](const Tensor& t) { return sqrt_op(add_scalar(mul(t, t), 0.5)); }},
        {"relu", [](const Tensor& t) { return relu(add_scalar(t, 3.0)); }},
        {"leaky_relu", [](const Tensor& t) { return leaky_relu(add_scalar(t, 3.0), 0.2); }},
        {"silu", [](const Tensor& t) { return silu(t); }},
        {"sigmoid", [](const Tensor& t) { return sigmoid(t); }},
        {"clamp", [](const Tensor& t) { return clamp(t, -30.0, 20.0); }},
        {"channel_mean", [](const Tensor& t) { return channel_mean(t); }},
        {"spatial_mean", [](const Tensor& t) { return spatial_mean(t); }},
        {"unit_norm", [](const Tensor& t) { return channel_unit_normalize(t); }},
        {"reshape", [](const Tensor& t) { return reshape(t, {2, 2, 12}); }},
        {"narrow", [](const Tensor& t) { return narrow_channels(t, 1, 2); }},
        {"upsample", [](const Tensor& t) { return upsample_nearest(t, 2, 2); }},
        {"resize", [](const Tensor& t) { return resize_bilinear2d(t, 5, 7); }},
    };
    for (const auto& c : cases) {
        Tensor x = Tensor::randn({2, 4, 2, 3}, rng, 1.0, true);
        std::vector<Tensor> params{x};
        auto loss = [&]() {
            Tensor y = c.fn(x);
            return mean_all(mul(y, y));
        };
        auto rep = check_gradients(loss, params, rng, 20);
        EXPECT_EQ(rep.failed, 0) << c.name << ": " << rep.worst_where;
    }
}

TEST(Primitives, BinaryOpGradients) {
    Rng rng(52);
    Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
    Tensor b = Tensor::randn({3, 4}, rng, 1.0, true);
    {
        auto d = b.mutable_data();
        for (auto& v : d) v += (v >= 0 ? 2.0 : -2.0);  // keep divisor away from zero
    }
    std::vector<Tensor> params{a, b};
    for (auto kind : {0, 1, 2, 3}) {
        auto loss = [&]() {
            Tensor y;
            switch (kind) {
                case 0: y = add(a, b); break;
                case 1: y = sub(a, b); break;
                case 2: y = mul(a, b); break;
                default: y = div(a, b); break;
            }
            return mean_all(mul(y, y));
        };
        auto rep = check_gradients(loss, params, rng, 10);
        EXPECT_EQ(rep.failed, 0) << "binary kind " << kind << ": " << rep.worst_where;
    }
}

TEST(Primitives, MatmulLinearClassifierGradients) {
    Rng rng(53);
    Tensor x = Tensor::randn({4, 5}, rng);
    Tensor w = Tensor::randn({5, 3}, rng, 0.5, true);
    Tensor b = Tensor::randn({3}, rng, 0.2, true);
    std::vector<int> labels{0, 2, 1, 2};
    std::vector<Tensor> params{w, b};
    auto loss = [&]() { return softmax_cross_entropy(linear(x, w, &b), labels); };
    auto rep = check_gradients(loss, params, rng, 10);
    EXPECT_EQ(rep.failed, 0) << rep.worst_where;

    Tensor w2 = Tensor::randn({5, 1}, rng, 0.5, true);
    std::vector<double> targets{1, 0, 1, 0};
    std::vector<Tensor> params2{w2};
    auto loss2 = [&]() { return bce_logits(linear(x, w2), targets); };
    auto rep2 = check_gradients(loss2, params2, rng, 10);
    EXPECT_EQ(rep2.failed, 0) << rep2.worst_where;
}

TEST(Primitives, ConvFamilyGradients) {
    Rng rng(54);
    {
        Tensor x = Tensor::randn({1, 2, 5, 5}, rng, 1.0, true);
        Tensor k = Tensor::randn({3, 2, 3, 3}, rng, 0.4, true);
        Tensor b = Tensor::randn({3}, rng, 0.1, true);
        std::vector<Tensor> params{x, k, b};
        auto loss = [&]() {
            Tensor y = conv(x, k, 2, 1, 2, &b);
            return mean_all(mul(y, y));
        };
        auto rep = check_gradients(loss, params, rng, 8);
        EXPECT_EQ(rep.failed, 0) << "conv2d: " << rep.worst_where;
    }
    {
        Tensor x = Tensor::randn({1, 2, 4, 4, 4}, rng, 1.0, true);
        Tensor k = Tensor::randn({2, 2, 3, 3, 3}, rng, 0.4, true);
        Tensor b = Tensor::randn({2}, rng, 0.1, true);
        std::vector<Tensor> params{x, k, b};
        auto loss = [&]() {
            Tensor y = conv(x, k, 1, 1, 3, &b);
            return mean_all(mul(y, y));
        };
        auto rep = check_gradients(loss, params, rng, 8);
        EXPECT_EQ(rep.failed, 0) << "conv3d: " << rep.worst_where;
    }
    {
        Tensor x = Tensor::randn({1, 3, 3, 3}, rng, 1.0, true);
        Tensor k = Tensor::randn({3, 2, 3, 3}, rng, 0.4, true);
        Tensor b = Tensor::randn({2}, rng, 0.1, true);
        std::vector<Tensor> params{x, k, b};
        auto loss = [&]() {
            Tensor y = conv_transpose(x, k, 2, 1, 2, &b);
            return mean_all(mul(y, y));
        };
        auto rep = check_gradients(loss, params, rng, 8);
        EXPECT_EQ(rep.failed, 0) << "conv_transpose2d: " << rep.worst_where;
    }
    {
        Tensor x = Tensor::randn({1, 2, 3, 3, 3}, rng, 1.0, true);
        Tensor k = Tensor::randn({2, 1, 3, 3, 3}, rng, 0.4, true);
        std::vector<Tensor> params{x, k};
        auto loss = [&]() {
            Tensor y = conv_transpose(x, k, 2, 1, 3);
            return mean_all(mul(y, y));
        };
        auto rep = check_gradients(loss, params, rng, 8);
        EXPECT_EQ(rep.failed, 0) << "conv_transpose3d: " << rep.worst_where;
    }
}

TEST(Primitives, SliceLastGradient) {
    Rng rng(55);
    Tensor x = Tensor::randn({1, 2, 3, 3, 4}, rng, 1.0, true);
    std::vector<Tensor> params{x};
    auto loss = [&]() {
        Tensor s = slice_last(x, 2);
        return mean_all(mul(s, s));
    };
    auto rep = check_gradients(loss, params, rng, 20);
    EXPECT_EQ(rep.failed, 0) << rep.worst_where;
}

TEST(Tensor, NoNanInfOnGuardedOps) {
    Tensor big = Tensor::full({4}, 1e8);
    Tensor y = exp_op(big);
    for (double v : y.data()) EXPECT_TRUE(std::isfinite(v));
    Tensor zero = Tensor::zeros({4});
    Tensor l = log_op(zero);
    for (double v : l.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Tensor, DetachStopsGradient) {
    Tensor x = Tensor::scalar(2.0, true);
    Tensor y = mul(x.detach(), x.detach());
    EXPECT_FALSE(y.requires_grad());
}
