#include "smamba/autodiff.hpp"
#include "smamba/rng.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace smamba;
using smamba::testing::fd_check;
using smamba::testing::random_tensor;

namespace {

Var leaf(Tensor t) { return make_var(std::move(t), true); }

// Triple-loop contraction, the independent route matmul is checked against.
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
    const std::int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor c({m, n});
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::int64_t p = 0; p < k; ++p) s += a.at2(i, p) * b.at2(p, j);
            c.at2(i, j) = s;
        }
    return c;
}

} // namespace

TEST(Matmul, IdentityCase) {
    Var i2 = constant(Tensor({2, 2}, {1, 0, 0, 1}));
    Var m = constant(Tensor({2, 2}, {1, 2, 3, 4}));
    Tensor out = matmul(i2, m)->value;
    EXPECT_EQ(out.data, (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, HandComputed1x2x1) {
    Var a = constant(Tensor({1, 2}, {1, 2}));
    Var b = constant(Tensor({2, 1}, {3, 4}));
    Tensor out = matmul(a, b)->value;
    ASSERT_EQ(out.numel(), 1);
    EXPECT_DOUBLE_EQ(out.data[0], 11.0);
}

TEST(Matmul, AgainstTripleLoopOracle) {
    RngStream rng(11, 0);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    Tensor got = matmul(constant(a), constant(b))->value;
    Tensor want = matmul_oracle(a, b);
    EXPECT_LT(max_abs_diff(got, want), 1e-12);
}

TEST(Matmul, AssociativityAgainstOracle) {
    RngStream rng(12, 0);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng),
               c = random_tensor({3, 5}, rng);
        Tensor left = matmul(constant(matmul_oracle(a, b)), constant(c))->value;
        Tensor right = matmul(constant(a), constant(matmul_oracle(b, c)))->value;
        EXPECT_LT(max_abs_diff(left, right), 1e-10);
    }
}

TEST(Matmul, ShapeErrorsNameBothShapes) {
    Var a = constant(Tensor({2, 3}));
    Var b = constant(Tensor({4, 2}));
    try {
        matmul(a, b);
        FAIL() << "expected dimension error";
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[4,2]"), std::string::npos) << msg;
    }
}

TEST(Matmul, BatchedAgainstPerSlice) {
    RngStream rng(13, 0);
    Tensor a = random_tensor({2, 3, 4}, rng);
    Tensor b = random_tensor({4, 5}, rng);
    Tensor out = matmul(constant(a), constant(b))->value;
    ASSERT_EQ(out.shape, (Shape{2, 3, 5}));
    for (int t = 0; t < 2; ++t) {
        Tensor slice({3, 4});
        std::copy_n(a.data.begin() + t * 12, 12, slice.data.begin());
        Tensor want = matmul_oracle(slice, b);
        for (int i = 0; i < 15; ++i)
            EXPECT_NEAR(out.data[static_cast<std::size_t>(t * 15 + i)], want.data[static_cast<std::size_t>(i)], 1e-12);
    }
}

TEST(Backward, SumGivesOnes) {
    Var x = leaf(Tensor({3}, {1, 2, 3}));
    backward(sum_all(x));
    EXPECT_EQ(x->grad.data, (std::vector<double>{1, 1, 1}));
}

TEST(Backward, QuadraticGivesTwoX) {
    Var x = leaf(Tensor({2}, {1, 2}));
    backward(sum_all(mul(x, x)));
    EXPECT_EQ(x->grad.data, (std::vector<double>{2, 4}));
}

TEST(Backward, NonScalarRejected) {
    Var x = leaf(Tensor({2}, {1, 2}));
    EXPECT_THROW(backward(x), std::invalid_argument);
}

TEST(Backward, GradAccumulatesAcrossUses) {
    Var x = leaf(Tensor({2}, {3, 4}));
    backward(sum_all(add(x, x)));
    EXPECT_EQ(x->grad.data, (std::vector<double>{2, 2}));
}

TEST(Activations, ClosedFormPoints) {
    Var z = constant(Tensor({1}, {0.0}));
    EXPECT_DOUBLE_EQ(silu(z)->value.data[0], 0.0);
    EXPECT_DOUBLE_EQ(sigmoid(z)->value.data[0], 0.5);
    EXPECT_NEAR(softplus(z)->value.data[0], std::log(2.0), 1e-15);
}

TEST(LayerNorm, ConstantVectorCollapsesToBias) {
    Var x = constant(Tensor({1, 4}, {5, 5, 5, 5}));
    Var g = constant(Tensor({4}, {1, 1, 1, 1}));
    Var b = constant(Tensor({4}, {0, 0, 0, 0}));
    Tensor out = layer_norm(x, g, b, 1e-6)->value;
    for (double v : out.data) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(LayerNorm, TwoPointExample) {
    // mean 2, population std 1 at eps -> 0
    Var x = constant(Tensor({1, 2}, {1, 3}));
    Var g = constant(Tensor({2}, {1, 1}));
    Var b = constant(Tensor({2}, {0, 0}));
    Tensor out = layer_norm(x, g, b, 1e-14)->value;
    EXPECT_NEAR(out.data[0], -1.0, 1e-6);
    EXPECT_NEAR(out.data[1], 1.0, 1e-6);
}

TEST(LayerNorm, NormalizesRandomInput) {
    RngStream rng(21, 0);
    Tensor x = random_tensor({1, 64}, rng, -3.0, 3.0);
    Var out = layer_norm(constant(x), constant(Tensor({64}, 1.0)), constant(Tensor({64}, 0.0)),
                         1e-6);
    double mean = 0.0, var = 0.0;
    for (double v : out->value.data) mean += v;
    mean /= 64.0;
    for (double v : out->value.data) var += (v - mean) * (v - mean);
    var /= 64.0;
    EXPECT_LT(std::abs(mean), 1e-7);
    EXPECT_NEAR(var, 1.0, 1e-4);
}

TEST(DepthwiseConv, DeltaKernelIsIdentity) {
    RngStream rng(22, 0);
    Tensor x = random_tensor({2, 7}, rng);
    Tensor k({2, 3}, {0, 1, 0, 0, 1, 0});
    Tensor out = depthwise_conv(constant(x), constant(k))->value;
    EXPECT_EQ(out.data, x.data);
}

TEST(DepthwiseConv, HandConvolved1d) {
    Var x = constant(Tensor({1, 3}, {1, 2, 3}));
    Var k = constant(Tensor({1, 3}, {1, 1, 1}));
    Tensor out = depthwise_conv(x, k)->value;
    EXPECT_EQ(out.data, (std::vector<double>{3, 6, 5}));
}

TEST(DepthwiseConv, NoCrossChannelMixing) {
    RngStream rng(23, 0);
    Tensor x = random_tensor({2, 9}, rng);
    Tensor k = random_tensor({2, 3}, rng);
    Tensor base = depthwise_conv(constant(x), constant(k))->value;
    x.at2(0, 4) += 10.0; // perturb channel 0 only
    Tensor pert = depthwise_conv(constant(x), constant(k))->value;
    for (std::int64_t i = 0; i < 9; ++i) {
        EXPECT_NE(pert.at2(0, 4), base.at2(0, 4));
        EXPECT_EQ(pert.at2(1, i), base.at2(1, i)); // bit-identical
    }
}

TEST(DepthwiseConv, EvenKernelRejected) {
    Var x = constant(Tensor({1, 4}));
    Var k = constant(Tensor({1, 2}));
    EXPECT_THROW(depthwise_conv(x, k), std::invalid_argument);
}

TEST(Shapes, GatherSliceConcatTransposeRoundTrips) {
    RngStream rng(24, 0);
    Tensor x = random_tensor({4, 6}, rng);
    Var v = constant(x);
    Tensor tt = transpose2(transpose2(v))->value;
    EXPECT_EQ(tt.data, x.data);
    Tensor cc = concat_cols(slice_cols(v, 0, 3), slice_cols(v, 3, 6))->value;
    EXPECT_EQ(cc.data, x.data);
    Tensor rr = reshape(reshape(v, {24}), {4, 6})->value;
    EXPECT_EQ(rr.data, x.data);
}

// Finite-difference sweep over the differentiable op set: the spec-level
// guarantee that every op's backward matches central differences.
TEST(FiniteDifference, ElementwiseOps) {
    RngStream rng(31, 0);
    Var a = leaf(random_tensor({3, 4}, rng, 0.2, 1.5));
    Var b = leaf(random_tensor({3, 4}, rng, 0.3, 1.7));
    auto check = [&](const std::function<Var()>& f) {
        auto r = fd_check(f, {a, b});
        EXPECT_LT(r.max_rel_err, 1e-4) << r.where;
    };
    check([&] { return mean_all(add(a, b)); });
    check([&] { return mean_all(mul(sub(a, b), add(a, b))); });
    check([&] { return mean_all(div(a, b)); });
    check([&] { return mean_all(silu(a)); });
    check([&] { return mean_all(sigmoid(mul(a, b))); });
    check([&] { return mean_all(softplus(sub(a, b))); });
    check([&] { return mean_all(abs_op(sub(a, b))); });
    check([&] { return mean_all(max_elem(a, b)); });
    check([&] { return sum_all(scale(add_const(a, 0.7), 1.3)); });
}

TEST(FiniteDifference, MatmulLinearLayerNorm) {
    RngStream rng(32, 0);
    Var x = leaf(random_tensor({5, 3}, rng));
    Var w = leaf(random_tensor({3, 4}, rng));
    Var bias = leaf(random_tensor({4}, rng));
    Var gn = leaf(random_tensor({3}, rng, 0.5, 1.5));
    Var bn = leaf(random_tensor({3}, rng, -0.5, 0.5));
    {
        auto r = fd_check([&] { return mean_all(linear(x, w, bias)); }, {x, w, bias});
        EXPECT_LT(r.max_rel_err, 1e-4) << r.where;
    }
    {
        auto r = fd_check([&] { return mean_all(mul(layer_norm(x, gn, bn, 1e-5),
                                                    layer_norm(x, gn, bn, 1e-5))); },
                          {x, gn, bn});
        EXPECT_LT(r.max_rel_err, 1e-4) << r.where;
    }
}

TEST(FiniteDifference, Convolutions) {
    RngStream rng(33, 0);
    Var x1 = leaf(random_tensor({2, 9}, rng));
    Var k1 = leaf(random_tensor({2, 3}, rng));
    Var b1 = leaf(random_tensor({2}, rng));
    {
        auto r = fd_check([&] { return mean_all(depthwise_conv(x1, k1, b1)); }, {x1, k1, b1});
        EXPECT_LT(r.max_rel_err, 1e-4) << r.where;
    }
    Var x2 = leaf(random_tensor({2, 5, 6}, rng));
    Var k2 = leaf(random_tensor({2, 3, 3}, rng));
    {
        auto r = fd_check([&] { return mean_all(depthwise_conv(x2, k2)); }, {x2, k2});
        EXPECT_LT(r.max_rel_err, 1e-4) << r.where;
    }
    Var w = leaf(random_tensor({3, 2, 3, 3}, rng));
    Var cb = leaf(random_tensor({3}, rng));
    {
        auto r = fd_check([&] { return mean_all(conv2d(x2, w, cb)); }, {x2, w, cb});
        EXPECT_LT(r.max_rel_err, 1e-4) << r.where;
    }
}

TEST(FiniteDifference, ShapeOpsAndComposite) {
    RngStream rng(34, 0);
    Var x = leaf(random_tensor({4, 6}, rng));
    {
        auto r = fd_check(
            [&] {
                Var t = transpose2(x);
                Var s = slice_cols(x, 1, 5);
                Var c = concat_cols(s, s);
                Var g = gather_rows(c, {3, 0, 2, 1});
                return mean_all(mul(g, g)) + mean_all(mul(t, t));
            },
            {x});
        EXPECT_LT(r.max_rel_err, 1e-4) << r.where;
    }
    Var img = leaf(random_tensor({2, 6, 6}, rng));
    {
        auto r = fd_check(
            [&] {
                return add(mean_all(crop_border(img, 2)), pixel_channel_sum(img, 3, 3));
            },
            {img});
        EXPECT_LT(r.max_rel_err, 1e-4) << r.where;
    }
}

TEST(NoGrad, SuppressesGraphRecording) {
    Var x = leaf(Tensor({2}, {1, 2}));
    NoGradGuard ng;
    Var y = mul(x, x);
    EXPECT_FALSE(y->requires_grad);
    EXPECT_TRUE(y->parents.empty());
}
