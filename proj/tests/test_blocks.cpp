#include "smamba/blocks.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace smamba;
using smamba::testing::fd_check;
using smamba::testing::random_tensor;

namespace {

BlockDims micro_dims(std::int64_t d = 4, std::int64_t di = 8, std::int64_t n = 2) {
    BlockDims dims;
    dims.d_model = d;
    dims.d_inner = di;
    dims.state_n = n;
    return dims;
}

PatchGrid make_grid(Tensor tokens, std::int64_t gh, std::int64_t gw) {
    PatchGrid g;
    g.tokens = make_var(std::move(tokens), false);
    g.grid_h = gh;
    g.grid_w = gw;
    g.patch_size = 1;
    return g;
}

} // namespace

TEST(PatchEmbed, DegeneratePatchSizeOne) {
    RngStream rng(1, 0);
    Tensor img = random_tensor({3, 4, 4}, rng);
    ParamRegistry reg;
    Var w = reg.add("w", init::uniform_fan_in({3, 5}, 3, rng));
    Var b = reg.add("b", Tensor({5}, 0.0));
    PatchGrid g = patch_embed(constant(img), 1, w, b);
    EXPECT_EQ(g.length(), 16);
    EXPECT_EQ(g.dim(), 5);
    // each token is the linear projection of one pixel's channel vector
    Tensor pix({1, 3}, {img.at3(0, 1, 2), img.at3(1, 1, 2), img.at3(2, 1, 2)});
    Tensor want = matmul(constant(pix), w)->value;
    const std::int64_t tok = 1 * 4 + 2;
    for (std::int64_t c = 0; c < 5; ++c) EXPECT_NEAR(g.tokens->value.at2(tok, c), want.at2(0, c), 1e-12);
}

TEST(PatchEmbed, TokenCount) {
    RngStream rng(2, 0);
    Tensor img = random_tensor({1, 4, 4}, rng);
    ParamRegistry reg;
    Var w = reg.add("w", init::uniform_fan_in({4, 6}, 4, rng));
    Var b = reg.add("b", Tensor({6}, 0.0));
    PatchGrid g = patch_embed(constant(img), 2, w, b);
    EXPECT_EQ(g.length(), 4);
    EXPECT_EQ(g.grid_h, 2);
    EXPECT_EQ(g.grid_w, 2);
}

TEST(PatchEmbed, NonDivisibleRejected) {
    RngStream rng(3, 0);
    Tensor img = random_tensor({1, 5, 4}, rng);
    ParamRegistry reg;
    Var w = reg.add("w", Tensor({4, 4}, 0.0));
    Var b = reg.add("b", Tensor({4}, 0.0));
    EXPECT_THROW(patch_embed(constant(img), 2, w, b), std::invalid_argument);
}

TEST(PatchEmbed, RoundTripWithIdentityProjection) {
    RngStream rng(4, 0);
    const std::int64_t c = 2, p = 2;
    const std::int64_t pe = c * p * p;
    Tensor img = random_tensor({c, 6, 6}, rng);
    Tensor eye({pe, pe});
    for (std::int64_t i = 0; i < pe; ++i) eye.at2(i, i) = 1.0;
    Var w = constant(eye), b = constant(Tensor({pe}, 0.0));
    PatchGrid g = patch_embed(constant(img), p, w, b);
    Var back = unpatch(g, w, b, c);
    EXPECT_EQ(back->value.shape, img.shape);
    EXPECT_EQ(back->value.data, img.data);
}

TEST(GridViews, TokensGridRoundTrip) {
    RngStream rng(5, 0);
    Tensor tokens = random_tensor({12, 3}, rng);
    Var grid = tokens_to_grid(constant(tokens), 3, 4);
    EXPECT_EQ(grid->value.shape, (Shape{3, 3, 4}));
    Tensor back = grid_to_tokens(grid)->value;
    EXPECT_EQ(back.data, tokens.data);
}

TEST(RmBlock, ResidualIdentityAtInit) {
    RngStream rng(6, 0);
    ParamRegistry reg;
    BlockParams p = BlockParams::create(reg, "m.0", micro_dims(), rng, /*zero_out_proj=*/true);
    Tensor tokens = random_tensor({16, 4}, rng);
    PatchGrid f = make_grid(tokens, 4, 4);
    RngStream perm_rng(7, 0);
    PatchGrid out = rm_block(f, p, sample_permutation(perm_rng, 16));
    EXPECT_EQ(out.tokens->value.data, tokens.data); // exact
}

TEST(RmBlock, PermutationLengthChecked) {
    RngStream rng(8, 0);
    ParamRegistry reg;
    BlockParams p = BlockParams::create(reg, "m.0", micro_dims(), rng, true);
    PatchGrid f = make_grid(random_tensor({16, 4}, rng), 4, 4);
    RngStream perm_rng(9, 0);
    EXPECT_THROW(rm_block(f, p, sample_permutation(perm_rng, 15)), std::invalid_argument);
}

TEST(RmBlock, ShuffleCommutesForTokenwiseConfiguration) {
    // kernel-size-1 conv and a scan whose output is the skip path only:
    // every op between shuffle and inverse shuffle is then token-wise, so
    // any permutation gives the same block output.
    RngStream rng(10, 0);
    BlockDims dims = micro_dims();
    dims.conv_kernel = 1;
    ParamRegistry reg;
    BlockParams p = BlockParams::create(reg, "m.0", dims, rng, /*zero_out_proj=*/false);
    p.c_w->value.fill(0.0); // y = d_skip * x, token-wise
    Tensor tokens = random_tensor({16, 4}, rng);
    PatchGrid f = make_grid(tokens, 4, 4);
    RngStream perm_rng(11, 0);
    PatchGrid out_any = rm_block(f, p, sample_permutation(perm_rng, 16));
    PatchGrid out_id = rm_block(f, p, Permutation::identity(16));
    EXPECT_LT(max_abs_diff(out_any.tokens->value, out_id.tokens->value), 1e-6);
}

TEST(RmBlock, ShuffleCancellationBitExact) {
    // (shuffle, scan-core, inverse-shuffle) vs running the core on the
    // permuted sequence and un-permuting: the same function, bit for bit.
    RngStream rng(12, 0);
    BlockDims dims = micro_dims();
    ParamRegistry reg;
    BlockParams p = BlockParams::create(reg, "m.0", dims, rng, false);
    Tensor tokens = random_tensor({12, 4}, rng);
    RngStream perm_rng(13, 0);
    Permutation perm = sample_permutation(perm_rng, 12);

    auto core = [&](const Var& t) {
        const std::int64_t di = dims.d_inner;
        Var xz = linear(t, p.in_proj_w, p.in_proj_b);
        Var x = slice_cols(xz, 0, di);
        Var z = slice_cols(xz, di, 2 * di);
        Var y = smamba::detail::ssm_branch(x, p.conv1d_w, p.conv1d_b, p.dt_w, p.dt_b, p.b_w,
                                           p.c_w, p.a, p.d_skip);
        return linear(mul(y, silu(z)), p.out_proj_w, p.out_proj_b);
    };

    Var in = constant(tokens);
    Tensor route1 = apply_inverse_shuffle(core(apply_shuffle(in, perm)), perm)->value;
    Tensor permuted_out = core(apply_shuffle(in, perm))->value;
    Tensor route2 = apply_inverse_shuffle(constant(permuted_out), perm)->value;
    EXPECT_EQ(route1.data, route2.data);
}

TEST(RmBlock, GradientMatchesFiniteDifferences) {
    RngStream rng(14, 0);
    BlockDims dims = micro_dims(4, 6, 2);
    ParamRegistry reg;
    BlockParams p = BlockParams::create(reg, "m.0", dims, rng, false);
    Var input = make_var(random_tensor({4, 4}, rng), true);
    RngStream perm_rng(15, 0);
    Permutation perm = sample_permutation(perm_rng, 4);

    std::vector<Var> leaves = {input};
    for (const auto& [name, v] : reg.params) leaves.push_back(v);
    auto r = fd_check(
        [&] {
            PatchGrid f;
            f.tokens = input;
            f.grid_h = 2;
            f.grid_w = 2;
            f.patch_size = 1;
            Var out = rm_block(f, p, perm).tokens;
            return mean_all(mul(out, out));
        },
        leaves, 1e-3, /*order=*/4);
    EXPECT_LT(r.max_rel_err, 1e-4) << r.where;
}

TEST(RmBlock, AllParametersReceiveGradient) {
    RngStream rng(16, 0);
    ParamRegistry reg;
    BlockParams p = BlockParams::create(reg, "m.0", micro_dims(), rng, /*zero_out_proj=*/false);
    PatchGrid f = make_grid(random_tensor({16, 4}, rng), 4, 4);
    RngStream perm_rng(17, 0);
    PatchGrid out = rm_block(f, p, sample_permutation(perm_rng, 16));
    backward(mean_all(mul(out.tokens, out.tokens)));
    for (const auto& [name, v] : reg.params) {
        ASSERT_TRUE(v->has_grad) << name;
        double norm = 0.0;
        for (double g : v->grad.data) norm += std::abs(g);
        EXPECT_GT(norm, 0.0) << "dead parameter: " << name;
    }
}

TEST(RcimSwap, SymmetricInputsFixedPoint) {
    RngStream rng(18, 0);
    Tensor t = random_tensor({8, 4}, rng);
    auto [m2, p2] = rcim_swap(constant(t), constant(t));
    EXPECT_EQ(m2->value.data, t.data);
    EXPECT_EQ(p2->value.data, t.data);
}

TEST(RcimSwap, Involution) {
    RngStream rng(19, 0);
    Tensor tm = random_tensor({8, 4}, rng), tp = random_tensor({8, 4}, rng);
    auto [m1, p1] = rcim_swap(constant(tm), constant(tp));
    auto [m2, p2] = rcim_swap(m1, p1);
    EXPECT_EQ(m2->value.data, tm.data);
    EXPECT_EQ(p2->value.data, tp.data);
}

TEST(RcimSwap, ChannelHalvingIndices) {
    // D=4: swapped m channels = [m0, m1, p2, p3]
    Tensor tm({1, 4}, {10, 11, 12, 13});
    Tensor tp({1, 4}, {20, 21, 22, 23});
    auto [m2, p2] = rcim_swap(constant(tm), constant(tp));
    EXPECT_EQ(m2->value.data, (std::vector<double>{10, 11, 22, 23}));
    EXPECT_EQ(p2->value.data, (std::vector<double>{20, 21, 12, 13}));
}

TEST(RcimSwap, OddChannelCountRejected) {
    Tensor t({2, 3});
    EXPECT_THROW(rcim_swap(constant(t), constant(t)), std::invalid_argument);
}

TEST(RcimBlock, ShapePreserved) {
    RngStream rng(20, 0);
    ParamRegistry reg;
    BlockParams pm = BlockParams::create(reg, "cm.0", micro_dims(), rng, true);
    BlockParams pp = BlockParams::create(reg, "cp.0", micro_dims(), rng, true);
    PatchGrid fm = make_grid(random_tensor({16, 4}, rng), 4, 4);
    PatchGrid fp = make_grid(random_tensor({16, 4}, rng), 4, 4);
    RngStream perm_rng(21, 0);
    auto [om, op] = rcim_block(fm, fp, pm, pp, sample_permutation(perm_rng, 16),
                               sample_permutation(perm_rng, 16));
    EXPECT_EQ(om.tokens->value.shape, (Shape{16, 4}));
    EXPECT_EQ(op.tokens->value.shape, (Shape{16, 4}));
}

TEST(RmimBlock, ResidualIdentityAtInit) {
    RngStream rng(22, 0);
    ParamRegistry reg;
    RmimParams p = RmimParams::create(reg, "rmim.0", micro_dims(), rng, /*zero_out_proj=*/true);
    Tensor tm = random_tensor({16, 4}, rng);
    PatchGrid fm = make_grid(tm, 4, 4);
    PatchGrid fp = make_grid(random_tensor({16, 4}, rng), 4, 4);
    RngStream perm_rng(23, 0);
    PatchGrid out = rmim_block(fm, fp, p, sample_permutation(perm_rng, 16));
    EXPECT_EQ(out.tokens->value.data, tm.data);
}

TEST(RmimBlock, DifferentPermutationsRejected) {
    RngStream rng(24, 0);
    ParamRegistry reg;
    RmimParams p = RmimParams::create(reg, "rmim.0", micro_dims(), rng, true);
    PatchGrid fm = make_grid(random_tensor({6, 4}, rng), 2, 3);
    PatchGrid fp = make_grid(random_tensor({6, 4}, rng), 2, 3);
    RngStream perm_rng(25, 0);
    Permutation a = sample_permutation(perm_rng, 6);
    Permutation b = sample_permutation(perm_rng, 6);
    ASSERT_NE(a.forward, b.forward);
    EXPECT_THROW(rmim_block(fm, fp, p, a, b), std::invalid_argument);
    EXPECT_NO_THROW(rmim_block(fm, fp, p, a, a));
}

TEST(RmimBlock, SharedPermutationCommutation) {
    // With a token-wise-degenerate configuration, shuffling both inputs by p
    // and running with the identity permutation equals running the originals
    // with permutation p, after inverse alignment.
    RngStream rng(26, 0);
    BlockDims dims = micro_dims();
    dims.conv_kernel = 1;
    dims.pos_kernel = 1;
    ParamRegistry reg;
    RmimParams p = RmimParams::create(reg, "rmim.0", dims, rng, false);
    p.c_m_w->value.fill(0.0);
    p.c_p_w->value.fill(0.0);
    Tensor tm = random_tensor({12, 4}, rng), tp = random_tensor({12, 4}, rng);
    RngStream perm_rng(27, 0);
    Permutation perm = sample_permutation(perm_rng, 12);

    PatchGrid fm = make_grid(tm, 3, 4), fp = make_grid(tp, 3, 4);
    Tensor direct = rmim_block(fm, fp, p, perm).tokens->value;

    PatchGrid fm_s = make_grid(apply_shuffle(tm, perm), 3, 4);
    PatchGrid fp_s = make_grid(apply_shuffle(tp, perm), 3, 4);
    Tensor via_preshuffle = rmim_block(fm_s, fp_s, p, Permutation::identity(12)).tokens->value;
    Tensor aligned = apply_inverse_shuffle(via_preshuffle, perm);
    EXPECT_LT(max_abs_diff(direct, aligned), 1e-10);
}

TEST(RmimBlock, GradientMatchesFiniteDifferences) {
    RngStream rng(28, 0);
    BlockDims dims = micro_dims(4, 6, 2);
    ParamRegistry reg;
    RmimParams p = RmimParams::create(reg, "rmim.0", dims, rng, false);
    Var in_m = make_var(random_tensor({4, 4}, rng), true);
    Var in_p = make_var(random_tensor({4, 4}, rng), true);
    RngStream perm_rng(29, 0);
    Permutation perm = sample_permutation(perm_rng, 4);

    std::vector<Var> leaves = {in_m, in_p};
    for (const auto& [name, v] : reg.params) leaves.push_back(v);
    auto r = fd_check(
        [&] {
            PatchGrid fm{in_m, 2, 2, 1}, fp{in_p, 2, 2, 1};
            Var out = rmim_block(fm, fp, p, perm).tokens;
            return mean_all(mul(out, out));
        },
        leaves, 1e-3, /*order=*/4);
    EXPECT_LT(r.max_rel_err, 1e-4) << r.where;
}

TEST(Registry, CheckpointValuesRoundTrip) {
    RngStream rng(30, 0);
    ParamRegistry reg;
    BlockParams::create(reg, "m.0", micro_dims(), rng, false);
    auto vals = reg.values();
    ParamRegistry reg2;
    RngStream rng2(31, 0);
    BlockParams::create(reg2, "m.0", micro_dims(), rng2, false);
    reg2.load_values(vals);
    for (const auto& [name, v] : reg.params)
        EXPECT_EQ(reg2.get(name)->value.data, v->value.data) << name;
    // missing key refused
    vals.erase("m.0.dt_b");
    ParamRegistry reg3;
    RngStream rng3(32, 0);
    BlockParams::create(reg3, "m.0", micro_dims(), rng3, false);
    EXPECT_THROW(reg3.load_values(vals), std::runtime_error);
}
