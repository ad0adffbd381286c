#pragma once

// The three architectural units built on the shuffle pair: the
// single-modality scan block (RM), the parameter-free half-channel swap
// between modality branches (RCIM), and the gated cross-modal fusion
// block (RMIM), plus patch embedding.

#include "smamba/autodiff.hpp"
#include "smamba/rng.hpp"
#include "smamba/shuffle.hpp"
#include "smamba/ssm.hpp"
#include "smamba/tensor.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace smamba {

// ---------------------------------------------------------------------------
// parameter registry

// Named leaf variables; names become the checkpoint entry names
// (<branch>.<block_index>.<param>).
struct ParamRegistry {
    std::map<std::string, Var> params;

    Var add(const std::string& name, Tensor init) {
        auto [it, inserted] = params.emplace(name, make_var(std::move(init), true));
        if (!inserted) throw std::invalid_argument("duplicate parameter name: " + name);
        return it->second;
    }

    Var get(const std::string& name) const {
        auto it = params.find(name);
        if (it == params.end()) throw std::out_of_range("unknown parameter: " + name);
        return it->second;
    }

    std::int64_t scalar_count() const {
        std::int64_t n = 0;
        for (const auto& [name, v] : params) n += v->value.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [name, v] : params) {
            v->has_grad = false;
            v->grad = Tensor();
        }
    }

    std::map<std::string, Tensor> values() const {
        std::map<std::string, Tensor> out;
        for (const auto& [name, v] : params) out[name] = v->value;
        return out;
    }

    void load_values(const std::map<std::string, Tensor>& vals) {
        for (auto& [name, v] : params) {
            auto it = vals.find(name);
            if (it == vals.end()) throw std::runtime_error("checkpoint missing parameter: " + name);
            if (it->second.shape != v->value.shape)
                throw std::runtime_error("checkpoint shape mismatch for " + name + ": " +
                                         shape_str(it->second.shape) + " vs " +
                                         shape_str(v->value.shape));
            v->value = it->second;
        }
    }
};

namespace init {

inline Tensor uniform_fan_in(const Shape& shape, std::int64_t fan_in, RngStream& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor t(shape);
    for (auto& v : t.data) v = bound * (2.0 * rng.uniform() - 1.0);
    return t;
}

// Bias b with softplus(b) log-uniform in [lo, hi]; keeps initial timescales
// spread over a sane range.
inline Tensor dt_bias(std::int64_t d, RngStream& rng, double lo = 1e-3, double hi = 1e-1) {
    Tensor t({d});
    for (auto& v : t.data) {
        const double dt = lo * std::pow(hi / lo, rng.uniform());
        v = std::log(std::expm1(dt));
    }
    return t;
}

} // namespace init

// ---------------------------------------------------------------------------
// patch embedding

struct PatchGrid {
    Var tokens; // [L, D]
    std::int64_t grid_h = 0;
    std::int64_t grid_w = 0;
    std::int64_t patch_size = 1;

    std::int64_t length() const { return grid_h * grid_w; }
    std::int64_t dim() const { return tokens->value.shape[1]; }
};

namespace detail {

// [C,H,W] -> [L, C*p*p] unfold map, L = (H/p)*(W/p); a fixed bijection.
inline std::vector<std::int64_t> unfold_indices(std::int64_t c_in, std::int64_t h,
                                                std::int64_t w, std::int64_t p) {
    const std::int64_t gh = h / p, gw = w / p;
    std::vector<std::int64_t> idx;
    idx.reserve(static_cast<std::size_t>(c_in * h * w));
    for (std::int64_t gy = 0; gy < gh; ++gy)
        for (std::int64_t gx = 0; gx < gw; ++gx)
            for (std::int64_t c = 0; c < c_in; ++c)
                for (std::int64_t dy = 0; dy < p; ++dy)
                    for (std::int64_t dx = 0; dx < p; ++dx)
                        idx.push_back((c * h + gy * p + dy) * w + gx * p + dx);
    return idx;
}

inline std::vector<std::int64_t> invert_indices(const std::vector<std::int64_t>& idx) {
    std::vector<std::int64_t> inv(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) inv[static_cast<std::size_t>(idx[i])] = static_cast<std::int64_t>(i);
    return inv;
}

} // namespace detail

// Non-overlapping patches, linearly projected to the model width. Position
// information is injected later by the blocks' depthwise convs.
inline PatchGrid patch_embed(const Var& feat, std::int64_t patch_size, const Var& proj_w,
                             const Var& proj_b) {
    if (feat->value.rank() != 3) throw std::invalid_argument("patch_embed: expects [C,H,W]");
    const std::int64_t c = feat->value.shape[0], h = feat->value.shape[1], w = feat->value.shape[2];
    if (patch_size < 1 || h % patch_size != 0 || w % patch_size != 0)
        throw std::invalid_argument("patch_embed: image " + shape_str(feat->value.shape) +
                                    " not divisible by patch size " + std::to_string(patch_size));
    const std::int64_t pe = c * patch_size * patch_size;
    if (proj_w->value.shape[0] != pe)
        throw std::invalid_argument("patch_embed: projection expects input dim " +
                                    std::to_string(proj_w->value.shape[0]) + ", patches have " +
                                    std::to_string(pe));
    const std::int64_t gh = h / patch_size, gw = w / patch_size;
    Var patches = gather_flat(feat, detail::unfold_indices(c, h, w, patch_size), {gh * gw, pe});
    PatchGrid g;
    g.tokens = linear(patches, proj_w, proj_b);
    g.grid_h = gh;
    g.grid_w = gw;
    g.patch_size = patch_size;
    return g;
}

// Tokens back to an image: linear to C*p*p per token, then fold.
inline Var unpatch(const PatchGrid& g, const Var& proj_w, const Var& proj_b, std::int64_t c_out) {
    const std::int64_t p = g.patch_size;
    if (proj_w->value.shape[1] != c_out * p * p)
        throw std::invalid_argument("unpatch: projection output dim mismatch");
    Var patches = linear(g.tokens, proj_w, proj_b); // [L, C*p*p]
    const std::int64_t h = g.grid_h * p, w = g.grid_w * p;
    const auto unfold = detail::unfold_indices(c_out, h, w, p);
    return gather_flat(patches, detail::invert_indices(unfold), {c_out, h, w});
}

// [L,D] tokens <-> [D,Hp,Wp] grid views for the depthwise position convs.
inline Var tokens_to_grid(const Var& tokens, std::int64_t gh, std::int64_t gw) {
    const std::int64_t d = tokens->value.shape[1];
    return reshape(transpose2(tokens), {d, gh, gw});
}

inline Var grid_to_tokens(const Var& grid) {
    const std::int64_t d = grid->value.shape[0];
    const std::int64_t l = grid->value.shape[1] * grid->value.shape[2];
    return transpose2(reshape(grid, {d, l}));
}

// ---------------------------------------------------------------------------
// RM block

struct BlockDims {
    std::int64_t d_model = 32;
    std::int64_t d_inner = 64; // d_model * expansion
    std::int64_t state_n = 8;
    std::int64_t pos_kernel = 3;  // depthwise 2-D position conv
    std::int64_t conv_kernel = 3; // depthwise 1-D pre-scan conv
    bool pos_conv_first = true;   // position conv before layer norm
};

struct BlockParams {
    BlockDims dims;
    Var ln_gain, ln_bias;
    Var pos_conv_w, pos_conv_b;
    Var in_proj_w, in_proj_b; // D -> 2*Di, split into x and z
    Var conv1d_w, conv1d_b;
    Var dt_w, dt_b; // Di -> Di, softplus outside the scan
    Var b_w, c_w;   // Di -> N
    Var a;          // [Di, N]
    Var d_skip;     // [Di]
    Var out_proj_w, out_proj_b; // Di -> D

    static BlockParams create(ParamRegistry& reg, const std::string& prefix, const BlockDims& dims,
                              RngStream& rng, bool zero_out_proj) {
        BlockParams p;
        p.dims = dims;
        const std::int64_t d = dims.d_model, di = dims.d_inner, n = dims.state_n;
        p.ln_gain = reg.add(prefix + ".ln_gain", Tensor({d}, 1.0));
        p.ln_bias = reg.add(prefix + ".ln_bias", Tensor({d}, 0.0));
        p.pos_conv_w = reg.add(prefix + ".pos_conv_w",
                               init::uniform_fan_in({d, dims.pos_kernel, dims.pos_kernel},
                                                    dims.pos_kernel * dims.pos_kernel, rng));
        p.pos_conv_b = reg.add(prefix + ".pos_conv_b", Tensor({d}, 0.0));
        p.in_proj_w = reg.add(prefix + ".in_proj_w", init::uniform_fan_in({d, 2 * di}, d, rng));
        p.in_proj_b = reg.add(prefix + ".in_proj_b", Tensor({2 * di}, 0.0));
        p.conv1d_w = reg.add(prefix + ".conv1d_w",
                             init::uniform_fan_in({di, dims.conv_kernel}, dims.conv_kernel, rng));
        p.conv1d_b = reg.add(prefix + ".conv1d_b", Tensor({di}, 0.0));
        p.dt_w = reg.add(prefix + ".dt_w", init::uniform_fan_in({di, di}, di, rng));
        p.dt_b = reg.add(prefix + ".dt_b", init::dt_bias(di, rng));
        p.b_w = reg.add(prefix + ".b_w", init::uniform_fan_in({di, n}, di, rng));
        p.c_w = reg.add(prefix + ".c_w", init::uniform_fan_in({di, n}, di, rng));
        p.a = reg.add(prefix + ".a", make_state_matrix(di, n));
        p.d_skip = reg.add(prefix + ".d_skip", Tensor({di}, 1.0));
        p.out_proj_w = reg.add(prefix + ".out_proj_w",
                               zero_out_proj ? Tensor({di, d}, 0.0)
                                             : init::uniform_fan_in({di, d}, di, rng));
        p.out_proj_b = reg.add(prefix + ".out_proj_b", Tensor({d}, 0.0));
        return p;
    }
};

namespace detail {

// conv1d + SiLU + selective scan over [L,Di] tokens.
inline Var ssm_branch(const Var& x, const Var& conv_w, const Var& conv_b, const Var& dt_w,
                      const Var& dt_b, const Var& b_w, const Var& c_w, const Var& a,
                      const Var& d_skip) {
    Var xc = silu(transpose2(depthwise_conv(transpose2(x), conv_w, conv_b)));
    Var dt = softplus(linear(xc, dt_w, dt_b));
    Var b_seq = matmul(xc, b_w);
    Var c_seq = matmul(xc, c_w);
    return selective_scan(xc, dt, b_seq, c_seq, a, d_skip);
}

inline Var position_conv(const Var& tokens, std::int64_t gh, std::int64_t gw, const Var& w,
                         const Var& b) {
    return grid_to_tokens(depthwise_conv(tokens_to_grid(tokens, gh, gw), w, b));
}

} // namespace detail

// Position conv -> LN -> shuffle -> in-projection -> conv/SiLU -> selective
// scan -> gate -> out-projection -> inverse shuffle -> residual.
inline PatchGrid rm_block(const PatchGrid& f, const BlockParams& p, const Permutation& perm) {
    require_perm_length(perm, f.length(), "rm_block");
    const std::int64_t di = p.dims.d_inner;

    Var t = f.tokens;
    if (p.dims.pos_conv_first) {
        t = detail::position_conv(t, f.grid_h, f.grid_w, p.pos_conv_w, p.pos_conv_b);
        t = layer_norm(t, p.ln_gain, p.ln_bias);
    } else {
        t = layer_norm(t, p.ln_gain, p.ln_bias);
        t = detail::position_conv(t, f.grid_h, f.grid_w, p.pos_conv_w, p.pos_conv_b);
    }
    Var shuffled = apply_shuffle(t, perm);
    Var xz = linear(shuffled, p.in_proj_w, p.in_proj_b);
    Var x = slice_cols(xz, 0, di);
    Var z = slice_cols(xz, di, 2 * di);
    Var y = detail::ssm_branch(x, p.conv1d_w, p.conv1d_b, p.dt_w, p.dt_b, p.b_w, p.c_w, p.a,
                               p.d_skip);
    Var gated = mul(y, silu(z));
    Var out = linear(gated, p.out_proj_w, p.out_proj_b);
    Var restored = apply_inverse_shuffle(out, perm);

    PatchGrid result = f;
    result.tokens = add(f.tokens, restored);
    return result;
}

// ---------------------------------------------------------------------------
// RCIM block

// Parameter-free half-channel swap. An involution: applying it twice gives
// back the originals.
inline std::pair<Var, Var> rcim_swap(const Var& fm, const Var& fp) {
    require_same_shape(fm->value, fp->value, "rcim_swap");
    if (fm->value.rank() != 2) throw std::invalid_argument("rcim_swap: expects [L,D]");
    const std::int64_t d = fm->value.shape[1];
    if (d % 2 != 0)
        throw std::invalid_argument("rcim_swap: channel count must be even, got " +
                                    std::to_string(d));
    Var fm2 = concat_cols(slice_cols(fm, 0, d / 2), slice_cols(fp, d / 2, d));
    Var fp2 = concat_cols(slice_cols(fp, 0, d / 2), slice_cols(fm, d / 2, d));
    return {fm2, fp2};
}

// Swap halves across modalities, then run each branch through its own RM
// block.
inline std::pair<PatchGrid, PatchGrid> rcim_block(const PatchGrid& fm, const PatchGrid& fp,
                                                  const BlockParams& params_m,
                                                  const BlockParams& params_p,
                                                  const Permutation& perm_m,
                                                  const Permutation& perm_p) {
    auto [sm, sp] = rcim_swap(fm.tokens, fp.tokens);
    PatchGrid gm = fm, gp = fp;
    gm.tokens = sm;
    gp.tokens = sp;
    return {rm_block(gm, params_m, perm_m), rm_block(gp, params_p, perm_p)};
}

// ---------------------------------------------------------------------------
// RMIM block

struct RmimParams {
    BlockDims dims;
    Var ln_m_gain, ln_m_bias, ln_p_gain, ln_p_bias;
    Var in_m_w, in_m_b, in_p_w, in_p_b; // D -> Di, shared projection space
    Var gate_w, gate_b;                 // D -> Di, gate from the m branch
    Var conv_m_w, conv_m_b, conv_p_w, conv_p_b;
    Var dt_m_w, dt_m_b, b_m_w, c_m_w, a_m, skip_m;
    Var dt_p_w, dt_p_b, b_p_w, c_p_w, a_p, skip_p;
    Var out_w, out_b;           // Di -> D
    Var post_conv_w, post_conv_b; // depthwise 2-D conv on the restored grid

    static RmimParams create(ParamRegistry& reg, const std::string& prefix, const BlockDims& dims,
                             RngStream& rng, bool zero_out_proj) {
        RmimParams p;
        p.dims = dims;
        const std::int64_t d = dims.d_model, di = dims.d_inner, n = dims.state_n;
        p.ln_m_gain = reg.add(prefix + ".ln_m_gain", Tensor({d}, 1.0));
        p.ln_m_bias = reg.add(prefix + ".ln_m_bias", Tensor({d}, 0.0));
        p.ln_p_gain = reg.add(prefix + ".ln_p_gain", Tensor({d}, 1.0));
        p.ln_p_bias = reg.add(prefix + ".ln_p_bias", Tensor({d}, 0.0));
        p.in_m_w = reg.add(prefix + ".in_m_w", init::uniform_fan_in({d, di}, d, rng));
        p.in_m_b = reg.add(prefix + ".in_m_b", Tensor({di}, 0.0));
        p.in_p_w = reg.add(prefix + ".in_p_w", init::uniform_fan_in({d, di}, d, rng));
        p.in_p_b = reg.add(prefix + ".in_p_b", Tensor({di}, 0.0));
        p.gate_w = reg.add(prefix + ".gate_w", init::uniform_fan_in({d, di}, d, rng));
        p.gate_b = reg.add(prefix + ".gate_b", Tensor({di}, 0.0));
        p.conv_m_w = reg.add(prefix + ".conv_m_w",
                             init::uniform_fan_in({di, dims.conv_kernel}, dims.conv_kernel, rng));
        p.conv_m_b = reg.add(prefix + ".conv_m_b", Tensor({di}, 0.0));
        p.conv_p_w = reg.add(prefix + ".conv_p_w",
                             init::uniform_fan_in({di, dims.conv_kernel}, dims.conv_kernel, rng));
        p.conv_p_b = reg.add(prefix + ".conv_p_b", Tensor({di}, 0.0));
        p.dt_m_w = reg.add(prefix + ".dt_m_w", init::uniform_fan_in({di, di}, di, rng));
        p.dt_m_b = reg.add(prefix + ".dt_m_b", init::dt_bias(di, rng));
        p.b_m_w = reg.add(prefix + ".b_m_w", init::uniform_fan_in({di, n}, di, rng));
        p.c_m_w = reg.add(prefix + ".c_m_w", init::uniform_fan_in({di, n}, di, rng));
        p.a_m = reg.add(prefix + ".a_m", make_state_matrix(di, n));
        p.skip_m = reg.add(prefix + ".skip_m", Tensor({di}, 1.0));
        p.dt_p_w = reg.add(prefix + ".dt_p_w", init::uniform_fan_in({di, di}, di, rng));
        p.dt_p_b = reg.add(prefix + ".dt_p_b", init::dt_bias(di, rng));
        p.b_p_w = reg.add(prefix + ".b_p_w", init::uniform_fan_in({di, n}, di, rng));
        p.c_p_w = reg.add(prefix + ".c_p_w", init::uniform_fan_in({di, n}, di, rng));
        p.a_p = reg.add(prefix + ".a_p", make_state_matrix(di, n));
        p.skip_p = reg.add(prefix + ".skip_p", Tensor({di}, 1.0));
        p.out_w = reg.add(prefix + ".out_w", zero_out_proj
                                                 ? Tensor({di, d}, 0.0)
                                                 : init::uniform_fan_in({di, d}, di, rng));
        p.out_b = reg.add(prefix + ".out_b", Tensor({d}, 0.0));
        p.post_conv_w = reg.add(prefix + ".post_conv_w",
                                init::uniform_fan_in({d, dims.pos_kernel, dims.pos_kernel},
                                                     dims.pos_kernel * dims.pos_kernel, rng));
        p.post_conv_b = reg.add(prefix + ".post_conv_b", Tensor({d}, 0.0));
        return p;
    }
};

// Cross-modal fusion in a shared projection space. One permutation is
// applied to both modalities so token alignment survives the shuffle; the
// gate comes from the m branch and modulates both scan outputs.
inline PatchGrid rmim_block(const PatchGrid& fm, const PatchGrid& fp, const RmimParams& p,
                            const Permutation& perm) {
    if (fm.length() != fp.length() || fm.dim() != fp.dim())
        throw std::invalid_argument("rmim_block: modality shapes disagree");
    require_perm_length(perm, fm.length(), "rmim_block");

    Var nm = layer_norm(fm.tokens, p.ln_m_gain, p.ln_m_bias);
    Var np = layer_norm(fp.tokens, p.ln_p_gain, p.ln_p_bias);
    Var sm = apply_shuffle(nm, perm);
    Var sp = apply_shuffle(np, perm);

    Var xm = linear(sm, p.in_m_w, p.in_m_b);
    Var xp = linear(sp, p.in_p_w, p.in_p_b);
    Var ym = detail::ssm_branch(xm, p.conv_m_w, p.conv_m_b, p.dt_m_w, p.dt_m_b, p.b_m_w, p.c_m_w,
                                p.a_m, p.skip_m);
    Var yp = detail::ssm_branch(xp, p.conv_p_w, p.conv_p_b, p.dt_p_w, p.dt_p_b, p.b_p_w, p.c_p_w,
                                p.a_p, p.skip_p);

    Var gate = silu(linear(sm, p.gate_w, p.gate_b));
    Var combined = add(mul(ym, gate), mul(yp, gate));
    Var out = linear(combined, p.out_w, p.out_b);
    Var restored = apply_inverse_shuffle(out, perm);
    Var conved = detail::position_conv(restored, fm.grid_h, fm.grid_w, p.post_conv_w,
                                       p.post_conv_b);

    PatchGrid result = fm;
    result.tokens = add(fm.tokens, conved);
    return result;
}

// Two-permutation spelling; the block requires a shared permutation, so
// disagreeing inputs are a misuse error.
inline PatchGrid rmim_block(const PatchGrid& fm, const PatchGrid& fp, const RmimParams& p,
                            const Permutation& perm_m, const Permutation& perm_p) {
    if (perm_m.forward != perm_p.forward)
        throw std::invalid_argument(
            "rmim_block: modalities must share one permutation per invocation");
    return rmim_block(fm, fp, p, perm_m);
}

} // namespace smamba
