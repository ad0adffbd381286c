#pragma once

// The two-branch fusion network: conv stems, patch embedding, per-modality
// scan chains, the channel-swap stage, cross-modal fusion blocks, and the
// residual reconstruction head.

#include "smamba/blocks.hpp"
#include "smamba/config.hpp"
#include "smamba/losses.hpp"
#include "smamba/rng.hpp"
#include "smamba/tensor.hpp"
#include "smamba/tensor_io.hpp"

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace smamba {

enum class PermMode { PerBlock, Shared };

struct NetworkConfig {
    std::int64_t d_model = 32;
    std::int64_t state_n = 8;
    std::int64_t rm_blocks = 2;   // scan blocks per modality branch
    std::int64_t rcim_stages = 1; // swap + one scan block per branch, each
    std::int64_t rmim_blocks = 2; // cross-modal fusion blocks
    std::int64_t patch_size = 1;
    std::int64_t expansion = 2;
    std::int64_t mc_samples = 8;
    std::uint64_t seed = 0;
    PermMode perm_mode = PermMode::PerBlock;
    bool pos_conv_first = true;
    std::int64_t c_ms = 4;  // multi-spectral band count
    std::int64_t scale = 4; // pan/ms resolution ratio
    std::int64_t stem_kernel = 3;
    std::int64_t head_kernel = 3;
    std::int64_t pos_kernel = 3;
    std::int64_t conv_kernel = 3;

    std::int64_t d_inner() const { return d_model * expansion; }

    BlockDims block_dims() const {
        BlockDims d;
        d.d_model = d_model;
        d.d_inner = d_inner();
        d.state_n = state_n;
        d.pos_kernel = pos_kernel;
        d.conv_kernel = conv_kernel;
        d.pos_conv_first = pos_conv_first;
        return d;
    }

    void validate() const {
        if (d_model < 2 || d_model % 2 != 0)
            throw std::invalid_argument("config: d_model must be even and >= 2");
        if (rm_blocks < 1 || rcim_stages < 1 || rmim_blocks < 1)
            throw std::invalid_argument("config: block counts must be >= 1");
        if (state_n < 1 || patch_size < 1 || expansion < 1 || mc_samples < 1)
            throw std::invalid_argument("config: sizes must be >= 1");
        if (c_ms < 1 || scale < 1) throw std::invalid_argument("config: c_ms/scale must be >= 1");
    }

    static NetworkConfig from_map(const ConfigMap& m) {
        NetworkConfig c;
        c.d_model = cfg_i64(m, "d_model");
        c.state_n = cfg_i64(m, "state_n");
        c.rm_blocks = cfg_i64(m, "rm_blocks");
        c.rcim_stages = cfg_i64(m, "rcim_stages");
        c.rmim_blocks = cfg_i64(m, "rmim_blocks");
        c.patch_size = cfg_i64(m, "patch_size");
        c.expansion = cfg_i64(m, "expansion");
        c.mc_samples = cfg_i64(m, "mc_samples");
        c.seed = static_cast<std::uint64_t>(cfg_i64(m, "seed"));
        const std::string pm = cfg_str_or(m, "perm_mode", "per_block");
        if (pm == "per_block") c.perm_mode = PermMode::PerBlock;
        else if (pm == "shared") c.perm_mode = PermMode::Shared;
        else throw std::runtime_error("config key perm_mode must be per_block or shared");
        c.pos_conv_first = cfg_bool_or(m, "pos_conv_first", true);
        c.c_ms = cfg_i64(m, "c_ms");
        c.scale = cfg_i64(m, "scale");
        c.stem_kernel = cfg_i64_or(m, "stem_kernel", 3);
        c.head_kernel = cfg_i64_or(m, "head_kernel", 3);
        c.pos_kernel = cfg_i64_or(m, "pos_kernel", 3);
        c.conv_kernel = cfg_i64_or(m, "conv_kernel", 3);
        c.validate();
        return c;
    }

    ConfigMap to_map() const {
        ConfigMap m;
        m["d_model"] = std::to_string(d_model);
        m["state_n"] = std::to_string(state_n);
        m["rm_blocks"] = std::to_string(rm_blocks);
        m["rcim_stages"] = std::to_string(rcim_stages);
        m["rmim_blocks"] = std::to_string(rmim_blocks);
        m["patch_size"] = std::to_string(patch_size);
        m["expansion"] = std::to_string(expansion);
        m["mc_samples"] = std::to_string(mc_samples);
        m["seed"] = std::to_string(seed);
        m["perm_mode"] = perm_mode == PermMode::PerBlock ? "per_block" : "shared";
        m["pos_conv_first"] = pos_conv_first ? "1" : "0";
        m["c_ms"] = std::to_string(c_ms);
        m["scale"] = std::to_string(scale);
        m["stem_kernel"] = std::to_string(stem_kernel);
        m["head_kernel"] = std::to_string(head_kernel);
        m["pos_kernel"] = std::to_string(pos_kernel);
        m["conv_kernel"] = std::to_string(conv_kernel);
        return m;
    }
};

// One reduced-resolution training/eval sample. All channels in [0,1];
// full size is scale * low size.
struct Sample {
    Tensor m_in;  // [C_ms, h, w] low-resolution multi-spectral
    Tensor m_up;  // [C_ms, H, W] bicubic-upsampled m_in
    Tensor p_in;  // [1, H, W] panchromatic
    Tensor gt;    // [C_ms, H, W] ground truth

    void validate(std::int64_t scale) const {
        if (m_in.rank() != 3 || m_up.rank() != 3 || p_in.rank() != 3 || gt.rank() != 3)
            throw std::invalid_argument("sample: all images must be [C,H,W]");
        if (gt.shape != m_up.shape) throw std::invalid_argument("sample: gt/m_up shape mismatch");
        if (p_in.shape[0] != 1 || p_in.shape[1] != gt.shape[1] || p_in.shape[2] != gt.shape[2])
            throw std::invalid_argument("sample: pan must be [1,H,W]");
        if (m_in.shape[0] != gt.shape[0] || m_in.shape[1] * scale != gt.shape[1] ||
            m_in.shape[2] * scale != gt.shape[2])
            throw std::invalid_argument("sample: low-res shape inconsistent with scale");
    }
};

struct FusionNet {
    NetworkConfig cfg;
    ParamRegistry reg;
    Var stem_m_w, stem_m_b, stem_p_w, stem_p_b;
    Var embed_m_w, embed_m_b, embed_p_w, embed_p_b;
    std::vector<BlockParams> rm_m, rm_p;
    std::vector<std::pair<BlockParams, BlockParams>> rcim;
    std::vector<RmimParams> rmim;
    Var unembed_w, unembed_b;
    Var head_w, head_b;

    // zero_residual_init keeps every residual branch and the head at zero,
    // so the freshly built network is the identity on m_up.
    static FusionNet create(const NetworkConfig& cfg, RngStream init_rng,
                            bool zero_residual_init = true) {
        cfg.validate();
        FusionNet net;
        net.cfg = cfg;
        const std::int64_t d = cfg.d_model;
        const std::int64_t pe = cfg.c_ms * cfg.patch_size * cfg.patch_size;
        const BlockDims dims = cfg.block_dims();
        auto& reg = net.reg;

        net.stem_m_w = reg.add("stem_m.w",
                               init::uniform_fan_in({d, cfg.c_ms, cfg.stem_kernel, cfg.stem_kernel},
                                                    cfg.c_ms * cfg.stem_kernel * cfg.stem_kernel,
                                                    init_rng));
        net.stem_m_b = reg.add("stem_m.b", Tensor({d}, 0.0));
        net.stem_p_w = reg.add("stem_p.w",
                               init::uniform_fan_in({d, 1, cfg.stem_kernel, cfg.stem_kernel},
                                                    cfg.stem_kernel * cfg.stem_kernel, init_rng));
        net.stem_p_b = reg.add("stem_p.b", Tensor({d}, 0.0));

        const std::int64_t embed_in = d * cfg.patch_size * cfg.patch_size;
        net.embed_m_w = reg.add("embed_m.w", init::uniform_fan_in({embed_in, d}, embed_in, init_rng));
        net.embed_m_b = reg.add("embed_m.b", Tensor({d}, 0.0));
        net.embed_p_w = reg.add("embed_p.w", init::uniform_fan_in({embed_in, d}, embed_in, init_rng));
        net.embed_p_b = reg.add("embed_p.b", Tensor({d}, 0.0));

        for (std::int64_t i = 0; i < cfg.rm_blocks; ++i) {
            net.rm_m.push_back(BlockParams::create(reg, "m." + std::to_string(i), dims, init_rng,
                                                   zero_residual_init));
            net.rm_p.push_back(BlockParams::create(reg, "p." + std::to_string(i), dims, init_rng,
                                                   zero_residual_init));
        }
        for (std::int64_t i = 0; i < cfg.rcim_stages; ++i) {
            net.rcim.emplace_back(
                BlockParams::create(reg, "rcim_m." + std::to_string(i), dims, init_rng,
                                    zero_residual_init),
                BlockParams::create(reg, "rcim_p." + std::to_string(i), dims, init_rng,
                                    zero_residual_init));
        }
        for (std::int64_t i = 0; i < cfg.rmim_blocks; ++i)
            net.rmim.push_back(RmimParams::create(reg, "rmim." + std::to_string(i), dims, init_rng,
                                                  zero_residual_init));

        net.unembed_w = reg.add("unembed.w", init::uniform_fan_in({d, embed_in}, d, init_rng));
        net.unembed_b = reg.add("unembed.b", Tensor({embed_in}, 0.0));
        net.head_w = reg.add("head.w",
                             zero_residual_init
                                 ? Tensor({cfg.c_ms, d, cfg.head_kernel, cfg.head_kernel}, 0.0)
                                 : init::uniform_fan_in({cfg.c_ms, d, cfg.head_kernel,
                                                         cfg.head_kernel},
                                                        d * cfg.head_kernel * cfg.head_kernel,
                                                        init_rng));
        net.head_b = reg.add("head.b", Tensor({cfg.c_ms}, 0.0));
        return net;
    }

    static FusionNet from_values(const NetworkConfig& cfg, const std::map<std::string, Tensor>& values) {
        FusionNet net = create(cfg, RngStream(0, 0), false);
        net.reg.load_values(values);
        return net;
    }
};

// Supplies one permutation per block invocation. PerBlock draws fresh ones;
// Shared reuses a single draw per forward; Identity gives the raster
// (fixed-scan) baseline.
class PermSource {
public:
    static PermSource fresh(RngStream stream) { return PermSource(Kind::Fresh, stream); }
    static PermSource shared_draw(RngStream stream) { return PermSource(Kind::Shared, stream); }
    static PermSource identity() { return PermSource(Kind::Identity, RngStream(0, 0)); }
    static PermSource for_mode(PermMode mode, RngStream stream) {
        return mode == PermMode::PerBlock ? fresh(stream) : shared_draw(stream);
    }

    Permutation next(std::int64_t length) {
        switch (kind_) {
        case Kind::Identity:
            return Permutation::identity(length);
        case Kind::Fresh:
            return sample_permutation(stream_, length);
        case Kind::Shared:
            if (!have_cached_ || cached_.size() != length) {
                cached_ = sample_permutation(stream_, length);
                have_cached_ = true;
            }
            return cached_;
        }
        throw std::logic_error("unreachable");
    }

private:
    enum class Kind { Fresh, Shared, Identity };
    PermSource(Kind k, RngStream s) : kind_(k), stream_(s) {}
    Kind kind_;
    RngStream stream_;
    Permutation cached_;
    bool have_cached_ = false;
};

// Full forward pass: stems, patch embed, rm chains, rcim stages, rmim
// chain, residual reconstruction. per_block_samples > 1 averages every
// shuffle-bearing block over that many fresh permutations (the layered-
// expectation mode); 1 is a plain stochastic forward.
inline Var fusion_forward(const FusionNet& net, const Var& m_up, const Var& p_in,
                          PermSource& perms, std::int64_t per_block_samples = 1) {
    if (m_up->value.rank() != 3 || p_in->value.rank() != 3)
        throw std::invalid_argument("fusion_forward: inputs must be [C,H,W]");
    if (m_up->value.shape[0] != net.cfg.c_ms)
        throw std::invalid_argument("fusion_forward: m_up channel count != c_ms");
    if (p_in->value.shape[0] != 1 || p_in->value.shape[1] != m_up->value.shape[1] ||
        p_in->value.shape[2] != m_up->value.shape[2])
        throw std::invalid_argument("fusion_forward: pan must be [1,H,W] matching m_up");
    if (per_block_samples < 1)
        throw std::invalid_argument("fusion_forward: per_block_samples must be >= 1");

    auto averaged = [&](const std::function<Var(const Permutation&)>& run, std::int64_t length) {
        if (per_block_samples == 1) return run(perms.next(length));
        Var acc = run(perms.next(length));
        for (std::int64_t s = 1; s < per_block_samples; ++s)
            acc = add(acc, run(perms.next(length)));
        return scale(acc, 1.0 / static_cast<double>(per_block_samples));
    };
    auto run_rm = [&](const PatchGrid& g, const BlockParams& p) {
        PatchGrid out = g;
        out.tokens = averaged([&](const Permutation& perm) { return rm_block(g, p, perm).tokens; },
                              g.length());
        return out;
    };
    auto run_rmim = [&](const PatchGrid& gm, const PatchGrid& gp, const RmimParams& p) {
        PatchGrid out = gm;
        out.tokens = averaged(
            [&](const Permutation& perm) { return rmim_block(gm, gp, p, perm).tokens; },
            gm.length());
        return out;
    };

    Var zm = conv2d(m_up, net.stem_m_w, net.stem_m_b);
    Var zp = conv2d(p_in, net.stem_p_w, net.stem_p_b);
    PatchGrid gm = patch_embed(zm, net.cfg.patch_size, net.embed_m_w, net.embed_m_b);
    PatchGrid gp = patch_embed(zp, net.cfg.patch_size, net.embed_p_w, net.embed_p_b);

    for (std::size_t i = 0; i < net.rm_m.size(); ++i) {
        gm = run_rm(gm, net.rm_m[i]);
        gp = run_rm(gp, net.rm_p[i]);
    }
    for (const auto& [pm, pp] : net.rcim) {
        auto [sm, sp] = rcim_swap(gm.tokens, gp.tokens);
        PatchGrid swapped_m = gm, swapped_p = gp;
        swapped_m.tokens = sm;
        swapped_p.tokens = sp;
        gm = run_rm(swapped_m, pm);
        gp = run_rm(swapped_p, pp);
    }
    for (const auto& p : net.rmim) gm = run_rmim(gm, gp, p);

    Var u = unpatch(gm, net.unembed_w, net.unembed_b, net.cfg.d_model);
    Var head = conv2d(u, net.head_w, net.head_b);
    return add(head, m_up);
}

// One stochastic forward under the run's shuffle stream; wraps input
// tensors and routes permutation draws per the config's sharing mode.
inline Tensor forward_once(const FusionNet& net, const Sample& sample, RngStream shuffle_stream,
                           std::int64_t per_block_samples = 1) {
    NoGradGuard ng;
    PermSource perms = PermSource::for_mode(net.cfg.perm_mode, shuffle_stream);
    Var out = fusion_forward(net, constant(sample.m_up), constant(sample.p_in), perms,
                             per_block_samples);
    return out->value;
}

// ---------------------------------------------------------------------------
// checkpointing

inline void save_checkpoint(const std::string& path, const FusionNet& net, std::int64_t step) {
    TensorMap entries = net.reg.values();
    entries["__step__"] = Tensor({1}, {static_cast<double>(step)});
    save_container(path, entries);
}

struct Checkpoint {
    TensorMap values;
    std::int64_t step = 0;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    Checkpoint ck;
    ck.values = load_container(path);
    auto it = ck.values.find("__step__");
    if (it != ck.values.end()) {
        ck.step = static_cast<std::int64_t>(it->second.data.at(0));
        ck.values.erase(it);
    }
    return ck;
}

} // namespace smamba
