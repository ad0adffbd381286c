#pragma once

// State-space scan kernels: continuous -> discrete parameter transform,
// the sequential recurrence, the equivalent global-convolution form for
// time-invariant parameters, and the input-dependent (selective) scan the
// fusion blocks run on.

#include "smamba/autodiff.hpp"
#include "smamba/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace smamba {

// Diagonal continuous-time system. delta holds one entry (time-invariant)
// or one per token (selective); only the time-invariant case discretizes
// to a DiscreteSSM / convolution kernel.
struct SSMParams {
    std::vector<double> A;     // diagonal of the evolution matrix, N entries
    std::vector<double> B;     // input projection, N entries
    std::vector<double> C;     // output projection, N entries
    std::vector<double> delta; // size 1 (LTI) or L (selective)

    std::size_t state_size() const { return A.size(); }
    bool is_lti() const { return delta.size() == 1; }
};

struct DiscreteSSM {
    std::vector<double> A_bar;
    std::vector<double> B_bar;
    std::vector<double> C;
};

struct ScanKernel {
    std::vector<double> K_bar; // K_bar[t] = C A_bar^t B_bar
};

// Zero-order-hold transform: A_bar = exp(dA), B_bar = (dA)^{-1}(exp(dA)-1) dB
// per diagonal entry. |dA| below the switch point takes the series limit
// dB (removable singularity; A_i == 0 lands here by design).
inline DiscreteSSM discretize(const SSMParams& p) {
    if (!p.is_lti())
        throw std::invalid_argument("discretize: per-token delta has no single discrete form");
    const double dt = p.delta[0];
    if (!(dt > 0.0)) throw std::invalid_argument("discretize: delta must be positive, got " +
                                                 std::to_string(dt));
    if (p.B.size() != p.A.size() || p.C.size() != p.A.size())
        throw std::invalid_argument("discretize: A/B/C length mismatch");
    DiscreteSSM d;
    d.A_bar.resize(p.A.size());
    d.B_bar.resize(p.A.size());
    d.C = p.C;
    for (std::size_t i = 0; i < p.A.size(); ++i) {
        const double da = dt * p.A[i];
        d.A_bar[i] = std::exp(da);
        if (std::abs(da) < 1e-6) {
            d.B_bar[i] = dt * p.B[i];
        } else {
            d.B_bar[i] = (std::exp(da) - 1.0) / da * dt * p.B[i];
        }
    }
    return d;
}

// h_t = A_bar h_{t-1} + B_bar x_t, y_t = C h_t, h_{-1} = 0.
inline Tensor scan_recurrent(const DiscreteSSM& d, const Tensor& x) {
    if (x.rank() != 1) throw std::invalid_argument("scan_recurrent: x must be rank-1, got " +
                                                   shape_str(x.shape));
    const std::int64_t L = x.shape[0];
    const std::size_t N = d.A_bar.size();
    Tensor y({L});
    std::vector<double> h(N, 0.0);
    for (std::int64_t t = 0; t < L; ++t) {
        double yt = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
            h[n] = d.A_bar[n] * h[n] + d.B_bar[n] * x.at(t);
            yt += d.C[n] * h[n];
        }
        y.at(t) = yt;
    }
    return y;
}

// Differentiable in x; the reverse pass runs the adjoint recurrence.
inline Var scan_recurrent(const DiscreteSSM& d, const Var& x) {
    Tensor y = scan_recurrent(d, x->value);
    const std::int64_t L = x->value.shape[0];
    return detail::make_op(std::move(y), {x}, [x, d, L](Node& self) {
        const std::size_t N = d.A_bar.size();
        auto& gx = x->grad_buf().data;
        std::vector<double> hbar(N, 0.0);
        for (std::int64_t t = L - 1; t >= 0; --t) {
            const double gy = self.grad.data[static_cast<std::size_t>(t)];
            double s = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                hbar[n] = (t == L - 1 ? 0.0 : d.A_bar[n] * hbar[n]) + d.C[n] * gy;
                s += hbar[n] * d.B_bar[n];
            }
            gx[static_cast<std::size_t>(t)] += s;
        }
    });
}

inline ScanKernel scan_kernel(const DiscreteSSM& d, std::int64_t L) {
    ScanKernel k;
    k.K_bar.resize(static_cast<std::size_t>(L));
    std::vector<double> apow(d.A_bar.size(), 1.0); // A_bar^t, elementwise
    for (std::int64_t t = 0; t < L; ++t) {
        double v = 0.0;
        for (std::size_t n = 0; n < d.A_bar.size(); ++n) {
            v += d.C[n] * apow[n] * d.B_bar[n];
            apow[n] *= d.A_bar[n];
        }
        k.K_bar[static_cast<std::size_t>(t)] = v;
    }
    return k;
}

// Global-convolution form of the same system: y = x (*) K_bar, causal.
// Only defined for time-invariant parameters.
inline Tensor scan_conv(const SSMParams& p, const Tensor& x) {
    if (!p.is_lti())
        throw std::invalid_argument(
            "scan_conv: selective (per-token delta) systems have no convolution form");
    if (x.rank() != 1) throw std::invalid_argument("scan_conv: x must be rank-1");
    const std::int64_t L = x.shape[0];
    const ScanKernel k = scan_kernel(discretize(p), L);
    Tensor y({L});
    for (std::int64_t t = 0; t < L; ++t) {
        double s = 0.0;
        for (std::int64_t u = 0; u <= t; ++u) s += k.K_bar[static_cast<std::size_t>(u)] * x.at(t - u);
        y.at(t) = s;
    }
    return y;
}

// ---------------------------------------------------------------------------
// selective scan

// Input-dependent scan over tokens. Shapes: x, delta [L,D]; B_seq, C_seq
// [L,N] (shared across channels); A [D,N] diagonal per channel; d_skip [D].
// Simplified zero-order hold on the input side: B_bar_t = delta_t * B_t.
//
//   h_t = exp(delta_t A) h_{t-1} + delta_t B_t x_t
//   y_t = C_t h_t + d_skip x_t
//
// One node in the graph; backward is the hand-written adjoint recurrence.
inline Var selective_scan(const Var& x, const Var& delta, const Var& b_seq, const Var& c_seq,
                          const Var& a, const Var& d_skip) {
    const Shape& sx = x->value.shape;
    if (sx.size() != 2) throw std::invalid_argument("selective_scan: x must be [L,D]");
    const std::int64_t L = sx[0], D = sx[1];
    if (delta->value.shape != sx)
        throw std::invalid_argument("selective_scan: delta shape " + shape_str(delta->value.shape) +
                                    " != x shape " + shape_str(sx));
    if (a->value.rank() != 2 || a->value.shape[0] != D)
        throw std::invalid_argument("selective_scan: A must be [D,N]");
    const std::int64_t N = a->value.shape[1];
    if (b_seq->value.shape != Shape{L, N} || c_seq->value.shape != Shape{L, N})
        throw std::invalid_argument("selective_scan: B/C sequences must be [L,N]");
    if (d_skip->value.shape != Shape{D})
        throw std::invalid_argument("selective_scan: d_skip must be [D]");

    for (std::int64_t t = 0; t < L; ++t)
        for (std::int64_t dch = 0; dch < D; ++dch)
            if (!std::isfinite(delta->value.at2(t, dch)))
                throw NumericError("selective_scan: non-finite delta at token " +
                                    std::to_string(t));

    Tensor y({L, D});
    Tensor h({L, D, N});     // saved states, consumed by backward
    Tensor abar({L, D, N});  // saved discrete decay factors
    const double* xv = x->value.data.data();
    const double* dv = delta->value.data.data();
    const double* bv = b_seq->value.data.data();
    const double* cv = c_seq->value.data.data();
    const double* av = a->value.data.data();
    const double* skipv = d_skip->value.data.data();
    for (std::int64_t t = 0; t < L; ++t) {
        const double* brow = bv + t * N;
        const double* crow = cv + t * N;
        for (std::int64_t dch = 0; dch < D; ++dch) {
            const double dt = dv[t * D + dch];
            const double xt = xv[t * D + dch];
            const double* arow = av + dch * N;
            const double* hprev = t > 0 ? h.data.data() + ((t - 1) * D + dch) * N : nullptr;
            double* hrow = h.data.data() + (t * D + dch) * N;
            double* abrow = abar.data.data() + (t * D + dch) * N;
            double yt = skipv[dch] * xt;
            for (std::int64_t n = 0; n < N; ++n) {
                const double ab = std::exp(dt * arow[n]);
                abrow[n] = ab;
                const double hn = (hprev ? ab * hprev[n] : 0.0) + dt * brow[n] * xt;
                hrow[n] = hn;
                yt += crow[n] * hn;
            }
            y.data[static_cast<std::size_t>(t * D + dch)] = yt;
        }
    }

    return detail::make_op(std::move(y), {x, delta, b_seq, c_seq, a, d_skip},
                           [x, delta, b_seq, c_seq, a, d_skip, L, D, N, h = std::move(h),
                            abar = std::move(abar)](Node& self) {
        const double* g = self.grad.data.data();
        const double* xv = x->value.data.data();
        const double* dv = delta->value.data.data();
        const double* bv = b_seq->value.data.data();
        const double* cv = c_seq->value.data.data();
        const double* av = a->value.data.data();
        const double* skipv = d_skip->value.data.data();

        double* gx = x->requires_grad ? x->grad_buf().data.data() : nullptr;
        double* gdelta = delta->requires_grad ? delta->grad_buf().data.data() : nullptr;
        double* gb = b_seq->requires_grad ? b_seq->grad_buf().data.data() : nullptr;
        double* gc = c_seq->requires_grad ? c_seq->grad_buf().data.data() : nullptr;
        double* ga = a->requires_grad ? a->grad_buf().data.data() : nullptr;
        double* gskip = d_skip->requires_grad ? d_skip->grad_buf().data.data() : nullptr;

        std::vector<double> hbar(static_cast<std::size_t>(D * N), 0.0);
        for (std::int64_t t = L - 1; t >= 0; --t) {
            const double* brow = bv + t * N;
            const double* crow = cv + t * N;
            for (std::int64_t dch = 0; dch < D; ++dch) {
                const double gy = g[t * D + dch];
                const double dt = dv[t * D + dch];
                const double xt = xv[t * D + dch];
                const double* arow = av + dch * N;
                const double* hrow = h.data.data() + (t * D + dch) * N;
                const double* hprev = t > 0 ? h.data.data() + ((t - 1) * D + dch) * N : nullptr;
                const double* abrow = abar.data.data() + (t * D + dch) * N;
                const double* abnext = t < L - 1 ? abar.data.data() + ((t + 1) * D + dch) * N : nullptr;
                double* hb = hbar.data() + dch * N;

                if (gskip) gskip[dch] += gy * xt;
                double gx_acc = skipv[dch] * gy;
                double gdt_acc = 0.0;
                for (std::int64_t n = 0; n < N; ++n) {
                    if (gc) gc[t * N + n] += gy * hrow[n];
                    hb[n] = (abnext ? abnext[n] * hb[n] : 0.0) + crow[n] * gy;
                    const double hbn = hb[n];
                    const double hp = hprev ? hprev[n] : 0.0;
                    // through A_bar = exp(dt * A)
                    const double through_decay = hbn * hp * abrow[n];
                    if (ga) ga[dch * N + n] += through_decay * dt;
                    gdt_acc += through_decay * arow[n];
                    // through B_bar x = dt * B * x
                    gdt_acc += hbn * brow[n] * xt;
                    if (gb) gb[t * N + n] += hbn * dt * xt;
                    gx_acc += hbn * dt * brow[n];
                }
                if (gdelta) gdelta[t * D + dch] += gdt_acc;
                if (gx) gx[t * D + dch] += gx_acc;
            }
        }
    });
}

// Default stable initialization for the diagonal state matrix: a negative
// integer ramp over the state index, shared layout [D,N].
inline Tensor make_state_matrix(std::int64_t d, std::int64_t n) {
    Tensor a({d, n});
    for (std::int64_t i = 0; i < d; ++i)
        for (std::int64_t j = 0; j < n; ++j) a.at2(i, j) = -static_cast<double>(j + 1);
    return a;
}

} // namespace smamba
