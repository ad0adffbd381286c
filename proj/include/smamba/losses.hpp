#pragma once

// Training objectives: plain L1 for pan-sharpening, and the composite
// L1 + SSIM + gradient loss for modality fusion without ground truth.
// Everything here is differentiable.

#include "smamba/autodiff.hpp"
#include "smamba/tensor.hpp"

#include <cmath>
#include <stdexcept>

namespace smamba {

inline Var l1_loss(const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "l1_loss");
    return mean_all(abs_op(sub(a, b)));
}

namespace detail {

inline Tensor gaussian_window(std::int64_t channels, std::int64_t size, double sigma) {
    Tensor w({channels, size, size});
    const std::int64_t r = size / 2;
    double norm = 0.0;
    for (std::int64_t y = 0; y < size; ++y)
        for (std::int64_t x = 0; x < size; ++x) {
            const double dy = static_cast<double>(y - r), dx = static_cast<double>(x - r);
            const double v = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
            w.at3(0, y, x) = v;
            norm += v;
        }
    for (std::int64_t y = 0; y < size; ++y)
        for (std::int64_t x = 0; x < size; ++x) w.at3(0, y, x) /= norm;
    for (std::int64_t c = 1; c < channels; ++c)
        for (std::int64_t y = 0; y < size; ++y)
            for (std::int64_t x = 0; x < size; ++x) w.at3(c, y, x) = w.at3(0, y, x);
    return w;
}

} // namespace detail

// Mean structural similarity over fully interior windows (Gaussian 11x11,
// sigma 1.5 by default), averaged over channels. Differentiable; the local
// statistics come from depthwise convolutions with a fixed window.
inline Var ssim(const Var& a, const Var& b, double peak = 1.0, std::int64_t window = 11,
                double sigma = 1.5) {
    require_same_shape(a->value, b->value, "ssim");
    if (a->value.rank() != 3) throw std::invalid_argument("ssim: expects [C,H,W]");
    if (window <= 0 || window % 2 == 0)
        throw std::invalid_argument("ssim: window must be positive and odd");
    const std::int64_t c = a->value.shape[0], h = a->value.shape[1], w = a->value.shape[2];
    if (h < window || w < window)
        throw std::invalid_argument("ssim: image smaller than window");
    const double c1 = (0.01 * peak) * (0.01 * peak);
    const double c2 = (0.03 * peak) * (0.03 * peak);

    Var win = constant(detail::gaussian_window(c, window, sigma));
    auto blur = [&](const Var& x) { return depthwise_conv(x, win); };

    Var mu_a = blur(a), mu_b = blur(b);
    Var mu_aa = mul(mu_a, mu_a), mu_bb = mul(mu_b, mu_b), mu_ab = mul(mu_a, mu_b);
    Var var_a = sub(blur(mul(a, a)), mu_aa);
    Var var_b = sub(blur(mul(b, b)), mu_bb);
    Var cov = sub(blur(mul(a, b)), mu_ab);

    Var num = mul(add_const(scale(mu_ab, 2.0), c1), add_const(scale(cov, 2.0), c2));
    Var den = mul(add_const(add(mu_aa, mu_bb), c1), add_const(add(var_a, var_b), c2));
    Var ssim_map = div(num, den);
    return mean_all(crop_border(ssim_map, window / 2));
}

// Anisotropic Sobel gradient magnitude |gx| + |gy|, interior pixels only
// (zero padding corrupts border responses, so a one-pixel rim is dropped;
// a constant image then maps to exactly zero).
inline Var sobel_grad_mag(const Var& x) {
    if (x->value.rank() != 3) throw std::invalid_argument("sobel_grad_mag: expects [C,H,W]");
    const std::int64_t c = x->value.shape[0];
    Tensor kx({c, 3, 3}), ky({c, 3, 3});
    const double gx[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
    const double gy[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (int i = 0; i < 9; ++i) {
            kx.data[static_cast<std::size_t>(ch * 9 + i)] = gx[i];
            ky.data[static_cast<std::size_t>(ch * 9 + i)] = gy[i];
        }
    Var mag = add(abs_op(depthwise_conv(x, constant(kx))),
                  abs_op(depthwise_conv(x, constant(ky))));
    return crop_border(mag, 1);
}

// Mean absolute error against ground truth; the pan-sharpening objective.
inline Var loss_pansharpen(const Var& h_out, const Var& gt) { return l1_loss(h_out, gt); }

struct MifWeights {
    double w_l1 = 1.0;
    double w_ssim = 1.0;
    double w_grad = 1.0;
};

// Composite fusion objective against the two inputs: L1 to the elementwise
// max, SSIM to each input, Sobel-gradient L1 to the elementwise max of the
// input gradients.
inline Var loss_mif(const Var& fused, const Var& in_a, const Var& in_b,
                    const MifWeights& w = {}) {
    require_same_shape(fused->value, in_a->value, "loss_mif");
    require_same_shape(fused->value, in_b->value, "loss_mif");
    Var target = max_elem(in_a, in_b);
    Var term_l1 = l1_loss(fused, target);
    Var ssim_pair = scale(add(ssim(fused, in_a), ssim(fused, in_b)), 0.5);
    Var term_ssim = add_const(scale(ssim_pair, -1.0), 1.0);
    Var term_grad = l1_loss(sobel_grad_mag(fused),
                            max_elem(sobel_grad_mag(in_a), sobel_grad_mag(in_b)));
    return add(add(scale(term_l1, w.w_l1), scale(term_ssim, w.w_ssim)),
               scale(term_grad, w.w_grad));
}

} // namespace smamba
