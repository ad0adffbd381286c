#pragma once

// Reduced-resolution sample synthesis: the original image is the ground
// truth, the low-resolution input is blur + decimate, the upsample is
// bicubic, and the panchromatic input is a band-weighted sum. Plus the
// synthetic image generator the fixture sets come from, and the on-disk
// dataset layout.

#include "smamba/net.hpp"
#include "smamba/rng.hpp"
#include "smamba/tensor.hpp"
#include "smamba/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace smamba {

namespace detail {

inline std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - i - 1;
    }
    return i;
}

inline std::vector<double> gaussian_taps(double sigma) {
    const std::int64_t radius = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(3.0 * sigma)));
    std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
    double norm = 0.0;
    for (std::int64_t i = -radius; i <= radius; ++i) {
        const double v = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
        taps[static_cast<std::size_t>(i + radius)] = v;
        norm += v;
    }
    for (auto& v : taps) v /= norm;
    return taps;
}

// Catmull-Rom weights (a = -1/2).
inline double cubic_weight(double t) {
    const double a = -0.5;
    t = std::abs(t);
    if (t <= 1.0) return (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0;
    if (t < 2.0) return a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a;
    return 0.0;
}

} // namespace detail

// Separable Gaussian blur with reflect padding (constants stay constant).
inline Tensor gaussian_blur(const Tensor& x, double sigma) {
    if (x.rank() != 3) throw std::invalid_argument("gaussian_blur: expects [C,H,W]");
    if (sigma <= 0.0) return x;
    const auto taps = detail::gaussian_taps(sigma);
    const std::int64_t r = static_cast<std::int64_t>(taps.size() / 2);
    const std::int64_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
    Tensor tmp(x.shape), out(x.shape);
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t xx = 0; xx < w; ++xx) {
                double s = 0.0;
                for (std::int64_t k = -r; k <= r; ++k)
                    s += taps[static_cast<std::size_t>(k + r)] *
                         x.at3(ch, y, detail::reflect_index(xx + k, w));
                tmp.at3(ch, y, xx) = s;
            }
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t xx = 0; xx < w; ++xx) {
                double s = 0.0;
                for (std::int64_t k = -r; k <= r; ++k)
                    s += taps[static_cast<std::size_t>(k + r)] *
                         tmp.at3(ch, detail::reflect_index(y + k, h), xx);
                out.at3(ch, y, xx) = s;
            }
    return out;
}

inline Tensor decimate(const Tensor& x, std::int64_t r) {
    if (x.rank() != 3) throw std::invalid_argument("decimate: expects [C,H,W]");
    const std::int64_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
    if (h % r != 0 || w % r != 0)
        throw std::invalid_argument("decimate: dims " + shape_str(x.shape) +
                                    " not divisible by " + std::to_string(r));
    const std::int64_t off = r / 2;
    Tensor out({c, h / r, w / r});
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < h / r; ++y)
            for (std::int64_t xx = 0; xx < w / r; ++xx)
                out.at3(ch, y, xx) = x.at3(ch, y * r + off, xx * r + off);
    return out;
}

// Catmull-Rom bicubic, half-pixel center alignment, clamped borders.
inline Tensor bicubic_upsample(const Tensor& x, std::int64_t r) {
    if (x.rank() != 3) throw std::invalid_argument("bicubic_upsample: expects [C,H,W]");
    const std::int64_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
    const std::int64_t ho = h * r, wo = w * r;
    Tensor out({c, ho, wo});
    auto clampi = [](std::int64_t i, std::int64_t n) { return std::max<std::int64_t>(0, std::min(n - 1, i)); };
    for (std::int64_t y = 0; y < ho; ++y) {
        const double sy = (static_cast<double>(y) + 0.5) / static_cast<double>(r) - 0.5;
        const std::int64_t y0 = static_cast<std::int64_t>(std::floor(sy));
        for (std::int64_t xx = 0; xx < wo; ++xx) {
            const double sx = (static_cast<double>(xx) + 0.5) / static_cast<double>(r) - 0.5;
            const std::int64_t x0 = static_cast<std::int64_t>(std::floor(sx));
            double wy[4], wx[4];
            for (int k = 0; k < 4; ++k) {
                wy[k] = detail::cubic_weight(sy - static_cast<double>(y0 - 1 + k));
                wx[k] = detail::cubic_weight(sx - static_cast<double>(x0 - 1 + k));
            }
            for (std::int64_t ch = 0; ch < c; ++ch) {
                double s = 0.0;
                for (int ky = 0; ky < 4; ++ky)
                    for (int kx = 0; kx < 4; ++kx)
                        s += wy[ky] * wx[kx] *
                             x.at3(ch, clampi(y0 - 1 + ky, h), clampi(x0 - 1 + kx, w));
                out.at3(ch, y, xx) = s;
            }
        }
    }
    return out;
}

inline Tensor pan_from_bands(const Tensor& gt, const std::vector<double>& band_weights) {
    if (gt.rank() != 3) throw std::invalid_argument("pan_from_bands: expects [C,H,W]");
    const std::int64_t c = gt.shape[0], hw = gt.shape[1] * gt.shape[2];
    if (static_cast<std::int64_t>(band_weights.size()) != c)
        throw std::invalid_argument("pan_from_bands: weight count != band count");
    double sum = 0.0;
    for (double w : band_weights) sum += w;
    if (std::abs(sum - 1.0) > 1e-9)
        throw std::invalid_argument("pan_from_bands: band weights must sum to 1");
    Tensor pan({1, gt.shape[1], gt.shape[2]});
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t p = 0; p < hw; ++p)
            pan.data[static_cast<std::size_t>(p)] +=
                band_weights[static_cast<std::size_t>(ch)] * gt.data[static_cast<std::size_t>(ch * hw + p)];
    return pan;
}

// The reduced-resolution protocol: gt = hr; low-res input = blur(sigma=r/2)
// then decimate; m_up = bicubic(low); pan = weighted band sum of gt.
inline Sample wald_generate(const Tensor& hr, std::int64_t scale,
                            const std::vector<double>& band_weights) {
    if (hr.rank() != 3) throw std::invalid_argument("wald_generate: expects [C,H,W]");
    if (hr.shape[1] % scale != 0 || hr.shape[2] % scale != 0)
        throw std::invalid_argument("wald_generate: dims " + shape_str(hr.shape) +
                                    " not divisible by scale " + std::to_string(scale));
    Sample s;
    s.gt = hr;
    s.m_in = decimate(gaussian_blur(hr, static_cast<double>(scale) / 2.0), scale);
    s.m_up = bicubic_upsample(s.m_in, scale);
    s.p_in = pan_from_bands(hr, band_weights);
    s.validate(scale);
    return s;
}

inline std::vector<double> equal_band_weights(std::int64_t c) {
    return std::vector<double>(static_cast<std::size_t>(c), 1.0 / static_cast<double>(c));
}

// Band-limited random field plus geometric primitives (rectangles, a
// gradient ramp), bands correlated through a shared luminance field so
// the pan input carries real information about every band.
inline Tensor make_synthetic_hr(std::int64_t c, std::int64_t h, std::int64_t w, RngStream& rng) {
    auto field = [&](std::int64_t max_cycles) {
        Tensor f({1, h, w});
        const int waves = 6;
        for (int k = 0; k < waves; ++k) {
            const double fy = (rng.uniform() * 2.0 - 1.0) * static_cast<double>(max_cycles);
            const double fx = (rng.uniform() * 2.0 - 1.0) * static_cast<double>(max_cycles);
            const double phase = rng.uniform() * 6.283185307179586;
            const double amp = 0.5 + rng.uniform();
            for (std::int64_t y = 0; y < h; ++y)
                for (std::int64_t xx = 0; xx < w; ++xx)
                    f.at3(0, y, xx) += amp * std::sin(6.283185307179586 *
                                                          (fy * y / static_cast<double>(h) +
                                                           fx * xx / static_cast<double>(w)) +
                                                      phase);
        }
        double lo = f.data[0], hi = f.data[0];
        for (double v : f.data) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        const double span = hi - lo > 1e-12 ? hi - lo : 1.0;
        for (auto& v : f.data) v = (v - lo) / span;
        return f;
    };

    Tensor common = field(3);
    // gradient ramp
    const double gdir = rng.uniform();
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t xx = 0; xx < w; ++xx)
            common.at3(0, y, xx) =
                0.8 * common.at3(0, y, xx) +
                0.2 * (gdir * y / static_cast<double>(h) + (1.0 - gdir) * xx / static_cast<double>(w));
    // rectangles give the pan branch sharp structure to transfer
    const int n_rects = 2 + static_cast<int>(rng.uniform_below(3));
    for (int i = 0; i < n_rects; ++i) {
        const std::int64_t ry = static_cast<std::int64_t>(rng.uniform_below(static_cast<std::uint64_t>(std::max<std::int64_t>(1, h - 4))));
        const std::int64_t rx = static_cast<std::int64_t>(rng.uniform_below(static_cast<std::uint64_t>(std::max<std::int64_t>(1, w - 4))));
        const std::int64_t rh = 3 + static_cast<std::int64_t>(rng.uniform_below(static_cast<std::uint64_t>(std::max<std::int64_t>(1, h / 3))));
        const std::int64_t rw = 3 + static_cast<std::int64_t>(rng.uniform_below(static_cast<std::uint64_t>(std::max<std::int64_t>(1, w / 3))));
        const double delta = (rng.uniform() - 0.5) * 0.6;
        for (std::int64_t y = ry; y < std::min(h, ry + rh); ++y)
            for (std::int64_t xx = rx; xx < std::min(w, rx + rw); ++xx)
                common.at3(0, y, xx) += delta;
    }

    Tensor out({c, h, w});
    for (std::int64_t ch = 0; ch < c; ++ch) {
        Tensor own = field(2);
        const double gain = 0.7 + 0.5 * rng.uniform();
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t xx = 0; xx < w; ++xx) {
                const double v = gain * (0.75 * common.at3(0, y, xx) + 0.25 * own.at3(0, y, xx));
                out.at3(ch, y, xx) = std::clamp(0.1 + 0.8 * v, 0.0, 1.0);
            }
    }
    return out;
}

// ---------------------------------------------------------------------------
// dataset directory layout: index.txt plus 4 tensor files per sample

inline void save_sample(const std::string& dir, const std::string& id, const Sample& s) {
    namespace fs = std::filesystem;
    save_tensor((fs::path(dir) / (id + "_gt.smt")).string(), s.gt);
    save_tensor((fs::path(dir) / (id + "_lrms.smt")).string(), s.m_in);
    save_tensor((fs::path(dir) / (id + "_msup.smt")).string(), s.m_up);
    save_tensor((fs::path(dir) / (id + "_pan.smt")).string(), s.p_in);
}

inline Sample load_sample(const std::string& dir, const std::string& id) {
    namespace fs = std::filesystem;
    Sample s;
    s.gt = load_tensor((fs::path(dir) / (id + "_gt.smt")).string());
    s.m_in = load_tensor((fs::path(dir) / (id + "_lrms.smt")).string());
    s.m_up = load_tensor((fs::path(dir) / (id + "_msup.smt")).string());
    s.p_in = load_tensor((fs::path(dir) / (id + "_pan.smt")).string());
    return s;
}

inline void save_index(const std::string& dir, const std::vector<std::string>& ids) {
    std::ofstream f((std::filesystem::path(dir) / "index.txt").string());
    if (!f) throw std::runtime_error("cannot write dataset index in " + dir);
    for (const auto& id : ids) f << id << "\n";
}

inline std::vector<std::string> load_index(const std::string& dir) {
    std::ifstream f((std::filesystem::path(dir) / "index.txt").string());
    if (!f) throw std::runtime_error("cannot read dataset index in " + dir);
    std::vector<std::string> ids;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) ids.push_back(line);
    return ids;
}

inline std::vector<Sample> load_dataset(const std::string& dir) {
    std::vector<Sample> out;
    for (const auto& id : load_index(dir)) out.push_back(load_sample(dir, id));
    return out;
}

} // namespace smamba
