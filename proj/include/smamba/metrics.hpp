#pragma once

// Reference fusion metrics. The SSIM here reuses the differentiable
// implementation under a no-grad guard; the acceptance suite checks all
// four against independent brute-force routes.

#include "smamba/losses.hpp"
#include "smamba/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace smamba {

struct MetricReport {
    double psnr = 0.0;
    bool identical = false; // MSE == 0; psnr is +inf then
    double ssim = 0.0;
    double sam = 0.0;   // radians, [0, pi]
    double ergas = 0.0;
};

inline double mse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mse");
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        s += d * d;
    }
    return s / static_cast<double>(a.numel());
}

inline double psnr(const Tensor& a, const Tensor& b, double peak = 1.0) {
    const double m = mse(a, b);
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / m);
}

inline double ssim_metric(const Tensor& a, const Tensor& b, double peak = 1.0,
                          std::int64_t window = 11, double sigma = 1.5) {
    NoGradGuard ng;
    return ssim(constant(a), constant(b), peak, window, sigma)->value.data[0];
}

// Mean spectral angle between per-pixel band vectors; pixels where either
// vector is zero are skipped.
inline double sam(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sam");
    if (a.rank() != 3 || a.shape[0] < 2)
        throw std::invalid_argument("sam: expects [C,H,W] with C >= 2");
    const std::int64_t c = a.shape[0], hw = a.shape[1] * a.shape[2];
    double total = 0.0;
    std::int64_t counted = 0;
    for (std::int64_t p = 0; p < hw; ++p) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const double va = a.data[static_cast<std::size_t>(ch * hw + p)];
            const double vb = b.data[static_cast<std::size_t>(ch * hw + p)];
            dot += va * vb;
            na += va * va;
            nb += vb * vb;
        }
        if (na == 0.0 || nb == 0.0) continue;
        double cosv = dot / (std::sqrt(na) * std::sqrt(nb));
        cosv = std::max(-1.0, std::min(1.0, cosv));
        total += std::acos(cosv);
        ++counted;
    }
    return counted > 0 ? total / static_cast<double>(counted) : 0.0;
}

// Relative dimensionless global error; band means come from the reference.
inline double ergas(const Tensor& fused, const Tensor& reference, std::int64_t ratio) {
    require_same_shape(fused, reference, "ergas");
    if (fused.rank() != 3) throw std::invalid_argument("ergas: expects [C,H,W]");
    if (ratio < 1) throw std::invalid_argument("ergas: ratio must be >= 1");
    const std::int64_t c = fused.shape[0], hw = fused.shape[1] * fused.shape[2];
    double acc = 0.0;
    for (std::int64_t ch = 0; ch < c; ++ch) {
        double mean_ref = 0.0, se = 0.0;
        for (std::int64_t p = 0; p < hw; ++p) {
            const double r = reference.data[static_cast<std::size_t>(ch * hw + p)];
            const double d = fused.data[static_cast<std::size_t>(ch * hw + p)] - r;
            mean_ref += r;
            se += d * d;
        }
        mean_ref /= static_cast<double>(hw);
        if (mean_ref == 0.0)
            throw std::invalid_argument("ergas: zero-mean band " + std::to_string(ch));
        const double rmse = std::sqrt(se / static_cast<double>(hw));
        acc += (rmse / mean_ref) * (rmse / mean_ref);
    }
    return 100.0 / static_cast<double>(ratio) * std::sqrt(acc / static_cast<double>(c));
}

inline MetricReport compute_metrics(const Tensor& fused, const Tensor& reference,
                                    std::int64_t ratio, double peak = 1.0) {
    MetricReport r;
    r.psnr = psnr(fused, reference, peak);
    r.identical = std::isinf(r.psnr);
    r.ssim = ssim_metric(fused, reference, peak);
    r.sam = fused.shape[0] >= 2 ? sam(fused, reference) : 0.0;
    r.ergas = ergas(fused, reference, ratio);
    return r;
}

inline std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

// Fixed column order used by every metrics CSV this project writes.
inline void write_metrics_csv_header(std::ostream& os) {
    os << "image_id,psnr,ssim,sam,ergas\n";
}

inline void write_metrics_csv_row(std::ostream& os, const std::string& image_id,
                                  const MetricReport& r) {
    os << image_id << "," << (r.identical ? std::string("inf") : fmt_g(r.psnr)) << ","
       << fmt_g(r.ssim) << "," << fmt_g(r.sam) << "," << fmt_g(r.ergas) << "\n";
}

} // namespace smamba
