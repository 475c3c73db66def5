#pragma once

// Image-quality metrics. PSNR follows the evaluation formula used for all
// reported numbers here,
//     PSNR(x, x*) = 10 log10( max(x .* x) / ||x - x*||_2^2 ),
// which divides by the total squared error rather than the mean;
// psnr_conventional provides the usual MSE-based variant for sanity
// checks. x is the reference (ground truth), x* the reconstruction.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "tomo/core.hpp"

namespace tomo {

struct MetricReport {
    double psnr = 0.0;  // dB
    double rmse = 0.0;
    double ssim = 0.0;
};

namespace detail {
inline void check_same_shape(const Image& a, const Image& b, const char* who) {
    if (a.width != b.width || a.height != b.height)
        throw std::invalid_argument(std::string(who) + ": shape mismatch");
}
}  // namespace detail

inline double psnr(const Image& reference, const Image& reconstruction) {
    detail::check_same_shape(reference, reconstruction, "psnr");
    double peak_sq = 0.0;
    for (double v : reference.values) peak_sq = std::max(peak_sq, v * v);
    if (peak_sq == 0.0) throw std::invalid_argument("psnr: all-zero reference");
    double err = 0.0;
    for (std::size_t i = 0; i < reference.values.size(); ++i) {
        const double d = reference.values[i] - reconstruction.values[i];
        err += d * d;
    }
    if (err == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak_sq / err);
}

inline double psnr_conventional(const Image& reference, const Image& reconstruction) {
    detail::check_same_shape(reference, reconstruction, "psnr");
    double peak_sq = 0.0;
    for (double v : reference.values) peak_sq = std::max(peak_sq, v * v);
    if (peak_sq == 0.0) throw std::invalid_argument("psnr: all-zero reference");
    double err = 0.0;
    for (std::size_t i = 0; i < reference.values.size(); ++i) {
        const double d = reference.values[i] - reconstruction.values[i];
        err += d * d;
    }
    if (err == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak_sq * static_cast<double>(reference.values.size()) / err);
}

inline double rmse(const Image& reference, const Image& reconstruction) {
    detail::check_same_shape(reference, reconstruction, "rmse");
    double err = 0.0;
    for (std::size_t i = 0; i < reference.values.size(); ++i) {
        const double d = reference.values[i] - reconstruction.values[i];
        err += d * d;
    }
    return std::sqrt(err / static_cast<double>(reference.values.size()));
}

// Mean local SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03.
// The dynamic range is taken over both images jointly, which equals the
// reference range in ordinary use and keeps ssim(a,b) = ssim(b,a) exactly.
// Window statistics are evaluated on the interior where the window fits.
inline double ssim(const Image& reference, const Image& reconstruction) {
    detail::check_same_shape(reference, reconstruction, "ssim");
    double lo = reference.values[0], hi = reference.values[0];
    for (double v : reference.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    for (double v : reconstruction.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double range = hi - lo;
    if (range == 0.0) {
        // Degenerate dynamic range: defined as 1 when the images agree.
        return reference.values == reconstruction.values ? 1.0 : 0.0;
    }

    constexpr int radius = 5;
    constexpr int win = 2 * radius + 1;
    double kernel[win];
    double ksum = 0.0;
    for (int i = 0; i < win; ++i) {
        const double d = i - radius;
        kernel[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
        ksum += kernel[i];
    }
    for (int i = 0; i < win; ++i) kernel[i] /= ksum;

    const int w = reference.width, h = reference.height;
    if (w < win || h < win)
        throw std::invalid_argument("ssim: image smaller than the 11x11 window");

    const double c1 = (0.01 * range) * (0.01 * range);
    const double c2 = (0.03 * range) * (0.03 * range);

    // Separable Gaussian filtering of the five moment images.
    auto blur = [&](const std::vector<double>& src) {
        std::vector<double> tmp(static_cast<std::size_t>(w) * h, 0.0);
        std::vector<double> out(static_cast<std::size_t>(w) * h, 0.0);
        for (int r = 0; r < h; ++r)
            for (int c = radius; c < w - radius; ++c) {
                double s = 0.0;
                for (int i = 0; i < win; ++i)
                    s += kernel[i] * src[static_cast<std::size_t>(r) * w + c - radius + i];
                tmp[static_cast<std::size_t>(r) * w + c] = s;
            }
        for (int r = radius; r < h - radius; ++r)
            for (int c = 0; c < w; ++c) {
                double s = 0.0;
                for (int i = 0; i < win; ++i)
                    s += kernel[i] * tmp[static_cast<std::size_t>(r - radius + i) * w + c];
                out[static_cast<std::size_t>(r) * w + c] = s;
            }
        return out;
    };

    const std::vector<double>& a = reference.values;
    const std::vector<double>& b = reconstruction.values;
    std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    std::vector<double> mu_a = blur(a), mu_b = blur(b);
    std::vector<double> m_aa = blur(aa), m_bb = blur(bb), m_ab = blur(ab);

    double total = 0.0;
    std::size_t count = 0;
    for (int r = radius; r < h - radius; ++r)
        for (int c = radius; c < w - radius; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * w + c;
            const double ma = mu_a[i], mb = mu_b[i];
            const double va = m_aa[i] - ma * ma;
            const double vb = m_bb[i] - mb * mb;
            const double cov = m_ab[i] - ma * mb;
            const double num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            const double den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
            ++count;
        }
    // rounding can push the mean of all-one windows a few ulp past 1
    return std::clamp(total / static_cast<double>(count), -1.0, 1.0);
}

inline MetricReport evaluate_metrics(const Image& reference, const Image& reconstruction) {
    return {psnr(reference, reconstruction), rmse(reference, reconstruction),
            ssim(reference, reconstruction)};
}

}  // namespace tomo
