#pragma once

// Filtered backprojection for the equidistant (flat-panel) fan-beam
// geometry. Serves as the standalone analytic baseline and as the
// preconditioner inside the unrolled reconstruction.
//
// Pipeline (full-scan, detector coordinates rescaled to the isocenter):
//   1. cosine pre-weighting   D / sqrt(D^2 + u^2) per bin
//   2. band-limited ramp convolution per view (zero-padded, spatial domain)
//   3. pixel-driven backprojection with D^2/l^2 distance weighting,
//      linear interpolation between bins, scaled by du * dbeta / 2
// The operator is linear; fbp_adjoint is its exact transpose, built from
// the transposes of the three steps in reverse order.

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "tomo/core.hpp"
#include "tomo/parallel.hpp"

namespace tomo {

// Band-limited ramp kernel at unit tap spacing `bin_size`:
//   h(0) = 1/(4 ds^2),  h(n) = 0 for even n != 0,  h(n) = -1/(pi^2 n^2 ds^2) odd n.
inline double ramp_kernel_tap(int n, double bin_size) {
    if (n == 0) return 1.0 / (4.0 * bin_size * bin_size);
    if (n % 2 == 0) return 0.0;
    const double pn = std::numbers::pi * n * bin_size;
    return -1.0 / (pn * pn);
}

// Discrete linear convolution of a detector row with the ramp kernel,
// cropped to the input length (zero padding; no circular wrap).
inline std::vector<double> ramp_filter_row(const std::vector<double>& row, double bin_size) {
    const int n = static_cast<int>(row.size());
    std::vector<double> taps(2 * n - 1);
    for (int i = 0; i < 2 * n - 1; ++i) taps[i] = ramp_kernel_tap(i - (n - 1), bin_size);
    std::vector<double> out(n, 0.0);
    for (int j = 0; j < n; ++j) {
        double sum = 0.0;
        const double* h = taps.data() + (n - 1) + j;  // h[j - k] for k = 0..n-1
        for (int k = 0; k < n; ++k) sum += h[-k] * row[k];
        out[j] = sum;
    }
    return out;
}

struct FbpOperator {
    ScanGeometry geometry;
    int img_width = 0;
    int img_height = 0;
    double pixel_size = 0.0;

    double virtual_bin = 0.0;           // detector spacing rescaled to the isocenter
    double scale = 0.0;                 // du * dbeta / 2
    std::vector<double> cosine_weights; // per bin
    std::vector<double> ramp_taps;      // h[-(n-1) .. n-1]

    FbpOperator() = default;
    FbpOperator(const ScanGeometry& g, int width, int height, double px)
        : geometry(g), img_width(width), img_height(height), pixel_size(px) {
        geometry.validate();
        if (width < 1 || height < 1 || !(px > 0.0))
            throw std::invalid_argument("FbpOperator: bad image shape");
        const double d = geometry.source_to_isocenter;
        virtual_bin = geometry.detector_pixel_size * d / geometry.source_to_detector;
        scale = 0.5 * virtual_bin * geometry.angular_span / geometry.n_views;
        cosine_weights.resize(geometry.n_bins);
        for (int i = 0; i < geometry.n_bins; ++i) {
            const double u = bin_coordinate(i);
            cosine_weights[i] = d / std::sqrt(d * d + u * u);
        }
        ramp_taps.resize(2 * geometry.n_bins - 1);
        for (int i = 0; i < 2 * geometry.n_bins - 1; ++i)
            ramp_taps[i] = ramp_kernel_tap(i - (geometry.n_bins - 1), virtual_bin);
    }

    double bin_coordinate(int bin) const {
        return (bin - 0.5 * (geometry.n_bins - 1)) * virtual_bin;
    }
    bool matches(const Image& x) const {
        return x.width == img_width && x.height == img_height && x.pixel_size == pixel_size;
    }
    bool matches(const Sinogram& y) const {
        return y.n_views == geometry.n_views && y.n_bins == geometry.n_bins;
    }
};

namespace detail {

// Filters one weighted view row in place of the gather step shared by the
// forward and adjoint paths.
inline void fbp_filter_rows(const FbpOperator& op, std::vector<double>& rows, bool weight_first) {
    const int nb = op.geometry.n_bins;
    parallel_for(static_cast<std::size_t>(op.geometry.n_views), [&](std::size_t view) {
        double* row = rows.data() + view * nb;
        std::vector<double> tmp(nb);
        if (weight_first)
            for (int i = 0; i < nb; ++i) tmp[i] = row[i] * op.cosine_weights[i];
        else
            for (int i = 0; i < nb; ++i) tmp[i] = row[i];
        for (int j = 0; j < nb; ++j) {
            double sum = 0.0;
            const double* h = op.ramp_taps.data() + (nb - 1) + j;
            for (int k = 0; k < nb; ++k) sum += h[-k] * tmp[k];
            row[j] = sum;
        }
        if (!weight_first)
            for (int i = 0; i < nb; ++i) row[i] *= op.cosine_weights[i];
    });
}

}  // namespace detail

inline Image fbp_reconstruct(const FbpOperator& op, const Sinogram& y) {
    if (!op.matches(y)) throw std::invalid_argument("fbp_reconstruct: sinogram shape mismatch");
    std::vector<double> rows = y.values;
    detail::fbp_filter_rows(op, rows, /*weight_first=*/true);

    const double d = op.geometry.source_to_isocenter;
    const int nb = op.geometry.n_bins;
    const double u0 = op.bin_coordinate(0);
    Image out(op.img_width, op.img_height, op.pixel_size, 0.0);

    // Pixel-driven gather: each image row sums over views in a fixed order,
    // so the result is independent of the parallel schedule.
    parallel_for(static_cast<std::size_t>(op.img_height), [&](std::size_t r) {
        const double py = (0.5 * op.img_height - (static_cast<double>(r) + 0.5)) * op.pixel_size;
        double* out_row = out.values.data() + r * op.img_width;
        for (int view = 0; view < op.geometry.n_views; ++view) {
            const ViewBasis vb = make_view_basis(op.geometry, view);
            const double* q = rows.data() + static_cast<std::size_t>(view) * nb;
            for (int c = 0; c < op.img_width; ++c) {
                const double px = (static_cast<double>(c) + 0.5 - 0.5 * op.img_width) * op.pixel_size;
                const double vx = px - vb.source_x;
                const double vy = py - vb.source_y;
                const double along = vx * vb.dir_x + vy * vb.dir_y;
                if (!(along > 0.0)) continue;
                const double u = d * (vx * vb.det_x + vy * vb.det_y) / along;
                const double pos = (u - u0) / op.virtual_bin;
                const int j = static_cast<int>(std::floor(pos));
                if (j < -1 || j >= nb) continue;
                const double frac = pos - j;
                double val = 0.0;
                if (j >= 0) val += (1.0 - frac) * q[j];
                if (j + 1 < nb) val += frac * q[j + 1];
                const double w = d / along;
                out_row[c] += w * w * val;
            }
        }
    });
    for (auto& v : out.values) v *= op.scale;
    return out;
}

// Exact transpose of fbp_reconstruct as a linear map X -> Y.
inline Sinogram fbp_adjoint(const FbpOperator& op, const Image& x) {
    if (!op.matches(x)) throw std::invalid_argument("fbp_adjoint: image shape mismatch");
    const double d = op.geometry.source_to_isocenter;
    const int nb = op.geometry.n_bins;
    const double u0 = op.bin_coordinate(0);
    std::vector<double> rows(static_cast<std::size_t>(op.geometry.n_views) * nb, 0.0);

    // Transposed backprojection: per-view scatter over all pixels. Views own
    // disjoint rows; the pixel loop order is fixed.
    parallel_for(static_cast<std::size_t>(op.geometry.n_views), [&](std::size_t view) {
        const ViewBasis vb = make_view_basis(op.geometry, static_cast<int>(view));
        double* q = rows.data() + view * nb;
        for (int r = 0; r < op.img_height; ++r) {
            const double py = (0.5 * op.img_height - (r + 0.5)) * op.pixel_size;
            const double* x_row = x.values.data() + static_cast<std::size_t>(r) * op.img_width;
            for (int c = 0; c < op.img_width; ++c) {
                const double px = (c + 0.5 - 0.5 * op.img_width) * op.pixel_size;
                const double vx = px - vb.source_x;
                const double vy = py - vb.source_y;
                const double along = vx * vb.dir_x + vy * vb.dir_y;
                if (!(along > 0.0)) continue;
                const double u = d * (vx * vb.det_x + vy * vb.det_y) / along;
                const double pos = (u - u0) / op.virtual_bin;
                const int j = static_cast<int>(std::floor(pos));
                if (j < -1 || j >= nb) continue;
                const double frac = pos - j;
                const double w = d / along;
                const double val = x_row[c] * w * w * op.scale;
                if (j >= 0) q[j] += (1.0 - frac) * val;
                if (j + 1 < nb) q[j + 1] += frac * val;
            }
        }
    });

    // Ramp kernel is even, so the convolution transpose reuses the same
    // taps; the cosine weighting is diagonal and applied last.
    detail::fbp_filter_rows(op, rows, /*weight_first=*/false);
    Sinogram out(op.geometry.n_views, nb, SinogramDomain::post_log);
    out.values = std::move(rows);
    return out;
}

}  // namespace tomo
