#pragma once

// Matrix-free fan-beam system operator: forward projection A, its exact
// adjoint A^T, and diagonal fidelity weighting. One ray per detector-bin
// center, Siddon-style exact pixel intersection lengths (cm). Forward and
// adjoint walk the identical traversal, so <Ax, y> = <x, A^T y> holds to
// rounding error by construction.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "tomo/core.hpp"
#include "tomo/parallel.hpp"

namespace tomo {

struct Projector {
    ScanGeometry geometry;
    int img_width = 0;
    int img_height = 0;
    double pixel_size = 0.0;

    Projector() = default;
    Projector(const ScanGeometry& g, int width, int height, double px)
        : geometry(g), img_width(width), img_height(height), pixel_size(px) {
        geometry.validate();
        if (width < 1 || height < 1 || !(px > 0.0))
            throw std::invalid_argument("Projector: bad image shape");
    }

    bool matches(const Image& x) const {
        return x.width == img_width && x.height == img_height && x.pixel_size == pixel_size;
    }
    bool matches(const Sinogram& y) const {
        return y.n_views == geometry.n_views && y.n_bins == geometry.n_bins;
    }
};

namespace detail {

// Walks the segment source->bin across the pixel grid and calls
// emit(flat_pixel_index, intersection_length_cm) for every pixel crossed.
// Rays that miss the grid emit nothing.
template <class Emit>
inline void trace_ray(const Projector& p, const ViewBasis& vb, int bin, Emit&& emit) {
    const double half_w = 0.5 * p.img_width * p.pixel_size;
    const double half_h = 0.5 * p.img_height * p.pixel_size;
    const double x_left = -half_w;
    const double y_top = half_h;
    const double delta = p.pixel_size;

    const double offset =
        (bin - 0.5 * (p.geometry.n_bins - 1)) * p.geometry.detector_pixel_size;
    const double sx = vb.source_x;
    const double sy = vb.source_y;
    const double ex = sx + p.geometry.source_to_detector * vb.dir_x + offset * vb.det_x;
    const double ey = sy + p.geometry.source_to_detector * vb.dir_y + offset * vb.det_y;
    const double dx = ex - sx;
    const double dy = ey - sy;
    const double seg_len = std::hypot(dx, dy);
    if (!(seg_len > 0.0)) return;

    // Clip the segment to the grid bounding box.
    double t_min = 0.0, t_max = 1.0;
    if (dx != 0.0) {
        double t0 = (x_left - sx) / dx;
        double t1 = (x_left + 2.0 * half_w - sx) / dx;
        if (t0 > t1) std::swap(t0, t1);
        t_min = std::max(t_min, t0);
        t_max = std::min(t_max, t1);
    } else if (sx < x_left || sx > x_left + 2.0 * half_w) {
        return;
    }
    if (dy != 0.0) {
        double t0 = (-half_h - sy) / dy;
        double t1 = (half_h - sy) / dy;
        if (t0 > t1) std::swap(t0, t1);
        t_min = std::max(t_min, t0);
        t_max = std::min(t_max, t1);
    } else if (sy < -half_h || sy > half_h) {
        return;
    }
    if (!(t_min < t_max)) return;

    // Entry pixel from the clipped entry point.
    const double px0 = sx + t_min * dx;
    const double py0 = sy + t_min * dy;
    int col = std::clamp(static_cast<int>(std::floor((px0 - x_left) / delta)), 0, p.img_width - 1);
    int row = std::clamp(static_cast<int>(std::floor((y_top - py0) / delta)), 0, p.img_height - 1);

    constexpr double inf = std::numeric_limits<double>::infinity();
    int col_step = 0, row_step = 0;
    double t_next_x = inf, t_next_y = inf, dt_x = inf, dt_y = inf;
    if (dx > 0.0) {
        col_step = 1;
        t_next_x = (x_left + (col + 1) * delta - sx) / dx;
        dt_x = delta / dx;
    } else if (dx < 0.0) {
        col_step = -1;
        t_next_x = (x_left + col * delta - sx) / dx;
        dt_x = -delta / dx;
    }
    if (dy < 0.0) {
        row_step = 1;  // rows count downward from the top
        t_next_y = (y_top - (row + 1) * delta - sy) / dy;
        dt_y = -delta / dy;
    } else if (dy > 0.0) {
        row_step = -1;
        t_next_y = (y_top - row * delta - sy) / dy;
        dt_y = delta / dy;
    }

    double t = t_min;
    const int max_steps = p.img_width + p.img_height + 4;
    for (int step = 0; step < max_steps; ++step) {
        const double t_stop = std::min(std::min(t_next_x, t_next_y), t_max);
        const double len = (t_stop - t) * seg_len;
        if (len > 0.0) emit(static_cast<std::size_t>(row) * p.img_width + col, len);
        if (t_stop >= t_max) break;
        if (t_next_x <= t_next_y) {
            col += col_step;
            t_next_x += dt_x;
            if (col < 0 || col >= p.img_width) break;
        }
        if (t_next_y <= t_stop) {
            row += row_step;
            t_next_y += dt_y;
            if (row < 0 || row >= p.img_height) break;
        }
        t = t_stop;
    }
}

}  // namespace detail

// Line integrals of x along every ray, in cm * (1/cm). Parallel over views;
// each view writes its own sinogram row, so results are schedule-independent.
inline Sinogram forward_project(const Projector& p, const Image& x) {
    if (!p.matches(x)) throw std::invalid_argument("forward_project: image shape mismatch");
    Sinogram sino(p.geometry.n_views, p.geometry.n_bins, SinogramDomain::post_log);
    const double* img = x.values.data();
    parallel_for(static_cast<std::size_t>(p.geometry.n_views), [&](std::size_t view) {
        const ViewBasis vb = make_view_basis(p.geometry, static_cast<int>(view));
        double* row = sino.values.data() + view * p.geometry.n_bins;
        for (int bin = 0; bin < p.geometry.n_bins; ++bin) {
            double sum = 0.0;
            detail::trace_ray(p, vb, bin,
                              [&](std::size_t idx, double len) { sum += len * img[idx]; });
            row[bin] = sum;
        }
    });
    return sino;
}

// Exact adjoint of forward_project. Views are grouped into a fixed number of
// blocks (independent of the thread count); block partials are accumulated
// into the output in block order, keeping the result bit-reproducible for
// any parallel schedule.
inline Image back_project(const Projector& p, const Sinogram& y) {
    if (!p.matches(y)) throw std::invalid_argument("back_project: sinogram shape mismatch");
    const std::size_t n_pixels = static_cast<std::size_t>(p.img_width) * p.img_height;
    const int n_blocks = std::min(p.geometry.n_views, 64);
    const int views_per_block = (p.geometry.n_views + n_blocks - 1) / n_blocks;

    std::vector<double> partials(static_cast<std::size_t>(n_blocks) * n_pixels, 0.0);
    parallel_for(static_cast<std::size_t>(n_blocks), [&](std::size_t block) {
        double* acc = partials.data() + block * n_pixels;
        const int v0 = static_cast<int>(block) * views_per_block;
        const int v1 = std::min(v0 + views_per_block, p.geometry.n_views);
        for (int view = v0; view < v1; ++view) {
            const ViewBasis vb = make_view_basis(p.geometry, view);
            const double* row = y.values.data() + static_cast<std::size_t>(view) * p.geometry.n_bins;
            for (int bin = 0; bin < p.geometry.n_bins; ++bin) {
                const double val = row[bin];
                if (val == 0.0) continue;
                detail::trace_ray(p, vb, bin,
                                  [&](std::size_t idx, double len) { acc[idx] += len * val; });
            }
        }
    });

    Image out(p.img_width, p.img_height, p.pixel_size, 0.0);
    for (int block = 0; block < n_blocks; ++block) {
        const double* acc = partials.data() + static_cast<std::size_t>(block) * n_pixels;
        for (std::size_t i = 0; i < n_pixels; ++i) out.values[i] += acc[i];
    }
    return out;
}

// Elementwise w_i * y_i; the identity marker is a no-op.
inline Sinogram apply_weights(const FidelityWeights& w, const Sinogram& y) {
    if (w.is_identity()) return y;
    if (w.diag->size() != y.values.size())
        throw std::invalid_argument("apply_weights: weight length mismatch");
    Sinogram out = y;
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] *= (*w.diag)[i];
    return out;
}

// Power-iteration estimate of ||A||_2. Deterministic: starts from an
// all-ones image.
inline double operator_norm_estimate(const Projector& p, int iterations = 30) {
    Image v(p.img_width, p.img_height, p.pixel_size, 1.0);
    double sigma = 0.0;
    for (int it = 0; it < iterations; ++it) {
        Image w = back_project(p, forward_project(p, v));
        double norm = 0.0;
        for (double x : w.values) norm += x * x;
        norm = std::sqrt(norm);
        if (!(norm > 0.0)) return 0.0;
        sigma = std::sqrt(norm);
        for (auto& x : w.values) x /= norm;
        v = std::move(w);
    }
    return sigma;
}

}  // namespace tomo
