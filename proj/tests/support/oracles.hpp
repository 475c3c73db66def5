#pragma once

// Independent reference implementations used only by tests. Nothing here
// shares code with the library paths under test.

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "tomo/core.hpp"
#include "tomo/nn.hpp"

namespace oracle {

// Length of the overlap between segment (sx,sy)->(ex,ey) and the axis-
// aligned box [x0,x1]x[y0,y1] (Liang-Barsky clipping).
inline double clip_segment_box(double sx, double sy, double ex, double ey, double x0, double y0,
                               double x1, double y1) {
    const double dx = ex - sx, dy = ey - sy;
    double t0 = 0.0, t1 = 1.0;
    const double p[4] = {-dx, dx, -dy, dy};
    const double q[4] = {sx - x0, x1 - sx, sy - y0, y1 - sy};
    for (int i = 0; i < 4; ++i) {
        if (p[i] == 0.0) {
            if (q[i] < 0.0) return 0.0;
        } else {
            const double r = q[i] / p[i];
            if (p[i] < 0.0) {
                if (r > t1) return 0.0;
                if (r > t0) t0 = r;
            } else {
                if (r < t0) return 0.0;
                if (r < t1) t1 = r;
            }
        }
    }
    if (t1 <= t0) return 0.0;
    return (t1 - t0) * std::hypot(dx, dy);
}

// Ray endpoints for (view, bin) recomputed from the documented acquisition
// convention: source at D*(-sin b, cos b), flat detector through
// S + SDD*dir, axis (cos b, sin b), bin centers at (i-(n-1)/2)*ds.
struct Ray {
    double sx, sy, ex, ey;
};

inline Ray ray_endpoints(const tomo::ScanGeometry& g, int view, int bin) {
    const double beta = g.angular_span * view / g.n_views;
    const double sx = -g.source_to_isocenter * std::sin(beta);
    const double sy = g.source_to_isocenter * std::cos(beta);
    const double dirx = std::sin(beta), diry = -std::cos(beta);
    const double detx = std::cos(beta), dety = std::sin(beta);
    const double off = (bin - 0.5 * (g.n_bins - 1)) * g.detector_pixel_size;
    return {sx, sy, sx + g.source_to_detector * dirx + off * detx,
            sy + g.source_to_detector * diry + off * dety};
}

// Exact intersection length of ray (view, bin) with pixel (row, col) for a
// width x height image of the given pixel size centered on the isocenter,
// pixel (0,0) top-left.
inline double ray_pixel_length(const tomo::ScanGeometry& g, int view, int bin, int row, int col,
                               int width, int height, double pixel_size) {
    const Ray r = ray_endpoints(g, view, bin);
    const double x0 = -0.5 * width * pixel_size + col * pixel_size;
    const double y1 = 0.5 * height * pixel_size - row * pixel_size;
    return clip_segment_box(r.sx, r.sy, r.ex, r.ey, x0, y1 - pixel_size, x0 + pixel_size, y1);
}

// Dense system matrix [n_rays x n_pixels] from the clipping oracle.
inline std::vector<std::vector<double>> dense_system_matrix(const tomo::ScanGeometry& g,
                                                            int width, int height,
                                                            double pixel_size) {
    const int n_rays = g.n_views * g.n_bins;
    const int n_pix = width * height;
    std::vector<std::vector<double>> a(static_cast<std::size_t>(n_rays),
                                       std::vector<double>(static_cast<std::size_t>(n_pix), 0.0));
    for (int view = 0; view < g.n_views; ++view)
        for (int bin = 0; bin < g.n_bins; ++bin) {
            auto& rowvec = a[static_cast<std::size_t>(view * g.n_bins + bin)];
            for (int row = 0; row < height; ++row)
                for (int col = 0; col < width; ++col)
                    rowvec[static_cast<std::size_t>(row * width + col)] =
                        ray_pixel_length(g, view, bin, row, col, width, height, pixel_size);
        }
    return a;
}

// Central finite difference of a scalar function at x along one coordinate.
inline double central_diff(const std::function<double(double)>& f, double x, double h) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

// Guarded relative error: |a-b| / max(|a|, |b|, floor).
inline double rel_err(double a, double b, double floor = 1e-12) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// In-place Gaussian elimination with partial pivoting; returns x for Mx=b.
inline std::vector<double> dense_solve(std::vector<std::vector<double>> m,
                                       std::vector<double> b) {
    const std::size_t n = b.size();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(m[r][col]) > std::abs(m[pivot][col])) pivot = r;
        if (m[pivot][col] == 0.0) throw std::runtime_error("dense_solve: singular matrix");
        std::swap(m[col], m[pivot]);
        std::swap(b[col], b[pivot]);
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = m[r][col] / m[col][col];
            for (std::size_t c = col; c < n; ++c) m[r][c] -= f * m[col][c];
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(n, 0.0);
    for (std::size_t i = n; i-- > 0;) {
        double s = b[i];
        for (std::size_t c = i + 1; c < n; ++c) s -= m[i][c] * x[c];
        x[i] = s / m[i][i];
    }
    return x;
}

// Direct 3x3 same-padding cross-correlation, written independently of the
// library kernel (per-output-pixel gather).
inline tomo::Tensor naive_conv3x3(const tomo::ConvLayer& layer, const tomo::Tensor& x) {
    tomo::Tensor out(x.n, layer.out_ch, x.h, x.w);
    for (int b = 0; b < x.n; ++b)
        for (int oc = 0; oc < layer.out_ch; ++oc)
            for (int y = 0; y < x.h; ++y)
                for (int xx = 0; xx < x.w; ++xx) {
                    double sum = layer.bias[static_cast<std::size_t>(oc)];
                    for (int ic = 0; ic < layer.in_ch; ++ic)
                        for (int ky = -1; ky <= 1; ++ky)
                            for (int kx = -1; kx <= 1; ++kx) {
                                const int yy = y + ky, xc = xx + kx;
                                if (yy < 0 || yy >= x.h || xc < 0 || xc >= x.w) continue;
                                sum += layer.kernel(oc, ic)[(ky + 1) * 3 + (kx + 1)] *
                                       x.at(b, ic, yy, xc);
                            }
                    out.at(b, oc, y, xx) = sum;
                }
    return out;
}

}  // namespace oracle
