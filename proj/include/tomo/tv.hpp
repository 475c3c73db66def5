#pragma once

// Total-variation regularized reconstruction by ADMM, anisotropic penalty:
//
//   min_x 1/2 ||Ax - y||_W^2 + lambda ||grad x||_1
//
//   x: conjugate-gradient solve of (A^T W A + mu grad^T grad) x = rhs
//   z: anisotropic soft-thresholding
//   p: dual ascent
//
// grad uses forward differences with replicate (Neumann) boundary; the last
// row/column differences are zero.

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "tomo/core.hpp"
#include "tomo/fbp.hpp"
#include "tomo/projector.hpp"

namespace tomo {

struct TvParams {
    double lambda = 0.01;
    double mu = 1.0;
    int outer_iters = 50;
    int cg_iters = 20;
    double cg_tol = 1e-6;

    void validate() const {
        if (!(lambda > 0.0) || !(mu > 0.0))
            throw std::invalid_argument("TvParams: lambda and mu must be > 0");
        if (outer_iters < 0 || cg_iters < 0)
            throw std::invalid_argument("TvParams: iteration counts must be >= 0");
    }
};

// Manually tuned regularization weights per dose level.
inline double tv_lambda_preset(double dose) {
    if (dose >= 5e4) return 0.01;
    if (dose >= 1e4) return 0.03;
    return 0.05;
}

// Two-channel difference field (horizontal, vertical).
struct GradField {
    int width = 0;
    int height = 0;
    double pixel_size = 0.0;
    std::vector<double> dx, dy;

    GradField() = default;
    GradField(int w, int h, double px, double fill = 0.0)
        : width(w), height(h), pixel_size(px),
          dx(static_cast<std::size_t>(w) * h, fill),
          dy(static_cast<std::size_t>(w) * h, fill) {}

    std::size_t size() const { return dx.size(); }
    bool same_shape(const GradField& o) const {
        return width == o.width && height == o.height;
    }
};

inline GradField grad(const Image& x) {
    GradField g(x.width, x.height, x.pixel_size);
    for (int r = 0; r < x.height; ++r) {
        for (int c = 0; c < x.width; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * x.width + c;
            if (c + 1 < x.width) g.dx[i] = x.values[i + 1] - x.values[i];
            if (r + 1 < x.height) g.dy[i] = x.values[i + x.width] - x.values[i];
        }
    }
    return g;
}

inline Image grad_adjoint(const GradField& v) {
    Image out(v.width, v.height, v.pixel_size, 0.0);
    for (int r = 0; r < v.height; ++r) {
        for (int c = 0; c < v.width; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * v.width + c;
            if (c + 1 < v.width) {
                out.values[i] -= v.dx[i];
                out.values[i + 1] += v.dx[i];
            }
            if (r + 1 < v.height) {
                out.values[i] -= v.dy[i];
                out.values[i + v.width] += v.dy[i];
            }
        }
    }
    return out;
}

// Soft threshold: sign(t) * max(|t| - kappa, 0).
inline double shrink(double t, double kappa) {
    if (t > kappa) return t - kappa;
    if (t < -kappa) return t + kappa;
    return 0.0;
}

struct TvState {
    Image x;
    GradField z;
    GradField p;
};

inline TvState make_tv_state(const Image& init) {
    return {init, GradField(init.width, init.height, init.pixel_size),
            GradField(init.width, init.height, init.pixel_size)};
}

// z = shrink(grad(x) + p/mu, lambda/mu), elementwise on both channels.
inline GradField z_update(const TvState& state, const TvParams& params) {
    GradField gx = grad(state.x);
    GradField z(gx.width, gx.height, gx.pixel_size);
    const double kappa = params.lambda / params.mu;
    for (std::size_t i = 0; i < z.size(); ++i) {
        z.dx[i] = shrink(gx.dx[i] + state.p.dx[i] / params.mu, kappa);
        z.dy[i] = shrink(gx.dy[i] + state.p.dy[i] / params.mu, kappa);
    }
    return z;
}

// p <- p + mu * (grad(x) - z).
inline GradField dual_update(const TvState& state, const TvParams& params) {
    GradField gx = grad(state.x);
    GradField p = state.p;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p.dx[i] += params.mu * (gx.dx[i] - state.z.dx[i]);
        p.dy[i] += params.mu * (gx.dy[i] - state.z.dy[i]);
    }
    return p;
}

// CG on the normal equations (A^T W A + mu grad^T grad) x = A^T W y +
// mu grad^T (z - p/mu), warm-started at state.x. On breakdown the last
// iterate is returned and the flag is set.
inline Image x_update(const TvState& state, const Projector& proj, const Sinogram& y,
                      const TvParams& params, const FidelityWeights& weights = {},
                      bool* breakdown = nullptr) {
    params.validate();
    if (breakdown) *breakdown = false;
    Image x = state.x;
    if (params.cg_iters == 0) return x;

    auto apply_normal = [&](const Image& img) {
        Image out = back_project(proj, apply_weights(weights, forward_project(proj, img)));
        Image reg = grad_adjoint(grad(img));
        for (std::size_t i = 0; i < out.values.size(); ++i)
            out.values[i] += params.mu * reg.values[i];
        return out;
    };

    Image rhs = back_project(proj, apply_weights(weights, y));
    {
        GradField target = state.z;
        for (std::size_t i = 0; i < target.size(); ++i) {
            target.dx[i] -= state.p.dx[i] / params.mu;
            target.dy[i] -= state.p.dy[i] / params.mu;
        }
        Image reg = grad_adjoint(target);
        for (std::size_t i = 0; i < rhs.values.size(); ++i)
            rhs.values[i] += params.mu * reg.values[i];
    }

    auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    };

    Image r = rhs;
    {
        Image mx = apply_normal(x);
        for (std::size_t i = 0; i < r.values.size(); ++i) r.values[i] -= mx.values[i];
    }
    Image d = r;
    double rr = dot(r.values, r.values);
    const double rhs_norm = std::sqrt(dot(rhs.values, rhs.values));
    const double stop = params.cg_tol * (rhs_norm > 0.0 ? rhs_norm : 1.0);

    for (int it = 0; it < params.cg_iters && std::sqrt(rr) > stop; ++it) {
        Image md = apply_normal(d);
        const double dmd = dot(d.values, md.values);
        if (!(dmd > 0.0) || !std::isfinite(dmd)) {
            if (breakdown) *breakdown = true;
            break;
        }
        const double alpha = rr / dmd;
        for (std::size_t i = 0; i < x.values.size(); ++i) {
            x.values[i] += alpha * d.values[i];
            r.values[i] -= alpha * md.values[i];
        }
        const double rr_new = dot(r.values, r.values);
        const double beta = rr_new / rr;
        rr = rr_new;
        for (std::size_t i = 0; i < d.values.size(); ++i)
            d.values[i] = r.values[i] + beta * d.values[i];
    }
    return x;
}

inline double tv_objective(const Projector& proj, const Sinogram& y, const Image& x,
                           double lambda, const FidelityWeights& weights = {}) {
    Sinogram ax = forward_project(proj, x);
    double fidelity = 0.0;
    if (weights.is_identity()) {
        for (std::size_t i = 0; i < ax.values.size(); ++i) {
            const double r = ax.values[i] - y.values[i];
            fidelity += r * r;
        }
    } else {
        for (std::size_t i = 0; i < ax.values.size(); ++i) {
            const double r = ax.values[i] - y.values[i];
            fidelity += (*weights.diag)[i] * r * r;
        }
    }
    GradField g = grad(x);
    double tv = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) tv += std::abs(g.dx[i]) + std::abs(g.dy[i]);
    return 0.5 * fidelity + lambda * tv;
}

struct TvResult {
    Image image;
    int outer_iters = 0;
    double primal_residual_rel = 0.0;  // ||grad x - z|| / ||grad x||
    double objective = 0.0;
    bool cg_breakdown = false;
};

inline TvResult reconstruct_tv(const Projector& proj, const Sinogram& y, const TvParams& params,
                               std::optional<Image> init = std::nullopt,
                               const FidelityWeights& weights = {}) {
    params.validate();
    if (!proj.matches(y)) throw std::invalid_argument("reconstruct_tv: sinogram shape mismatch");
    Image x0 = init ? std::move(*init)
                    : fbp_reconstruct(
                          FbpOperator(proj.geometry, proj.img_width, proj.img_height, proj.pixel_size), y);
    if (!proj.matches(x0)) throw std::invalid_argument("reconstruct_tv: init shape mismatch");

    TvState state = make_tv_state(x0);
    TvResult result;
    for (int it = 0; it < params.outer_iters; ++it) {
        bool breakdown = false;
        state.x = x_update(state, proj, y, params, weights, &breakdown);
        result.cg_breakdown = result.cg_breakdown || breakdown;
        state.z = z_update(state, params);
        state.p = dual_update(state, params);
        ++result.outer_iters;
    }
    GradField gx = grad(state.x);
    double rnum = 0.0, rden = 0.0;
    for (std::size_t i = 0; i < gx.size(); ++i) {
        const double ex = gx.dx[i] - state.z.dx[i];
        const double ey = gx.dy[i] - state.z.dy[i];
        rnum += ex * ex + ey * ey;
        rden += gx.dx[i] * gx.dx[i] + gx.dy[i] * gx.dy[i];
    }
    result.primal_residual_rel = std::sqrt(rnum) / (rden > 0.0 ? std::sqrt(rden) : 1.0);
    result.objective = tv_objective(proj, y, state.x, params.lambda, weights);
    result.image = std::move(state.x);
    return result;
}

}  // namespace tomo
