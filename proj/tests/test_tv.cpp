#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "support/oracles.hpp"
#include "tomo/fbp.hpp"
#include "tomo/noise.hpp"
#include "tomo/phantom.hpp"
#include "tomo/projector.hpp"
#include "tomo/rng.hpp"
#include "tomo/tv.hpp"

using namespace tomo;

namespace {
ScanGeometry tiny_geometry(int views = 16, int bins = 16) {
    ScanGeometry g;
    g.source_to_isocenter = 25.0;
    g.source_to_detector = 50.0;
    g.detector_pixel_size = 0.1552 * 128.0 / bins;
    g.n_bins = bins;
    g.n_views = views;
    g.image_fov = 6.4;
    g.validate();
    return g;
}

double field_dot(const GradField& a, const GradField& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.dx[i] * b.dx[i] + a.dy[i] * b.dy[i];
    return s;
}
}  // namespace

TEST_CASE("gradient of a constant image is zero") {
    Image x(5, 4, 1.0, 3.25);
    GradField g = grad(x);
    for (double v : g.dx) CHECK(v == 0.0);
    for (double v : g.dy) CHECK(v == 0.0);
}

TEST_CASE("gradient hand example with replicate boundary") {
    Image x(2, 2, 1.0, 0.0);
    x.at(0, 0) = 0.0;
    x.at(0, 1) = 1.0;
    x.at(1, 0) = 0.0;
    x.at(1, 1) = 1.0;
    GradField g = grad(x);
    CHECK(g.dx[0] == 1.0);
    CHECK(g.dx[1] == 0.0);  // last column: zero by the Neumann boundary
    CHECK(g.dx[2] == 1.0);
    CHECK(g.dx[3] == 0.0);
    for (double v : g.dy) CHECK(v == 0.0);
}

TEST_CASE("grad and grad_adjoint pass the dot-product test") {
    CounterRng rng(3);
    for (int trial = 0; trial < 30; ++trial) {
        Image x(7, 6, 1.0, 0.0);
        for (auto& v : x.values) v = uniform(rng, -1.0, 1.0);
        GradField v(7, 6, 1.0);
        for (auto& e : v.dx) e = uniform(rng, -1.0, 1.0);
        for (auto& e : v.dy) e = uniform(rng, -1.0, 1.0);
        const double lhs = field_dot(grad(x), v);
        Image adj = grad_adjoint(v);
        double rhs = 0.0;
        for (std::size_t i = 0; i < x.values.size(); ++i) rhs += x.values[i] * adj.values[i];
        CHECK(std::abs(lhs - rhs) < 1e-12 * (1.0 + std::abs(lhs)));
    }
}

TEST_CASE("grad_adjoint zero and linearity") {
    GradField z(4, 4, 1.0);
    for (double v : grad_adjoint(z).values) CHECK(v == 0.0);

    CounterRng rng(5);
    GradField a(4, 4, 1.0), b(4, 4, 1.0);
    for (auto& e : a.dx) e = uniform(rng, -1.0, 1.0);
    for (auto& e : a.dy) e = uniform(rng, -1.0, 1.0);
    for (auto& e : b.dx) e = uniform(rng, -1.0, 1.0);
    for (auto& e : b.dy) e = uniform(rng, -1.0, 1.0);
    GradField combo(4, 4, 1.0);
    for (std::size_t i = 0; i < combo.size(); ++i) {
        combo.dx[i] = 2.0 * a.dx[i] - 0.5 * b.dx[i];
        combo.dy[i] = 2.0 * a.dy[i] - 0.5 * b.dy[i];
    }
    Image lhs = grad_adjoint(combo);
    Image ra = grad_adjoint(a), rb = grad_adjoint(b);
    for (std::size_t i = 0; i < lhs.values.size(); ++i)
        CHECK(lhs.values[i] == Catch::Approx(2.0 * ra.values[i] - 0.5 * rb.values[i]).margin(1e-12));
}

TEST_CASE("shrink values") {
    CHECK(shrink(3.0, 1.0) == 2.0);
    CHECK(shrink(-0.5, 1.0) == 0.0);
    CHECK(shrink(-2.5, 1.0) == -1.5);
    CHECK(shrink(0.0, 1.0) == 0.0);
}

TEST_CASE("shrink is nonexpansive elementwise") {
    CounterRng rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
        const double a = uniform(rng, -3.0, 3.0);
        const double b = uniform(rng, -3.0, 3.0);
        const double kappa = uniform(rng, 0.0, 2.0);
        CHECK(std::abs(shrink(a, kappa) - shrink(b, kappa)) <= std::abs(a - b) + 1e-15);
    }
}

TEST_CASE("x_update with zero CG iterations returns the iterate unchanged") {
    ScanGeometry g = tiny_geometry();
    Projector p(g, 8, 8, 0.8);
    TvParams params;
    params.lambda = 0.1;
    params.cg_iters = 0;
    Image x0(8, 8, 0.8, 0.4);
    TvState state = make_tv_state(x0);
    Sinogram y(g.n_views, g.n_bins);
    Image out = x_update(state, p, y, params);
    CHECK(out.values == x0.values);
}

TEST_CASE("x_update matches a dense direct solve on a tiny problem") {
    ScanGeometry g = tiny_geometry(12, 12);
    const int n = 4;
    const double px = 1.2;
    Projector p(g, n, n, px);
    CounterRng rng(11);
    Sinogram y(g.n_views, g.n_bins);
    for (auto& v : y.values) v = uniform(rng, 0.0, 1.0);

    TvParams params;
    params.lambda = 0.05;
    params.mu = 0.7;
    params.cg_iters = 200;
    params.cg_tol = 1e-14;

    TvState state = make_tv_state(Image(n, n, px, 0.0));
    for (auto& v : state.z.dx) v = uniform(rng, -0.2, 0.2);
    for (auto& v : state.z.dy) v = uniform(rng, -0.2, 0.2);
    for (auto& v : state.p.dx) v = uniform(rng, -0.1, 0.1);
    for (auto& v : state.p.dy) v = uniform(rng, -0.1, 0.1);

    Image got = x_update(state, p, y, params);

    // dense oracle: M = A^T A + mu G^T G from unit vectors, rhs assembled
    // the same way the update defines it
    const int npix = n * n;
    std::vector<std::vector<double>> m(npix, std::vector<double>(npix, 0.0));
    for (int j = 0; j < npix; ++j) {
        Image e(n, n, px, 0.0);
        e.values[static_cast<std::size_t>(j)] = 1.0;
        Image col = back_project(p, forward_project(p, e));
        Image reg = grad_adjoint(grad(e));
        for (int i = 0; i < npix; ++i)
            m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                col.values[static_cast<std::size_t>(i)] +
                params.mu * reg.values[static_cast<std::size_t>(i)];
    }
    GradField target = state.z;
    for (std::size_t i = 0; i < target.size(); ++i) {
        target.dx[i] -= state.p.dx[i] / params.mu;
        target.dy[i] -= state.p.dy[i] / params.mu;
    }
    Image rhs = back_project(p, y);
    Image reg = grad_adjoint(target);
    for (std::size_t i = 0; i < rhs.values.size(); ++i)
        rhs.values[i] += params.mu * reg.values[i];
    std::vector<double> want = oracle::dense_solve(m, rhs.values);
    for (int i = 0; i < npix; ++i)
        CHECK(got.values[static_cast<std::size_t>(i)] ==
              Catch::Approx(want[static_cast<std::size_t>(i)]).margin(1e-6));
}

TEST_CASE("x_update honors diagonal fidelity weights (dense oracle)") {
    ScanGeometry g = tiny_geometry(12, 12);
    const int n = 4;
    const double px = 1.2;
    Projector p(g, n, n, px);
    CounterRng rng(19);
    Sinogram y(g.n_views, g.n_bins);
    for (auto& v : y.values) v = uniform(rng, 0.0, 1.0);
    std::vector<double> w(y.values.size());
    for (auto& v : w) v = uniform(rng, 0.5, 2.0);
    FidelityWeights weights = FidelityWeights::diagonal(w);

    TvParams params;
    params.lambda = 0.05;
    params.mu = 0.7;
    params.cg_iters = 300;
    params.cg_tol = 1e-14;
    TvState state = make_tv_state(Image(n, n, px, 0.0));
    Image got = x_update(state, p, y, params, weights);

    const int npix = n * n;
    std::vector<std::vector<double>> m(npix, std::vector<double>(npix, 0.0));
    for (int j = 0; j < npix; ++j) {
        Image e(n, n, px, 0.0);
        e.values[static_cast<std::size_t>(j)] = 1.0;
        Image col = back_project(p, apply_weights(weights, forward_project(p, e)));
        Image reg = grad_adjoint(grad(e));
        for (int i = 0; i < npix; ++i)
            m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                col.values[static_cast<std::size_t>(i)] +
                params.mu * reg.values[static_cast<std::size_t>(i)];
    }
    Image rhs = back_project(p, apply_weights(weights, y));
    std::vector<double> want = oracle::dense_solve(m, rhs.values);
    for (int i = 0; i < npix; ++i)
        CHECK(got.values[static_cast<std::size_t>(i)] ==
              Catch::Approx(want[static_cast<std::size_t>(i)]).margin(1e-6));
}

TEST_CASE("x_update fixed point at a noiseless consistent iterate") {
    // mu -> 0 limit is exercised with a tiny mu: y = A x0 and z = grad x0,
    // p = 0 leaves x0 stationary
    ScanGeometry g = tiny_geometry();
    const int n = 8;
    Projector p(g, n, n, 0.8);
    CounterRng rng(13);
    Image x0(n, n, 0.8, 0.0);
    for (auto& v : x0.values) v = uniform(rng, 0.0, 0.5);
    Sinogram y = forward_project(p, x0);
    TvParams params;
    params.lambda = 0.01;
    params.mu = 1e-12;
    params.cg_iters = 50;
    TvState state = make_tv_state(x0);
    state.z = grad(x0);
    Image out = x_update(state, p, y, params);
    for (std::size_t i = 0; i < out.values.size(); ++i)
        CHECK(out.values[i] == Catch::Approx(x0.values[i]).margin(1e-8));
}

TEST_CASE("z_update is soft thresholding of grad x + p/mu") {
    Image x(3, 3, 1.0, 0.0);
    x.at(0, 0) = 0.0;
    x.at(0, 1) = 3.0;
    TvParams params;
    params.lambda = 1.0;
    params.mu = 1.0;
    TvState state = make_tv_state(x);
    state.p.dx[0] = 0.5;
    GradField z = z_update(state, params);
    CHECK(z.dx[0] == Catch::Approx(2.5));  // shrink(3 + 0.5, 1)
    CHECK(z.dx[1] == Catch::Approx(-2.0)); // shrink(-3, 1)
    CHECK(z.dy[0] == 0.0);
}

TEST_CASE("dual_update") {
    Image x(3, 3, 1.0, 0.0);
    x.at(1, 1) = 1.0;
    TvParams params;
    params.lambda = 0.1;
    SECTION("z equal to grad x leaves p unchanged") {
        TvState state = make_tv_state(x);
        state.z = grad(x);
        state.p.dx[0] = 0.25;
        GradField p2 = dual_update(state, params);
        CHECK(p2.dx[0] == 0.25);
        for (std::size_t i = 1; i < p2.size(); ++i) {
            CHECK(p2.dx[i] == state.p.dx[i]);
            CHECK(p2.dy[i] == state.p.dy[i]);
        }
    }
    SECTION("hand case") {
        TvState state = make_tv_state(x);
        params.mu = 2.0;
        GradField gx = grad(x);
        GradField p2 = dual_update(state, params);
        for (std::size_t i = 0; i < p2.size(); ++i) {
            CHECK(p2.dx[i] == Catch::Approx(2.0 * gx.dx[i]));
            CHECK(p2.dy[i] == Catch::Approx(2.0 * gx.dy[i]));
        }
    }
}

TEST_CASE("reconstruct_tv with zero outer iterations returns the init") {
    ScanGeometry g = tiny_geometry();
    Projector p(g, 8, 8, 0.8);
    Sinogram y(g.n_views, g.n_bins, SinogramDomain::post_log, 0.1);
    TvParams params;
    params.lambda = 0.01;
    params.outer_iters = 0;
    Image init(8, 8, 0.8, 0.7);
    TvResult res = reconstruct_tv(p, y, params, init);
    CHECK(res.image.values == init.values);
    CHECK(res.outer_iters == 0);
}

TEST_CASE("nearly-unregularized TV on noiseless data beats FBP") {
    ScanGeometry g = geometry_preset("desk_small");
    const int n = 32;
    const double px = g.image_fov / n;
    Projector p(g, n, n, px);
    EllipsePhantomSpec spec;
    spec.width = n;
    spec.height = n;
    spec.pixel_size = px;
    spec.seed = 17;
    Image truth = generate_ellipse_phantom(spec, 0);
    Sinogram y = forward_project(p, truth);

    FbpOperator fbp_op(g, n, n, px);
    Image fbp_img = fbp_reconstruct(fbp_op, y);

    TvParams params;
    params.lambda = 1e-8;
    params.mu = 1.0;
    params.outer_iters = 8;
    params.cg_iters = 40;
    TvResult res = reconstruct_tv(p, y, params);

    auto rel_err = [&](const Image& img) {
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < img.values.size(); ++i) {
            const double d = img.values[i] - truth.values[i];
            num += d * d;
            den += truth.values[i] * truth.values[i];
        }
        return std::sqrt(num / den);
    };
    CHECK(rel_err(res.image) <= rel_err(fbp_img));
}

TEST_CASE("TV objective decreases below the FBP init on low-dose data") {
    ScanGeometry g = geometry_preset("desk_small");
    const int n = 32;
    const double px = g.image_fov / n;
    Projector p(g, n, n, px);
    EllipsePhantomSpec spec;
    spec.width = n;
    spec.height = n;
    spec.pixel_size = px;
    spec.seed = 23;
    Image truth = generate_ellipse_phantom(spec, 1);
    NoiseModel noise;
    noise.incident_intensity = 5e4;
    noise.rng_seed = 29;
    auto [y, _] = make_low_dose_pair(truth, p, noise);

    FbpOperator fbp_op(g, n, n, px);
    Image init = fbp_reconstruct(fbp_op, y);
    TvParams params;
    params.lambda = tv_lambda_preset(5e4);
    params.mu = 1.0;
    params.outer_iters = 12;
    params.cg_iters = 20;
    const double before = tv_objective(p, y, init, params.lambda);
    TvResult res = reconstruct_tv(p, y, params, init);
    CHECK(res.objective < before);
    CHECK_FALSE(res.cg_breakdown);
}

TEST_CASE("lambda presets follow the published schedule") {
    CHECK(tv_lambda_preset(1e5) == 0.01);
    CHECK(tv_lambda_preset(5e4) == 0.01);
    CHECK(tv_lambda_preset(1e4) == 0.03);
    CHECK(tv_lambda_preset(5e3) == 0.05);
}

TEST_CASE("tv params validate") {
    TvParams bad;
    bad.lambda = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad.lambda = 0.1;
    bad.mu = -1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
