#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "support/oracles.hpp"
#include "tomo/core.hpp"
#include "tomo/parallel.hpp"
#include "tomo/projector.hpp"
#include "tomo/rng.hpp"

using namespace tomo;

namespace {

// Small geometry that keeps dense-oracle tests fast.
ScanGeometry tiny_geometry(int views = 24, int bins = 32) {
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

Image random_image(const Projector& p, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
    Image x(p.img_width, p.img_height, p.pixel_size, 0.0);
    for (auto& v : x.values) v = uniform(rng, lo, hi);
    return x;
}

Sinogram random_sinogram(const Projector& p, CounterRng& rng) {
    Sinogram y(p.geometry.n_views, p.geometry.n_bins);
    for (auto& v : y.values) v = uniform(rng, -1.0, 1.0);
    return y;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

TEST_CASE("zero image projects to zero sinogram") {
    Projector p(tiny_geometry(), 16, 16, 0.4);
    Image x(16, 16, 0.4, 0.0);
    Sinogram y = forward_project(p, x);
    for (double v : y.values) CHECK(v == 0.0);
    CHECK(y.domain == SinogramDomain::post_log);
}

TEST_CASE("central ray through a uniform disk integrates to the chord length") {
    // uniform disk of radius r and value mu centered on the isocenter:
    // the central ray of any view sees the line integral 2 r mu.
    ScanGeometry g = tiny_geometry(12, 64);
    const int n = 64;
    const double px = 0.1;
    Projector p(g, n, n, px);
    const double radius = 2.0;
    const double mu = 0.35;
    // area-weighted rasterization (16x16 subsamples) so the discrete disk's
    // line integrals track the analytic ones well below the 1% tolerance
    Image disk(n, n, px, 0.0);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            int inside = 0;
            for (int sy = 0; sy < 16; ++sy)
                for (int sx = 0; sx < 16; ++sx) {
                    const double y = (0.5 * n - (r + (sy + 0.5) / 16.0)) * px;
                    const double x = (c + (sx + 0.5) / 16.0 - 0.5 * n) * px;
                    if (x * x + y * y <= radius * radius) ++inside;
                }
            disk.at(r, c) = mu * inside / 256.0;
        }
    Sinogram y = forward_project(p, disk);
    for (int view = 0; view < g.n_views; ++view) {
        // even bin count: the two middle bins straddle the central ray at
        // offset detector_pixel_size/2, still within 1% of the full chord
        const double got = y.at(view, g.n_bins / 2);
        CHECK(got == Catch::Approx(2.0 * radius * mu).epsilon(0.01));
    }
}

TEST_CASE("single unit pixel matches the segment-box clipping oracle") {
    ScanGeometry g = tiny_geometry(10, 24);
    const int n = 8;
    const double px = 0.8;
    Projector p(g, n, n, px);
    for (int row = 0; row < n; ++row)
        for (int col = 0; col < n; ++col) {
            Image x(n, n, px, 0.0);
            x.at(row, col) = 1.0;
            Sinogram y = forward_project(p, x);
            for (int view = 0; view < g.n_views; ++view)
                for (int bin = 0; bin < g.n_bins; ++bin) {
                    const double want =
                        oracle::ray_pixel_length(g, view, bin, row, col, n, n, px);
                    REQUIRE(std::abs(y.at(view, bin) - want) < 1e-12);
                }
        }
}

TEST_CASE("back projection of a single ray hits exactly the oracle pixels") {
    ScanGeometry g = tiny_geometry(10, 24);
    const int n = 8;
    const double px = 0.8;
    Projector p(g, n, n, px);
    const int view = 3, bin = 7;
    Sinogram y(g.n_views, g.n_bins);
    y.at(view, bin) = 1.0;
    Image img = back_project(p, y);
    for (int row = 0; row < n; ++row)
        for (int col = 0; col < n; ++col) {
            const double want = oracle::ray_pixel_length(g, view, bin, row, col, n, n, px);
            CHECK(std::abs(img.at(row, col) - want) < 1e-12);
        }
}

TEST_CASE("adjoint identity <Ax,y> = <x,A^T y> on 100 random pairs") {
    // positive test vectors: the identity is then free of cancellation and
    // must hold to near machine precision
    ScanGeometry g = tiny_geometry(24, 32);
    Projector p(g, 20, 20, 0.3);
    CounterRng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        Image x = random_image(p, rng, 0.1, 1.0);
        Sinogram y(p.geometry.n_views, p.geometry.n_bins);
        for (auto& v : y.values) v = uniform(rng, 0.1, 1.0);
        const double lhs = dot(forward_project(p, x).values, y.values);
        const double rhs = dot(x.values, back_project(p, y).values);
        CHECK(std::abs(lhs - rhs) / (std::abs(lhs) + 1e-30) < 1e-12);
    }
}

TEST_CASE("adjoint identity on signed pairs, cancellation-aware scale") {
    ScanGeometry g = tiny_geometry(24, 32);
    Projector p(g, 20, 20, 0.3);
    CounterRng rng(19);
    for (int trial = 0; trial < 50; ++trial) {
        Image x = random_image(p, rng);
        Sinogram y = random_sinogram(p, rng);
        Sinogram ax = forward_project(p, x);
        Image aty = back_project(p, y);
        const double lhs = dot(ax.values, y.values);
        const double rhs = dot(x.values, aty.values);
        double scale = 0.0;  // sum of |terms|, immune to cancellation
        for (std::size_t i = 0; i < ax.values.size(); ++i)
            scale += std::abs(ax.values[i] * y.values[i]);
        CHECK(std::abs(lhs - rhs) <= 1e-13 * (scale + 1e-30));
    }
}

TEST_CASE("linearity of the forward operator") {
    ScanGeometry g = tiny_geometry();
    Projector p(g, 16, 16, 0.4);
    CounterRng rng(11);
    Image x1 = random_image(p, rng);
    Image x2 = random_image(p, rng);
    const double a = 2.25, b = -0.75;
    Image combo(16, 16, 0.4, 0.0);
    for (std::size_t i = 0; i < combo.values.size(); ++i)
        combo.values[i] = a * x1.values[i] + b * x2.values[i];
    Sinogram lhs = forward_project(p, combo);
    Sinogram y1 = forward_project(p, x1);
    Sinogram y2 = forward_project(p, x2);
    for (std::size_t i = 0; i < lhs.values.size(); ++i) {
        const double want = a * y1.values[i] + b * y2.values[i];
        CHECK(oracle::rel_err(lhs.values[i], want) < 1e-12);
    }
}

TEST_CASE("nonnegative image gives nonnegative sinogram") {
    ScanGeometry g = tiny_geometry();
    Projector p(g, 16, 16, 0.4);
    CounterRng rng(13);
    Image x = random_image(p, rng, 0.0, 2.0);
    Sinogram y = forward_project(p, x);
    for (double v : y.values) CHECK(v >= 0.0);
}

TEST_CASE("results are bit-identical for any thread count") {
    ScanGeometry g = tiny_geometry(30, 40);
    Projector p(g, 24, 24, 0.25);
    CounterRng rng(17);
    Image x = random_image(p, rng);
    Sinogram y = random_sinogram(p, rng);

    const unsigned saved = thread_count();
    set_thread_count(1);
    Sinogram f1 = forward_project(p, x);
    Image b1 = back_project(p, y);
    set_thread_count(2);
    Sinogram f2 = forward_project(p, x);
    Image b2 = back_project(p, y);
    set_thread_count(5);
    Sinogram f5 = forward_project(p, x);
    Image b5 = back_project(p, y);
    set_thread_count(saved);

    CHECK(f1.values == f2.values);
    CHECK(f1.values == f5.values);
    CHECK(b1.values == b2.values);
    CHECK(b1.values == b5.values);
}

TEST_CASE("apply_weights") {
    Sinogram y(1, 2);
    y.values = {1.0, 3.0};
    SECTION("identity marker is a no-op") {
        Sinogram out = apply_weights(FidelityWeights::identity(), y);
        CHECK(out.values == y.values);
    }
    SECTION("diagonal scaling") {
        Sinogram out = apply_weights(FidelityWeights::diagonal({2.0, 2.0}), y);
        CHECK(out.values == std::vector<double>{2.0, 6.0});
    }
    SECTION("mismatched length is an error") {
        CHECK_THROWS_AS(apply_weights(FidelityWeights::diagonal({2.0}), y),
                        std::invalid_argument);
    }
}

TEST_CASE("shape mismatches are rejected") {
    Projector p(tiny_geometry(), 16, 16, 0.4);
    Image wrong(8, 8, 0.4, 0.0);
    CHECK_THROWS_AS(forward_project(p, wrong), std::invalid_argument);
    Sinogram bad(3, 3);
    CHECK_THROWS_AS(back_project(p, bad), std::invalid_argument);
}

TEST_CASE("operator norm estimate agrees with the dense oracle") {
    ScanGeometry g = tiny_geometry(10, 16);
    const int n = 6;
    const double px = 1.0;
    Projector p(g, n, n, px);
    const double got = operator_norm_estimate(p, 60);

    // power iteration on the dense clipping-oracle matrix
    auto a = oracle::dense_system_matrix(g, n, n, px);
    std::vector<double> v(static_cast<std::size_t>(n) * n, 1.0);
    double sigma = 0.0;
    for (int it = 0; it < 60; ++it) {
        std::vector<double> av(a.size(), 0.0);
        for (std::size_t r = 0; r < a.size(); ++r)
            for (std::size_t c = 0; c < v.size(); ++c) av[r] += a[r][c] * v[c];
        std::vector<double> atav(v.size(), 0.0);
        for (std::size_t r = 0; r < a.size(); ++r)
            for (std::size_t c = 0; c < v.size(); ++c) atav[c] += a[r][c] * av[r];
        double norm = 0.0;
        for (double x : atav) norm += x * x;
        norm = std::sqrt(norm);
        sigma = std::sqrt(norm);
        for (auto& x : atav) x /= norm;
        v = std::move(atav);
    }
    CHECK(got == Catch::Approx(sigma).epsilon(1e-6));
}

TEST_CASE("rays that miss the grid contribute zero") {
    // tiny image far smaller than the detector fan: edge bins miss it
    ScanGeometry g = tiny_geometry(8, 48);
    Projector p(g, 4, 4, 0.2);
    Image x(4, 4, 0.2, 1.0);
    Sinogram y = forward_project(p, x);
    CHECK(y.at(0, 0) == 0.0);
    CHECK(y.at(0, g.n_bins - 1) == 0.0);
    CHECK(y.at(0, g.n_bins / 2) > 0.0);
}
