#pragma once

// Low-dose projection simulation: compound Poisson + Gaussian electronic
// noise on pre-log counts, and the log transform back to line integrals.
// Every detector bin draws from its own counter-based stream, so the
// simulation is reproducible and order-independent under parallelism.

#include <array>
#include <cmath>
#include <iostream>
#include <random>
#include <stdexcept>

#include "tomo/core.hpp"
#include "tomo/parallel.hpp"
#include "tomo/projector.hpp"
#include "tomo/rng.hpp"

namespace tomo {

struct NoiseModel {
    double incident_intensity = 1e5;   // photons per ray
    double electronic_variance = 10.0; // counts^2
    std::uint64_t rng_seed = 0;

    void validate() const {
        if (!(incident_intensity > 0.0))
            throw std::invalid_argument("NoiseModel: incident_intensity must be > 0");
        if (electronic_variance < 0.0)
            throw std::invalid_argument("NoiseModel: electronic_variance must be >= 0");
    }
};

// The dose levels studied in the experiments.
inline constexpr std::array<double, 4> kDosePresets = {1e5, 5e4, 1e4, 5e3};

// Counts below this value are clamped before the log transform.
inline constexpr double kCountsFloor = 1.0;

// counts_i ~ Poisson(I * exp(-clean_i)) + Normal(0, electronic_variance).
inline Sinogram simulate_counts(const NoiseModel& m, const Sinogram& clean) {
    m.validate();
    int negatives = 0;
    for (double v : clean.values) {
        if (!std::isfinite(v)) throw std::invalid_argument("simulate_counts: non-finite input");
        if (v < 0.0) ++negatives;
    }
    if (negatives > 0)
        std::cerr << "simulate_counts: " << negatives
                  << " negative line integrals (amplified counts)\n";

    Sinogram counts(clean.n_views, clean.n_bins, SinogramDomain::pre_log_counts);
    const double sigma_e = std::sqrt(m.electronic_variance);
    parallel_for(clean.values.size(), [&](std::size_t i) {
        CounterRng rng(m.rng_seed, i);
        const double mean = m.incident_intensity * std::exp(-clean.values[i]);
        double value = 0.0;
        if (mean > 0.0) {
            std::poisson_distribution<long long> poisson(mean);
            value = static_cast<double>(poisson(rng));
        }
        if (sigma_e > 0.0) {
            std::normal_distribution<double> gauss(0.0, sigma_e);
            value += gauss(rng);
        }
        counts.values[i] = value;
    });
    return counts;
}

// y_i = ln(I / max(counts_i, floor)).
inline Sinogram log_transform(const NoiseModel& m, const Sinogram& counts) {
    m.validate();
    if (counts.domain != SinogramDomain::pre_log_counts)
        throw std::invalid_argument("log_transform: expected pre_log_counts input");
    Sinogram y(counts.n_views, counts.n_bins, SinogramDomain::post_log);
    for (std::size_t i = 0; i < counts.values.size(); ++i)
        y.values[i] = std::log(m.incident_intensity / std::max(counts.values[i], kCountsFloor));
    return y;
}

// Training pair: clean image + its simulated low-dose projections.
inline std::pair<Sinogram, Image> make_low_dose_pair(const Image& x, const Projector& p,
                                                     const NoiseModel& m) {
    Sinogram clean = forward_project(p, x);
    Sinogram counts = simulate_counts(m, clean);
    return {log_transform(m, counts), x};
}

}  // namespace tomo
