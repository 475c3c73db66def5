#pragma once

// Counter-based pseudo-random generator. Each (seed, stream, substream)
// triple names an independent stream whose output depends only on the key
// and a local counter, so parallel consumers stay reproducible without
// sharing state.

#include <cstdint>
#include <limits>

namespace tomo {

class CounterRng {
public:
    using result_type = std::uint64_t;

    explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0,
                        std::uint64_t substream = 0)
        : key_(mix(mix(seed + 0x9e3779b97f4a7c15ull) ^
                   mix(stream + 0xbf58476d1ce4e5b9ull)) ^
               mix(substream + 0x94d049bb133111ebull)) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<std::uint64_t>::max(); }

    result_type operator()() { return mix(key_ + (++counter_) * 0x9e3779b97f4a7c15ull); }

private:
    // splitmix64 finalizer
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(CounterRng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(CounterRng& rng, double lo, double hi) {
    return lo + (hi - lo) * uniform01(rng);
}

// Stable seed derivation for manifests and per-sample streams.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    CounterRng rng(seed, a, b);
    return rng();
}

}  // namespace tomo
