#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace crowdsplat {

// SplitMix64 finalizer: a bijective 64-bit mix.
constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Combine a base seed with stream identifiers (person index, view index...).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    return mix64(mix64(seed ^ 0x6a09e667f3bcc909ULL) + 0x9e3779b97f4a7c15ULL * (a + 1)
                 + 0xd1b54a32d192ed03ULL * (b + 1));
}

/// Counter-based generator ("splitmix64-ctr"). Draw i of a stream is
/// mix64(seed + (i + 1) * golden_gamma), so every draw is a pure function of
/// (seed, counter) and sequences can be replayed by any implementation.
///
/// uniform01 uses the top 53 bits: (u >> 11) * 2^-53.
/// uniform_int(lo, hi) is lo + floor(uniform01 * (hi - lo + 1)), clamped to hi.
class CounterRng {
public:
    using result_type = std::uint64_t;

    explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return ~result_type{0}; }

    result_type operator()() { return next_u64(); }

    std::uint64_t next_u64() {
        ++counter_;
        return mix64(seed_ + counter_ * 0x9e3779b97f4a7c15ULL);
    }

    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    int uniform_int(int lo, int hi) {
        const double span = static_cast<double>(hi) - static_cast<double>(lo) + 1.0;
        const int v = lo + static_cast<int>(std::floor(uniform01() * span));
        return v > hi ? hi : v;
    }

    bool bernoulli(double p) { return uniform01() < p; }

    // Box-Muller, one normal per two uniforms (no caching, keeps replay simple).
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform01();
        const double u2 = uniform01();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t draws() const { return counter_; }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

}  // namespace crowdsplat
