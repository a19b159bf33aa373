#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace asymtok {

// Deterministic random source. mt19937_64 output is fully specified by the
// standard; the distributions below are hand-rolled because the std
// distribution objects are implementation-defined and would break
// cross-toolchain reproducibility of seeded weights and corpora.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 bits of entropy.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        // Rejection sampling keeps the draw unbiased for any n.
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = engine_();
        while (x >= limit) x = engine_();
        return x % n;
    }

    // Standard normal via Box-Muller. One value per call; the cached twin is
    // discarded so the stream depends only on call count.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    double normal(double mean, double std) { return mean + std * normal(); }

private:
    std::mt19937_64 engine_;
};

// Stable mixing for deriving per-sample seeds from a base seed.
inline uint64_t mix_seed(uint64_t base, uint64_t salt) {
    uint64_t x = base + 0x9e3779b97f4a7c15ull * (salt + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
}

}  // namespace asymtok
