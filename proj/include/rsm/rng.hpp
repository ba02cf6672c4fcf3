#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "rsm/common.hpp"

namespace rsm {

// 64-bit mix (splitmix64 finalizer). Used to derive independent stream seeds
// from (run seed, epoch, sample, layer, ...) tuples.
inline u64 mix64(u64 x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline u64 mix64(u64 a, u64 b) { return mix64(a ^ mix64(b)); }
inline u64 mix64(u64 a, u64 b, u64 c) { return mix64(mix64(a, b), c); }
inline u64 mix64(u64 a, u64 b, u64 c, u64 d) { return mix64(mix64(a, b, c), d); }

// Deterministic RNG. The engine is std::mt19937_64 (bit-exact by the
// standard); the distributions are hand-rolled because the std ones are
// implementation-defined and we promise bitwise-reproducible streams.
class Rng {
public:
    explicit Rng(u64 seed) : engine_(seed) {}

    u64 next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) by rejection.
    u64 below(u64 n) {
        if (n == 0) fail("Rng::below: n must be positive");
        const u64 limit = ~u64{0} - (~u64{0} % n);
        u64 x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    // Standard normal via Box-Muller; one value kept in reserve.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Log-uniform in [lo, hi], lo > 0.
    double log_uniform(double lo, double hi) {
        return std::exp(uniform(std::log(lo), std::log(hi)));
    }

    // Fisher-Yates permutation of {0..n-1}.
    std::vector<i64> permutation(i64 n) {
        std::vector<i64> p(static_cast<std::size_t>(n));
        for (i64 i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
        for (i64 i = n - 1; i > 0; --i) {
            const i64 j = static_cast<i64>(below(static_cast<u64>(i + 1)));
            std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
        }
        return p;
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace rsm
