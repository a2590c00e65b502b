#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>

namespace gbt {

/// splitmix64 step; advances `state` and returns the next output.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Derives an independent stream key from a base seed and a textual tag.
inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view tag) {
    std::uint64_t state = seed ^ fnv1a64(tag);
    return splitmix64(state);
}

/// xoshiro256** seeded by splitmix64 expansion of a 64-bit key.
/// All derived draws (uniform, bounded, normal) are pinned algorithms so
/// that seeded streams are identical across platforms and compilers.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& s : state_) s = splitmix64(sm);
    }

    std::uint64_t next() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Unbiased integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n) {
        // Lemire's multiply-shift with rejection of the biased low range.
        std::uint64_t x = next();
        __uint128_t m = static_cast<__uint128_t>(x) * n;
        auto lo = static_cast<std::uint64_t>(m);
        if (lo < n) {
            const std::uint64_t threshold = (0 - n) % n;
            while (lo < threshold) {
                x = next();
                m = static_cast<__uint128_t>(x) * n;
                lo = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    bool coin() { return (next() >> 63) != 0; }

    /// Standard normal via Box-Muller; second member of each pair is cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 == 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double two_pi = 6.283185307179586476925286766559;
        spare_ = r * std::sin(two_pi * u2);
        have_spare_ = true;
        return r * std::cos(two_pi * u2);
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

private:
    static std::uint64_t rotl(std::uint64_t v, int k) {
        return (v << k) | (v >> (64 - k));
    }

    std::array<std::uint64_t, 4> state_{};
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace gbt
