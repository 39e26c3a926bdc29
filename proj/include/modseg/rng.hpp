#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace modseg {

/// SplitMix64 finalizer. Bijective 64-bit mixing function.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept
{
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Derives an independent child seed from (parent, stream id).
constexpr std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t stream) noexcept
{
    return mix64(mix64(parent) ^ (stream * 0xd1b54a32d192ed03ULL + 0x632be59bd9b4e019ULL));
}

/**
 * Counter-based generator: the i-th draw is mix64(key + i * golden) run
 * through a second mixing round. Everything is integer arithmetic, and the
 * floating-point transforms below use only IEEE basic operations plus
 * std::log/std::sqrt/std::cos, so a (key, counter) pair yields the same
 * value on every conforming platform. The standard <random> distributions
 * are avoided because their algorithms are implementation-defined.
 */
class CounterRng {
public:
    explicit CounterRng(std::uint64_t key, std::uint64_t counter = 0) noexcept
        : key_(key), counter_(counter)
    {
    }

    std::uint64_t next_u64() noexcept
    {
        const std::uint64_t x = key_ + 0x9e3779b97f4a7c15ULL * (counter_++);
        return mix64(mix64(x) ^ key_);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in the open interval (lo, hi).
    double uniform_open(double lo, double hi) noexcept
    {
        double u;
        do {
            u = uniform();
        } while (u == 0.0);
        return lo + (hi - lo) * u;
    }

    /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
    std::uint64_t below(std::uint64_t n) noexcept
    {
        if (n <= 1) return 0;
        const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
        std::uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    int bit() noexcept { return static_cast<int>(next_u64() >> 63); }

    /// Standard normal via Box-Muller (one value per call, two uniforms consumed).
    double normal() noexcept
    {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t counter() const noexcept { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_;
};

}  // namespace modseg
