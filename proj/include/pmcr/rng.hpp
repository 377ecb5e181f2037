#pragma once

// Counter-based deterministic RNG (splitmix64 stream). All randomness in
// the project flows through this type so runs are reproducible bit-for-bit
// across platforms; never use std:: distributions, they are not portable.

#include <cmath>
#include <cstdint>

namespace pmcr {

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), state_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t state() const { return state_; }
    void restore(std::uint64_t seed, std::uint64_t state) {
        seed_ = seed;
        state_ = state;
    }

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n), multiply-shift; bias is O(n / 2^64)
    std::uint64_t uniform_int(std::uint64_t n) {
        return std::uint64_t((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Box-Muller, two draws per call so the stream position is call-count
    // deterministic.
    double normal() {
        double u1 = uniform(), u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Independent child stream, e.g. one per worker or per scan.
    Rng fork(std::uint64_t tag) {
        std::uint64_t s = next_u64();
        return Rng(s ^ (tag * 0xD1342543DE82EF95ull));
    }

private:
    std::uint64_t seed_;
    std::uint64_t state_;
};

}  // namespace pmcr
