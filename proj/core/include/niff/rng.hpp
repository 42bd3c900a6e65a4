#pragma once

#include <cstdint>
#include <random>

namespace niff {

/// Seeded random source. One instance per independent stream; never shared
/// between threads.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }

    double uniform(double lo = 0.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }

    /// Inclusive bounds.
    int uniform_int(int lo, int hi) {
        return std::uniform_int_distribution<int>(lo, hi)(engine_);
    }

    std::uint64_t next() { return engine_(); }

    std::uint64_t seed() const { return seed_; }

    std::mt19937_64& engine() { return engine_; }

    /// Deterministically derive a child stream from this source's base seed;
    /// independent of how many draws were taken from the parent.
    Rng fork(std::uint64_t stream_id) const { return Rng(mix(seed_, stream_id)); }

    /// splitmix64-style mixer; used anywhere a composite key must become a seed.
    static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
        std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

}  // namespace niff
