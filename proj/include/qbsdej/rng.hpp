#pragma once

#include <cstdint>
#include <random>

namespace qbsdej {

/// Seeded generator for reproducible trials. The raw stream is mt19937_64
/// (bit-exact across platforms by specification); uniforms take the top 53
/// bits, so any implementation of the same engine reproduces the draws.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    static constexpr const char* algorithm() { return "mt19937_64/upper53"; }

    std::uint64_t next() { return engine_(); }

    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double range(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

private:
    std::mt19937_64 engine_;
};

}  // namespace qbsdej
