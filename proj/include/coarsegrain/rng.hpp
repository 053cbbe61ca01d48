#pragma once

// Seed derivation and random variates. All randomness in the project flows
// from a master seed through derive_seed(); there is no global RNG state.

#include <cstdint>
#include <random>
#include <string_view>

namespace coarsegrain {

/// Counter-based split: maps (master, stream name, index) to an independent
/// 64-bit seed. Adding trials never changes the seeds of earlier trials.
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream, std::uint64_t index = 0);

/// mt19937_64 with portable uniform and normal transforms, so draws are
/// identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform on [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer on [0, n).
    std::uint64_t below(std::uint64_t n);
    double normal();
    bool coin() { return (next_u64() >> 63) != 0; }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace coarsegrain
