#pragma once

#include <array>
#include <cstdint>

namespace physgan {

// Deterministic PRNG: xoshiro256** seeded through splitmix64.
// Identical seeds give identical streams on every platform; `fork` derives an
// independent child stream without consuming parent state, so parallel jobs
// can draw from disjoint streams reproducibly.
class Rng {
public:
    explicit Rng(uint64_t seed);

    uint64_t next_u64();
    // Uniform in [0, 1).
    double uniform();
    // Uniform in [lo, hi).
    double uniform(double lo, double hi);
    // Standard normal via Box-Muller; consumes two uniforms per call.
    double normal();
    // Child stream keyed by `stream`; same (state, stream) -> same child.
    Rng fork(uint64_t stream) const;

private:
    std::array<uint64_t, 4> state_{};
};

// splitmix64 step; advances `state` and returns the next value.
uint64_t splitmix64(uint64_t& state);

}  // namespace physgan
