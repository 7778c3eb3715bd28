#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace svit {

// Deterministic RNG used throughout. One master stream per run; components
// derive sub-streams so that adding a consumer does not perturb the others.
using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

// Sub-stream derivation: stable hash of (seed, tag) so each component draws
// from an independent, reproducible sequence.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t x = seed ^ (tag * 0x9e3779b97f4a7c15ULL);
    x ^= x >> 30; x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27; x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

// Uniform double in [0,1) with pinned bit-level construction (53-bit mantissa),
// independent of the standard library's distribution implementation.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Standard normal via Box-Muller, fully determined by the stream.
inline double normal(Rng& rng) {
    double u1 = uniform01(rng);
    double u2 = uniform01(rng);
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

inline double exponential(Rng& rng) {
    // -log(1-u), u in [0,1)
    return -std::log1p(-uniform01(rng));
}

}  // namespace svit
