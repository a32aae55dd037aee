#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace driftlm {

using Rng = std::mt19937_64;

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline double uniform_in(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double standard_normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

inline int uniform_int(Rng& rng, int lo, int hi_inclusive) {
    return std::uniform_int_distribution<int>(lo, hi_inclusive)(rng);
}

// Inverse-CDF draw from unnormalized nonnegative weights; returns an index into `weights`.
int categorical(std::span<const double> weights, Rng& rng);

}  // namespace driftlm
