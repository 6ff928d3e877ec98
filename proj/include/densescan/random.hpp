#pragma once

#include "densescan/tensor.hpp"

#include <cstdint>

namespace densescan {

/// SplitMix64. Integer-only state transitions, so a seed produces the same
/// stream on every platform; split() derives an independent child stream.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    SplitMix64 split() { return SplitMix64(next()); }

    /// Uniform in [0, 1) with 24 bits of resolution (exact in float).
    float unit() { return static_cast<float>(next() >> 40) * (1.0f / 16777216.0f); }

    /// Uniform in [lo, hi); the affine map is evaluated in double and rounded once.
    float uniform(float lo, float hi) {
        double u = static_cast<double>(next() >> 40) / 16777216.0;
        return static_cast<float>(static_cast<double>(lo) + (static_cast<double>(hi) - lo) * u);
    }

    std::uint64_t below(std::uint64_t bound) { return next() % bound; }

private:
    std::uint64_t state_;
};

inline Tensor random_tensor(Shape shape, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
    SplitMix64 rng(seed);
    Buffer data(shape.element_count());
    for (auto& v : data) v = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(data));
}

}  // namespace densescan
