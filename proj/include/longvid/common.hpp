#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>

namespace longvid {

// Config or input validation failure. CLI exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values or other numerical failure at runtime. CLI exit code 3.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <typename S>
void ensure_finite(std::span<const S> x, const std::string& name) {
    for (size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(static_cast<double>(x[i]))) {
            throw NumericError(name + "[" + std::to_string(i) + "] is not finite");
        }
    }
}

// Deterministic RNG helpers. std::uniform_* distributions are
// implementation-defined, so outputs are derived from raw mt19937_64 draws
// to keep seeded results byte-identical across toolchains.
using Rng = std::mt19937_64;

inline double uniform01(Rng& g) {
    return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& g, double lo, double hi) {
    return lo + (hi - lo) * uniform01(g);
}

inline uint64_t uniform_index(Rng& g, uint64_t n) {
    return n == 0 ? 0 : g() % n;
}

inline double normal(Rng& g, double mean = 0.0, double stddev = 1.0) {
    double u1 = 1.0 - uniform01(g);  // in (0, 1]
    double u2 = uniform01(g);
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    return mean + stddev * z;
}

template <typename It>
void shuffle_indices(It first, It last, Rng& g) {
    auto n = static_cast<uint64_t>(last - first);
    for (uint64_t i = n; i > 1; --i) {
        std::swap(first[i - 1], first[uniform_index(g, i)]);
    }
}

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace longvid
