#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace marginforge {

/// Deterministic random source. All randomness in the library flows through
/// this wrapper so that results are reproducible bit-for-bit for a given
/// seed: the engine (mt19937_64) has standardized output, and the value
/// mappings below are implemented here instead of relying on the
/// implementation-defined standard distributions.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Stable sub-stream derivation, e.g. per-example attack noise from
    /// (run seed, example index) or per-epoch shuffles from (seed, epoch).
    static std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
        return mix(seed ^ mix(stream + 0x9E3779B97F4A7C15ULL));
    }
    static std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
        return mix(stream_seed(seed, a) + b);
    }
    static Rng derive(std::uint64_t seed, std::uint64_t stream) {
        return Rng(stream_seed(seed, stream));
    }
    static Rng derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
        return Rng(stream_seed(seed, a, b));
    }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform double in [0, 1) with 53 bits of precision.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    /// Standard normal via Box-Muller; the second variate is discarded so
    /// calls are independent of call parity.
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    /// Uniform index in [0, n); n must be positive.
    std::size_t index(std::size_t n) {
        std::size_t i = static_cast<std::size_t>(uniform() * static_cast<double>(n));
        return i < n ? i : n - 1;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[index(i)]);
        }
    }

private:
    // splitmix64 finalizer; spreads low-entropy stream ids.
    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::mt19937_64 engine_;
};

}  // namespace marginforge
