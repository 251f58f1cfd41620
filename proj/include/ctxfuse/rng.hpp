#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace ctxfuse {

// Deterministic splitmix64 generator. Every random choice in the library
// flows through an explicit Rng; there is no global state. Independent
// streams are derived with derive_stream so that per-sample generation is
// identical whether samples are produced serially or out of order.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi); hi must be > lo.
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(uniform() * static_cast<double>(hi - lo));
    }

    // Standard normal via Box-Muller (one value per call).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            int j = uniform_int(0, i + 1);
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
        }
    }

private:
    std::uint64_t state_;
};

// Derives a decorrelated child seed from (seed, stream). Used to give each
// sample / model / epoch its own stream.
inline std::uint64_t derive_stream(std::uint64_t seed, std::uint64_t stream) {
    Rng mix(seed ^ (0x517cc1b727220a95ULL * (stream + 1)));
    mix.next_u64();
    return mix.next_u64();
}

}  // namespace ctxfuse
