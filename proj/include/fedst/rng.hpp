#pragma once

#include <cstdint>
#include <cmath>
#include <string>
#include <string_view>

namespace fedst {

// Deterministic PRNG (splitmix64). Self-contained so that generated datasets,
// parameter initialization and shuffles reproduce bit-exactly regardless of
// the standard library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform double in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range.
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
    }

    // Standard normal via Box-Muller. One draw per call (no cached spare) so
    // the stream position is a pure function of the call count.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Derive an independent sub-stream, e.g. per site or per clip.
    Rng fork(std::uint64_t tag) const {
        Rng r(state_ ^ (0xa0761d6478bd642fULL * (tag + 1)));
        r.next_u64();
        return r;
    }

private:
    std::uint64_t state_;
};

// FNV-1a 64-bit. Stable across platforms; seeds text-derived indicators.
inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace fedst
