#ifndef EVFUSE_RNG_HPP
#define EVFUSE_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>

#include "evfuse/tensor.hpp"

namespace evfuse {

// All randomness in the project flows through this wrapper so that a fixed
// seed gives the same draw sequence on every platform. The distributions are
// hand-rolled: the standard library leaves std::uniform_*_distribution
// implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(splitmix64(seed)) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(eng_() % span);
    }

    bool coin() { return (eng_() & 1) != 0; }

    // Derive an independent child stream; used to give each sequence in a
    // batch its own generator regardless of consumption order.
    Rng fork() { return Rng(eng_()); }

    static uint64_t splitmix64(uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

private:
    std::mt19937_64 eng_;
};

// Kaiming-style uniform fill over [-limit, limit], limit = sqrt(6 / fan_in).
inline Tensor he_uniform(Rng& rng, int c, int h, int w, int fan_in) {
    Tensor t(c, h, w);
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& x : t.v) x = rng.uniform(-limit, limit);
    return t;
}

} // namespace evfuse

#endif
