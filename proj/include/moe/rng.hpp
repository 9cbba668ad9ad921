// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "moe/matrix.hpp"

namespace moe {

// Deterministic random source. mt19937_64 output is pinned by the standard,
// and the uniform/gaussian transforms below are written out by hand instead
// of going through std::*_distribution, whose streams are
// implementation-defined. Identical seeds give identical streams on every
// platform, which is what keeps report fixtures byte-stable.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1), 53 bits of mantissa.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller. Two draws per call, no cached spare.
    double gaussian() {
        const double u1 = 1.0 - uniform();  // (0, 1], keeps log() finite
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Uniform integer in [0, n). Modulo bias is irrelevant at these ranges.
    int below(int n) { return static_cast<int>(engine_() % static_cast<std::uint64_t>(n)); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            std::swap(v[i], v[below(i + 1)]);
        }
    }

    // Independent substream of a master seed (splitmix64 over seed ^ tag).
    static std::uint64_t derive(std::uint64_t master, std::uint64_t stream) {
        std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (stream + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

  private:
    std::mt19937_64 engine_;
};

inline Matrix gaussian_matrix(int rows, int cols, std::uint64_t seed) {
    Matrix m(rows, cols);
    Rng rng(seed);
    for (double& v : m.data) v = rng.gaussian();
    return m;
}

}  // namespace moe
