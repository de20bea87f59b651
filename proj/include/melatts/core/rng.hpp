#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "melatts/core/matrix.hpp"

namespace melatts {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Stable seed derivation for independent streams, e.g. per (step, example).
inline uint64_t derive_seed(uint64_t base, uint64_t a = 0, uint64_t b = 0, uint64_t c = 0) {
    uint64_t s = splitmix64(base ^ 0x6a09e667f3bcc908ULL);
    s = splitmix64(s ^ a);
    s = splitmix64(s ^ b);
    s = splitmix64(s ^ c);
    return s;
}

// mt19937_64 with hand-rolled distributions so draws are identical across
// standard library implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    int uniform_int(int n) {
        if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
        return static_cast<int>(engine_() % static_cast<uint64_t>(n));
    }

    // Uniform integer in [lo, hi] inclusive.
    int uniform_int(int lo, int hi) { return lo + uniform_int(hi - lo + 1); }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller without spare caching, so the stream depends only on the
    // engine state.
    double gaussian() {
        double u1 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    std::string serialize() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }
    void deserialize(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
    }

private:
    std::mt19937_64 engine_;
};

template <typename T>
void fill_gaussian(Matrix<T>& m, Rng& rng, double stddev = 1.0, double mean = 0.0) {
    for (size_t i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(mean + stddev * rng.gaussian());
}

template <typename T>
Matrix<T> gaussian_matrix(int rows, int cols, Rng& rng, double stddev = 1.0) {
    Matrix<T> m(rows, cols);
    fill_gaussian(m, rng, stddev);
    return m;
}

}  // namespace melatts
