#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace polarpath {

inline constexpr const char* kVersion = "0.1.0";

// Error hierarchy. Subtypes let callers and tests distinguish malformed
// input from dimension mismatches and truncated payloads.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InvalidArgument : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct TruncationError : Error {
    using Error::Error;
};
struct DimensionError : Error {
    using Error::Error;
};
struct DegenerateClassError : Error {
    using Error::Error;
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic sub-seed derivation: hash of (base, index, purpose tag).
inline uint64_t derive_seed(uint64_t base, uint64_t index, uint64_t tag = 0) {
    return splitmix64(splitmix64(base ^ 0x5bd1e9955bd1e995ULL) ^ splitmix64(index) ^ tag);
}

// Seeded RNG with explicit sampling code so results do not depend on the
// standard library's distribution implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0x2545f4914f6cdd1dULL)) {}

    uint64_t next_u64() {
        state_ = splitmix64(state_ + 0x9e3779b97f4a7c15ULL);
        return state_;
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::size_t uniform_index(std::size_t n) {
        return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
    }

    // Box-Muller, one value per call (the pair's twin is cached).
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[uniform_index(i)]);
        }
    }

private:
    uint64_t state_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

// Dense row-major matrix of doubles.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> v;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return v[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

inline std::size_t thread_budget() {
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    if (const char* env = std::getenv("POLARPATH_THREADS")) {
        const long cap = std::strtol(env, nullptr, 10);
        if (cap >= 1 && static_cast<unsigned>(cap) < hw) hw = static_cast<unsigned>(cap);
    }
    return hw;
}

// Runs fn(i) for i in [0, n). Work items must be independent; output
// placement decides determinism, not scheduling order.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::min(thread_budget(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

inline void softmax_inplace(std::vector<double>& z) {
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double& x : z) {
        x = std::exp(x - zmax);
        sum += x;
    }
    for (double& x : z) x /= sum;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Sum in value order, so the result does not depend on the input ordering.
// Used where a reduction must be exactly invariant under permutations.
inline double canonical_sum(std::vector<double>& terms) {
    std::sort(terms.begin(), terms.end());
    double sum = 0.0;
    for (double t : terms) sum += t;
    return sum;
}

}  // namespace polarpath
