#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace obsd {

// Exit-code-bearing errors. The CLI maps these onto process exit codes;
// library code throws them directly.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
    static constexpr int exit_code = 2;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
    static constexpr int exit_code = 3;
};
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
    static constexpr int exit_code = 4;
};
struct AcceptanceError : std::runtime_error {
    using std::runtime_error::runtime_error;
    static constexpr int exit_code = 5;
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic RNG. All draws are implemented here rather than through
// std::*_distribution, whose output is implementation-defined. Counters on
// array draws let tests instrument sampling loops.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        // splitmix64 expansion of the seed into the xoshiro-style state
        uint64_t x = seed;
        for (auto& s : state_) {
            x = splitmix64(x);
            s = x;
        }
        have_spare_ = false;
        spare_ = 0.0;
        normal_array_calls_ = 0;
    }

    // Derive an independent stream, e.g. per item or per category.
    Rng derive(uint64_t tag) const {
        return Rng(splitmix64(state_[0] ^ splitmix64(tag ^ 0x6f4a7c15ull)));
    }

    uint64_t next_u64() {
        // xoshiro256**
        uint64_t* s = state_;
        uint64_t result = rotl(s[1] * 5, 7) * 9;
        uint64_t t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = rotl(s[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Fixed-point multiply, no modulo bias to speak of.
    uint64_t bounded(uint64_t n) {
        return (uint64_t)(((unsigned __int128)next_u64() * n) >> 64);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller (trig form), spare cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    void fill_normal(float* dst, size_t n) {
        for (size_t i = 0; i < n; ++i) dst[i] = (float)normal();
        ++normal_array_calls_;
    }
    void fill_normal(double* dst, size_t n) {
        for (size_t i = 0; i < n; ++i) dst[i] = normal();
        ++normal_array_calls_;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[bounded(i)]);
    }

    // Number of fill_normal() calls since construction/reseed. lss_sample is
    // required to make exactly one whole-image draw per timestep; tests check
    // this counter.
    size_t normal_array_calls() const { return normal_array_calls_; }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t state_[4] = {};
    bool have_spare_ = false;
    double spare_ = 0.0;
    size_t normal_array_calls_ = 0;
};

inline std::string format_count(size_t n, const char* noun) {
    return std::to_string(n) + " " + noun + (n == 1 ? "" : "s");
}

}  // namespace obsd
