#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace lipsync::nn {

// xoshiro256++ with splitmix64 seeding. Self-contained so every artifact is
// bit-reproducible from (seed, call order) across platforms and stdlibs.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t x = seed;
        for (auto& si : s_) si = splitmix64(x);
        have_spare_ = false;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0,1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    float uniformf() { return static_cast<float>(uniform()); }
    float uniformf(float lo, float hi) { return lo + (hi - lo) * uniformf(); }

    // Uniform integer in [0, n).
    int64_t randint(int64_t n) { return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n)); }

    // Standard normal via Box-Muller.
    float gauss() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 1e-300);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = static_cast<float>(r * std::sin(theta));
        have_spare_ = true;
        return static_cast<float>(r * std::cos(theta));
    }

    void fill_gauss(float* dst, int64_t n, float stddev = 1.0f) {
        for (int64_t i = 0; i < n; i++) dst[i] = gauss() * stddev;
    }
    void fill_uniform(float* dst, int64_t n, float lo, float hi) {
        for (int64_t i = 0; i < n; i++) dst[i] = uniformf(lo, hi);
    }

    // k distinct values from [0,n) in draw order.
    std::vector<int> sample_without_replacement(int n, int k, int exclude = -1);

    // Derives an independent stream; used to give each step/clip its own rng.
    Rng fork(uint64_t stream) {
        uint64_t x = s_[0] ^ (0x9e3779b97f4a7c15ull * (stream + 1));
        return Rng(x);
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    static uint64_t splitmix64(uint64_t& x) {
        uint64_t z = (x += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    uint64_t s_[4] = {};
    bool have_spare_ = false;
    float spare_ = 0.0f;
};

} // namespace lipsync::nn
