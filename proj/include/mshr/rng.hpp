#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string_view>
#include <vector>

namespace mshr {

// Deterministic, platform-independent RNG (xoshiro256** seeded via
// splitmix64). std::normal_distribution and friends are implementation
// defined, so everything that must be bit-reproducible goes through this.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& word : s_) word = splitmix64(x);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n), n >= 1. Rejection-free bounded draw
    // (Lemire), deterministic across platforms.
    uint64_t next_below(uint64_t n) {
        __uint128_t m = static_cast<__uint128_t>(next_u64()) * n;
        return static_cast<uint64_t>(m >> 64);
    }

    // Standard normal via Box-Muller; one value per call, spare cached.
    double next_normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    static uint64_t splitmix64(uint64_t& state) {
        uint64_t z = (state += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Stable 64-bit hash for deriving independent streams from a base seed
    // plus a label (e.g. a tensor name), insertion-order independent.
    static uint64_t derive(uint64_t seed, std::string_view label) {
        uint64_t h = 0xcbf29ce484222325ull ^ seed;
        for (unsigned char c : label) {
            h ^= c;
            h *= 0x100000001b3ull;
        }
        uint64_t x = h;
        return splitmix64(x);
    }

    static uint64_t derive(uint64_t seed, uint64_t label) {
        uint64_t x = seed ^ (0x9e3779b97f4a7c15ull + label);
        uint64_t a = splitmix64(x);
        return splitmix64(x) ^ a;
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4];
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace mshr
