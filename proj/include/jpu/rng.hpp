#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "jpu/errors.hpp"

namespace jpu {

// Deterministic splitmix64 generator. Every randomized stage in the pipeline
// pulls from one of these, seeded through derive() with a purpose tag, so runs
// reproduce bit-for-bit across machines and standard-library versions
// (std::mt19937 distributions are not portable across implementations).
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ull) {
        // avoid the short all-zero warmup
        next_u64();
        next_u64();
    }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [lo, hi] via rejection, bias-free
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (lo > hi) throw ContractError("uniform_int: lo > hi");
        uint64_t span = uint64_t(hi - lo) + 1;
        if (span == 0) return int64_t(next_u64()); // full 64-bit range
        uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return lo + int64_t(v % span);
    }

    // standard normal, Box-Muller with one cached value
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1, u2;
        do {
            u1 = next_double();
        } while (u1 <= 0.0);
        u2 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    // Fisher-Yates shuffle
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(uniform_int(0, int64_t(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derive an independent named stream from (seed, tag, index). FNV-1a over
    // the tag keeps streams for different stages decorrelated.
    static Rng derive(uint64_t seed, std::string_view tag, uint64_t index = 0) {
        uint64_t h = 0xcbf29ce484222325ull;
        for (char c : tag) {
            h ^= uint8_t(c);
            h *= 0x100000001b3ull;
        }
        h ^= index + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
        return Rng(seed ^ h);
    }

  private:
    uint64_t state_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

} // namespace jpu
