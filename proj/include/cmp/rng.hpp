#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace cmp {

/// splitmix64, used both as a hash mixer and as the engine behind Rng.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Order-independent seed derivation: hash64(master, "aug", sample_id, patch)
/// gives every augmentation its own deterministic stream.
inline std::uint64_t hash64(std::uint64_t seed, std::string_view tag,
                            std::uint64_t a = 0, std::uint64_t b = 0) {
    std::uint64_t s = seed;
    splitmix64(s);
    for (char c : tag) {
        s ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
        splitmix64(s);
    }
    s ^= a;
    splitmix64(s);
    s ^= b;
    return splitmix64(s);
}

/// Small deterministic RNG. Identical sequences on every platform for a
/// given seed; that property backs every determinism contract in the repo.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // warm up so that small seeds diverge immediately
        next_u64();
        next_u64();
    }

    std::uint64_t next_u64() { return splitmix64(state_); }

    /// uniform in [0, 1)
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    /// uniform integer in [0, n), n >= 1; rejection-free modulo is fine here
    /// because n is always tiny relative to 2^64.
    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

    /// standard normal via Box-Muller (always consumes two uniforms)
    double normal() {
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 1e-300) u1 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_;
};

}  // namespace cmp
