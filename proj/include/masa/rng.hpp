#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>

#include "masa/matrix.hpp"

namespace masa {

inline std::uint64_t fnv1a64(std::string_view bytes) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t& state) noexcept {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// xoshiro256** stream keyed by (seed, label). The engine and the uniform/normal
// transforms are written out here instead of using <random> distributions, whose
// output is implementation-defined.
class Rng {
public:
    Rng(std::uint64_t seed, std::string label) : seed_(seed), label_(std::move(label)) {
        std::uint64_t sm = seed_ ^ fnv1a64(label_);
        for (auto& s : s_) s = splitmix64(sm);
    }

    std::uint64_t seed() const noexcept { return seed_; }
    const std::string& label() const noexcept { return label_; }

    // Independent child stream; depends only on (seed, label, child label).
    Rng fork(std::string_view child) const { return Rng(seed_, label_ + "/" + std::string(child)); }

    std::uint64_t next_u64() noexcept {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; the second variate is cached.
    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(theta);
        has_spare_ = true;
        return radius * std::cos(theta);
    }

    std::size_t below(std::size_t n) noexcept { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }

    std::uint64_t seed_;
    std::string label_;
    std::uint64_t s_[4]{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

inline Matrix random_normal(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = stddev * rng.normal();
    return m;
}

inline Matrix random_uniform(std::size_t rows, std::size_t cols, Rng& rng, double lo, double hi) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = rng.uniform(lo, hi);
    return m;
}

// He/Kaiming uniform: U(-b, b) with b = sqrt(6 / fan_in), fan_in = cols.
inline Matrix kaiming_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
    if (rows == 0 || cols == 0) throw ContractError("kaiming_uniform: rows and cols must be >= 1");
    const double bound = std::sqrt(6.0 / static_cast<double>(cols));
    return random_uniform(rows, cols, rng, -bound, bound);
}

} // namespace masa
