#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace pko::rng {

// Counter-based random numbers: every draw is a pure function of
// (seed, stream, counter, lane), so trials can run in any order.

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

constexpr std::uint64_t hash(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter,
                             std::uint64_t lane = 0) noexcept {
    std::uint64_t h = splitmix64(seed);
    h = splitmix64(h ^ stream);
    h = splitmix64(h ^ counter);
    return splitmix64(h ^ lane);
}

// Uniform in [0, 1) with 53 random bits.
constexpr double to_unit(std::uint64_t bits) noexcept {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

inline double uniform(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter,
                      std::uint64_t lane = 0) noexcept {
    return to_unit(hash(seed, stream, counter, lane));
}

inline double uniform(double lo, double hi, std::uint64_t seed, std::uint64_t stream,
                      std::uint64_t counter, std::uint64_t lane = 0) noexcept {
    return lo + (hi - lo) * uniform(seed, stream, counter, lane);
}

// Standard normal via Box-Muller on two independent lanes.
inline double normal(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter,
                     std::uint64_t lane = 0) noexcept {
    const double u1 = 1.0 - uniform(seed, stream, counter, 2 * lane);  // (0, 1]
    const double u2 = uniform(seed, stream, counter, 2 * lane + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// Sequential convenience wrapper over the counter-based draws.
class Stream {
public:
    Stream(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}

    double uniform() noexcept { return rng::uniform(seed_, stream_, counter_++); }
    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
    double normal() noexcept { return rng::normal(seed_, stream_, counter_++); }
    std::uint64_t bits() noexcept { return hash(seed_, stream_, counter_++); }

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t counter_ = 0;
};

}  // namespace pko::rng
