#include "fitcls/rng.hpp"

#include <cmath>
#include <numbers>

namespace fitcls {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

Pcg32::Pcg32(std::uint64_t seed, std::uint64_t stream) : inc_((stream << 1u) | 1u) {
    next_u32();
    state_ += seed;
    next_u32();
}

Pcg32 Pcg32::named(std::uint64_t seed, std::string_view name) {
    return Pcg32(seed, fnv1a64(name));
}

std::uint32_t Pcg32::next_u32() {
    std::uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    auto xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    auto rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
}

std::uint64_t Pcg32::next_u64() {
    std::uint64_t hi = next_u32();
    return (hi << 32u) | next_u32();
}

double Pcg32::uniform() {
    return static_cast<double>(next_u64() >> 11u) * 0x1.0p-53;
}

double Pcg32::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

std::uint64_t Pcg32::below(std::uint64_t bound) {
    // Rejection on the top of the range keeps the draw unbiased.
    std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
        std::uint64_t r = next_u64();
        if (r >= threshold) return r % bound;
    }
}

double Pcg32::normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace fitcls
