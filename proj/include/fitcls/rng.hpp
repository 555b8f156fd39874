#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace fitcls {

/// 64-bit FNV-1a. Used for stream names, vocabulary and config fingerprints.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

/// PCG-XSH-RR generator (64-bit state, 32-bit output, selectable stream).
///
/// Every random draw in the project goes through this type. The standard
/// library distributions are avoided because their algorithms differ between
/// implementations; uniform, bounded and normal draws are defined here.
class Pcg32 {
public:
    explicit Pcg32(std::uint64_t seed = 0x853c49e6748fea9bULL,
                   std::uint64_t stream = 0xda3e39cb94b95bdbULL);

    /// Generator on a stream derived from a name, e.g. "lm/layer1/weight_drop".
    static Pcg32 named(std::uint64_t seed, std::string_view name);

    std::uint32_t next_u32();
    std::uint64_t next_u64();

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform();
    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi);
    /// Unbiased integer in [0, bound). bound must be > 0.
    std::uint64_t below(std::uint64_t bound);
    /// Standard normal via Box-Muller (one output per call, no caching).
    double normal();

    template <typename T>
    void shuffle(std::span<T> items) {
        // Fisher-Yates, last element first.
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::uint64_t state_ = 0;
    std::uint64_t inc_ = 0;
};

}  // namespace fitcls
