#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

namespace xmgc {

// Fixed stream ids so independent consumers of one run seed never share a
// sequence.
enum class RngStream : std::uint64_t {
    ParamInit = 1,
    Data = 2,
    Synthetic = 3,
    Classifier = 4,
    Gradcheck = 5,
    Test = 6,
};

/// PCG32 generator. Self-contained so sequences are identical across
/// platforms and standard libraries, and the state serializes to 16 bytes.
class Rng {
public:
    Rng() : Rng(0, RngStream::Test) {}
    Rng(std::uint64_t seed, RngStream stream)
        : Rng(seed, static_cast<std::uint64_t>(stream)) {}
    Rng(std::uint64_t seed, std::uint64_t stream) {
        state_ = 0;
        inc_ = (stream << 1u) | 1u;
        next_u32();
        state_ += splitmix64(seed);
        next_u32();
    }

    std::uint32_t next_u32() {
        std::uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        auto xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
        auto rot = static_cast<std::uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
    }

    /// Uniform in [0, 1).
    double uniform() { return next_u32() * 0x1p-32; }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Unbiased uniform integer in [0, bound). bound must be >= 1.
    std::uint32_t uniform_int(std::uint32_t bound) {
        if (bound <= 1) return 0;
        std::uint32_t threshold = (-bound) % bound;
        for (;;) {
            std::uint32_t r = next_u32();
            if (r >= threshold) return r % bound;
        }
    }

    /// Standard normal via Box-Muller. Draws two words per call so the
    /// state needs no cached spare.
    double normal() {
        double u1 = (static_cast<double>(next_u32()) + 1.0) * 0x1p-32;  // (0, 1]
        double u2 = next_u32() * 0x1p-32;                               // [0, 1)
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    std::array<std::uint8_t, 16> serialize() const {
        std::array<std::uint8_t, 16> out{};
        for (int i = 0; i < 8; ++i) out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(state_ >> (8 * i));
        for (int i = 0; i < 8; ++i) out[static_cast<std::size_t>(8 + i)] = static_cast<std::uint8_t>(inc_ >> (8 * i));
        return out;
    }

    static Rng deserialize(const std::uint8_t* bytes) {
        Rng rng;
        rng.state_ = 0;
        rng.inc_ = 0;
        for (int i = 0; i < 8; ++i) rng.state_ |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
        for (int i = 0; i < 8; ++i) rng.inc_ |= static_cast<std::uint64_t>(bytes[8 + i]) << (8 * i);
        return rng;
    }

    bool operator==(const Rng& other) const {
        return state_ == other.state_ && inc_ == other.inc_;
    }

private:
    static std::uint64_t splitmix64(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    std::uint64_t state_ = 0;
    std::uint64_t inc_ = 1;
};

}  // namespace xmgc
