#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "lbgen/errors.hpp"
#include "lbgen/hashing.hpp"

namespace lbgen {

// Deterministic, serializable random stream.
//
// Draw protocol (fixed; identical sequences for identical (seed, stream_id)):
//   key      = mix64(mix64(seed) ^ fnv1a64(stream_id))
//   next_u64 : state += GOLDEN; return splitmix64-finalize(state)   (state starts at key)
//   uniform  : (next_u64 >> 11) * 2^-53                              in [0, 1)
//   gaussian : Box-Muller on two draws, cos branch only:
//              sqrt(-2 ln u1) * cos(2 pi u2),  u1 in (0, 1]
//   uniform_int(n): rejection-sampled bounded draw, exactly uniform.
//
// Streams are single-owner; copy them to fork a position, never share mutably.
class RngStream {
public:
    RngStream() : RngStream(0, "default") {}

    RngStream(std::uint64_t seed, const std::string& stream_id)
        : stream_id_(stream_id), state_(mix64(mix64(seed) ^ fnv1a64(stream_id))) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; u1 shifted into (0, 1] so log is finite.
    double gaussian() {
        double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
        double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Uniform integer in [0, n). Rejection sampling keeps the draw exactly uniform.
    std::uint64_t uniform_int(std::uint64_t n) {
        require(n > 0, "RngStream::uniform_int: n must be positive");
        std::uint64_t rem = (0ULL - n) % n;  // 2^64 mod n
        std::uint64_t usable_end = 0ULL - rem;
        for (;;) {
            std::uint64_t x = next_u64();
            if (rem == 0 || x < usable_end) return x % n;
        }
    }

    const std::string& stream_id() const { return stream_id_; }
    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; }

private:
    std::string stream_id_;
    std::uint64_t state_;
};

inline RngStream derive_stream(std::uint64_t seed, const std::string& stream_id) {
    return RngStream(seed, stream_id);
}

}  // namespace lbgen
