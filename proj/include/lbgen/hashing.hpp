#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>
#include <vector>

namespace lbgen {

// One full splitmix64 step (golden-ratio increment, then finalize). The
// increment keeps 0 from being a fixed point. Used as the mixing function for
// RNG stream keys, per-image seeds and content hashes where cryptographic
// strength is not needed.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const void* data, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

// Content hash of a byte buffer, printable form.
inline std::string content_hash(const std::vector<unsigned char>& bytes) {
    return hex64(fnv1a64(bytes.data(), bytes.size()));
}

inline std::string content_hash(const std::string& bytes) {
    return hex64(fnv1a64(bytes.data(), bytes.size()));
}

}  // namespace lbgen
