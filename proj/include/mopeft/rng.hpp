#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mopeft {

// Every random draw in the project flows through a named substream derived
// from the experiment seed, so the base weights of a model are identical
// across fine-tuning modes and independent of which attachments get built.

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

// Deterministic engine for the substream (seed, tag, index).
inline std::mt19937_64 substream(uint64_t seed, std::string_view tag, uint64_t index = 0) {
    uint64_t s = splitmix64(seed ^ fnv1a(tag));
    s = splitmix64(s ^ (0x9e3779b97f4a7c15ull * (index + 1)));
    return std::mt19937_64(s);
}

}  // namespace mopeft
