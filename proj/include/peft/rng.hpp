#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>

#include "peft/error.hpp"

namespace peft {

// Deterministic 64-bit generator (xoshiro256**). The integer stream is a pure
// function of the state words, so identical state gives identical draws on
// every platform. Independent named streams are derived from one base seed so
// init / masking / dropout / shuffling never interleave.
class Rng {
public:
    static constexpr std::string_view kAlgorithm = "xoshiro256**";

    Rng() : Rng(0x9e3779b97f4a7c15ULL) {}

    explicit Rng(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& word : state_) word = splitmix64(x);
    }

    // Derived stream: reproducible for a given (seed, name, salt) triple.
    // `salt` is used for per-step and per-epoch reseeding.
    static Rng stream(std::uint64_t base_seed, std::string_view name, std::uint64_t salt = 0) {
        std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the stream name
        for (unsigned char c : name) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        std::uint64_t x = base_seed;
        std::uint64_t mixed = splitmix64(x) ^ h;
        mixed ^= salt + 0x9e3779b97f4a7c15ULL + (mixed << 6) + (mixed >> 2);
        return Rng(mixed);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 24 bits of mantissa (exact in float).
    float uniform() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

    double uniform_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). n must be positive.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) throw ContractError("Rng::uniform_int: n must be positive");
        // Rejection to avoid modulo bias.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    // Standard normal via Box-Muller; draws two uniforms per call so the
    // stream position never depends on hidden cache state.
    double normal() {
        double u1 = uniform_double();
        while (u1 <= 0.0) u1 = uniform_double();
        const double u2 = uniform_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Normal truncated to +/- 2 sigma, scaled by `stddev` (BERT-style init).
    float truncated_normal(float stddev) {
        double z = normal();
        while (std::abs(z) > 2.0) z = normal();
        return static_cast<float>(z * stddev);
    }

    // State serialization: "<algorithm>:<s0>:<s1>:<s2>:<s3>" in hex.
    std::string serialize() const {
        std::string out(kAlgorithm);
        for (const auto word : state_) {
            out.push_back(':');
            out += to_hex(word);
        }
        return out;
    }

    static Rng deserialize(std::string_view text) {
        const auto fail = [&] { throw FormatError("Rng state: malformed \"" + std::string(text) + "\""); };
        const auto colon = text.find(':');
        if (colon == std::string_view::npos || text.substr(0, colon) != kAlgorithm) fail();
        Rng rng;
        std::string_view rest = text.substr(colon + 1);
        for (int i = 0; i < 4; ++i) {
            const auto next = rest.find(':');
            const std::string_view piece = rest.substr(0, next);
            if (piece.empty()) fail();
            rng.state_[i] = from_hex(piece);
            if (i < 3) {
                if (next == std::string_view::npos) fail();
                rest = rest.substr(next + 1);
            } else if (next != std::string_view::npos) {
                fail();
            }
        }
        return rng;
    }

    bool operator==(const Rng& other) const { return state_ == other.state_; }

private:
    static std::uint64_t splitmix64(std::uint64_t& x) {
        x += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    static std::string to_hex(std::uint64_t v) {
        static const char* digits = "0123456789abcdef";
        std::string s(16, '0');
        for (int i = 15; i >= 0; --i) {
            s[static_cast<std::size_t>(i)] = digits[v & 0xf];
            v >>= 4;
        }
        return s;
    }

    static std::uint64_t from_hex(std::string_view s) {
        std::uint64_t v = 0;
        for (const char c : s) {
            v <<= 4;
            if (c >= '0' && c <= '9') v |= static_cast<std::uint64_t>(c - '0');
            else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint64_t>(c - 'a' + 10);
            else throw FormatError(std::string("Rng state: bad hex digit '") + c + "'");
        }
        return v;
    }

    std::array<std::uint64_t, 4> state_{};
};

// FNV-1a 64-bit hash; used for config hashes and input digests.
inline std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL) {
    std::uint64_t h = seed;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hash_hex(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

}  // namespace peft
