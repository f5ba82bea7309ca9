#pragma once

#include <cstdint>
#include <cmath>
#include <numbers>

namespace qsd {

// Philox4x32-10 counter-based generator (Salmon et al., SC'11).
// A stream is keyed by (seed, stream_id); replicas get disjoint streams,
// so aggregation order never affects the draws a replica sees.
class Philox {
public:
    Philox() = default;
    Philox(std::uint64_t seed, std::uint64_t stream_id)
        : key0_(static_cast<std::uint32_t>(seed)),
          key1_(static_cast<std::uint32_t>(seed >> 32)),
          ctr2_(static_cast<std::uint32_t>(stream_id)),
          ctr3_(static_cast<std::uint32_t>(stream_id >> 32)) {}

    std::uint32_t next_u32() {
        if (have_ == 0) {
            refill();
            have_ = 4;
        }
        return out_[4 - have_--];
    }

    std::uint64_t next_u64() {
        const std::uint64_t hi = next_u32();
        return (hi << 32) | next_u32();
    }

    // uniform in (0,1); never returns 0 so log() is safe
    double uniform() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    // standard normal via Box-Muller; draws come in pairs
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // raw one-block evaluation, used by the known-answer test
    static void block(const std::uint32_t ctr_in[4], const std::uint32_t key_in[2],
                      std::uint32_t out[4]) {
        std::uint32_t c0 = ctr_in[0], c1 = ctr_in[1], c2 = ctr_in[2], c3 = ctr_in[3];
        std::uint32_t k0 = key_in[0], k1 = key_in[1];
        for (int round = 0; round < 10; ++round) {
            round_once(c0, c1, c2, c3, k0, k1);
            k0 += 0x9E3779B9u;
            k1 += 0xBB67AE85u;
        }
        out[0] = c0; out[1] = c1; out[2] = c2; out[3] = c3;
    }

private:
    static void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
        const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
        hi = static_cast<std::uint32_t>(p >> 32);
        lo = static_cast<std::uint32_t>(p);
    }

    static void round_once(std::uint32_t& c0, std::uint32_t& c1, std::uint32_t& c2,
                           std::uint32_t& c3, std::uint32_t k0, std::uint32_t k1) {
        std::uint32_t hi0, lo0, hi1, lo1;
        mulhilo(0xD2511F53u, c0, hi0, lo0);
        mulhilo(0xCD9E8D57u, c2, hi1, lo1);
        const std::uint32_t n0 = hi1 ^ c1 ^ k0;
        const std::uint32_t n1 = lo1;
        const std::uint32_t n2 = hi0 ^ c3 ^ k1;
        const std::uint32_t n3 = lo0;
        c0 = n0; c1 = n1; c2 = n2; c3 = n3;
    }

    void refill() {
        const std::uint32_t ctr[4] = {
            static_cast<std::uint32_t>(block_),
            static_cast<std::uint32_t>(block_ >> 32), ctr2_, ctr3_};
        const std::uint32_t key[2] = {key0_, key1_};
        block(ctr, key, out_);
        ++block_;
    }

    std::uint32_t key0_ = 0, key1_ = 0;
    std::uint32_t ctr2_ = 0, ctr3_ = 0;
    std::uint64_t block_ = 0;
    std::uint32_t out_[4] = {};
    int have_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// 64-bit mix used to derive per-replica seeds recorded in outputs
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

} // namespace qsd
