#pragma once

#include <cmath>
#include <cstdint>

namespace bionas {

/// Counter-based deterministic random stream. Each draw hashes
/// (seed, stream_id, counter) with SplitMix64, so the sequence is identical
/// across runs and platforms and the full state is three 64-bit integers,
/// which makes checkpointing trivial. Distinct stream ids give independent
/// sequences; derive() spawns child streams without touching the parent.
class RngStream {
public:
    RngStream() : RngStream(0, 0) {}
    RngStream(uint64_t seed, uint64_t stream_id)
        : seed_(seed), stream_id_(stream_id), counter_(0),
          base_(mix64(mix64(seed + kGolden) ^ mix64(stream_id + kGolden2))) {}

    uint64_t next_u64() { return mix64(base_ + (++counter_) * kGolden); }

    /// Uniform on [0,1). 53-bit mantissa, never returns exactly 1.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller; consumes exactly two counter steps
    /// per call (no cached spare, so the sequence does not depend on the
    /// call pattern of other distributions).
    double normal() {
        // (k + 0.5) / 2^53 lies strictly inside (0,1), keeping log() finite.
        double u1 = (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
        double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
    }

    /// Uniform integer in [0, n). Unbiased via rejection.
    uint64_t uniform_int(uint64_t n) {
        if (n <= 1) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    /// Child stream keyed by `child`; deterministic, independent of the
    /// parent's counter position.
    RngStream derive(uint64_t child) const {
        return RngStream(seed_, mix64(stream_id_ + kGolden) ^ mix64(child + kGolden2));
    }

    uint64_t seed() const { return seed_; }
    uint64_t stream_id() const { return stream_id_; }
    uint64_t counter() const { return counter_; }
    void set_counter(uint64_t c) { counter_ = c; }

private:
    static constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ull;
    static constexpr uint64_t kGolden2 = 0xBF58476D1CE4E5B9ull;
    static constexpr double kPi = 3.141592653589793238462643383279502884;

    static uint64_t mix64(uint64_t z) {
        z ^= z >> 30;
        z *= 0xBF58476D1CE4E5B9ull;
        z ^= z >> 27;
        z *= 0x94D049BB133111EBull;
        z ^= z >> 31;
        return z;
    }

    uint64_t seed_;
    uint64_t stream_id_;
    uint64_t counter_;
    uint64_t base_;
};

}  // namespace bionas
