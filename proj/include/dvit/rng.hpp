#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace dvit {

/// Seedable generator passed explicitly to everything random.
///
/// Distributions are implemented here rather than via <random> adaptors so
/// that streams are identical across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Unbiased integer in [0, n).
    std::uint64_t index(std::uint64_t n);
    double normal();
    // Normal(0, std) resampled until within [-2 std, 2 std].
    double truncated_normal(double std);
    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = index(i);
            std::swap(items[i - 1], items[j]);
        }
    }

    // k distinct indices from [0, n) in draw order.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// SplitMix64 finalizer; mixes seeds for derived streams.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c);
/// FNV-1a over bytes.
std::uint64_t hash_string(std::string_view text);

}  // namespace dvit
