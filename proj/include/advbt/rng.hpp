#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

// Deterministic random streams. Everything below maps raw 64-bit words to
// doubles by hand so results are identical across standard libraries
// (std::*_distribution output is implementation-defined).
namespace advbt::rng {

std::uint64_t splitmix64(std::uint64_t x) noexcept;

// Order-sensitive combination of two keys.
std::uint64_t mix(std::uint64_t a, std::uint64_t b) noexcept;

// Named substream of a root seed: derive_seed(seed, "init"), "noise", "shuffle", ...
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream) noexcept;

// Uniform in the open interval (0, 1) from the top 53 bits.
double to_unit_open(std::uint64_t bits) noexcept;

// Counter-based draws: the result depends only on (key, index).
double counter_uniform(std::uint64_t key, std::uint64_t index) noexcept;
// Standard normal via Box-Muller over the pair (index & ~1, index | 1).
double counter_normal(std::uint64_t key, std::uint64_t index) noexcept;

// Sequential stream over mt19937_64 for initialisation and shuffling.
class Stream {
public:
    explicit Stream(std::uint64_t key) : engine_(key) {}

    std::uint64_t next() { return engine_(); }
    double uniform() { return to_unit_open(engine_()); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal();
    // Uniform integer in [0, n) by rejection sampling.
    std::size_t below(std::size_t n);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Fisher-Yates.
template <typename T>
void shuffle(std::vector<T>& items, Stream& stream) {
    for (std::size_t i = items.size(); i > 1; --i) {
        std::size_t j = stream.below(i);
        std::swap(items[i - 1], items[j]);
    }
}

}  // namespace advbt::rng
