#include "advbt/rng.hpp"

#include <cmath>
#include <numbers>

namespace advbt::rng {

std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) noexcept {
    return splitmix64(splitmix64(a) ^ (b + 0x632BE59BD9B4E019ULL + (a << 6) + (a >> 2)));
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view stream) noexcept {
    // FNV-1a over the stream name.
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char ch : stream) {
        h ^= ch;
        h *= 0x100000001B3ULL;
    }
    return mix(root, h);
}

double to_unit_open(std::uint64_t bits) noexcept {
    return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

double counter_uniform(std::uint64_t key, std::uint64_t index) noexcept {
    return to_unit_open(mix(key, index));
}

double counter_normal(std::uint64_t key, std::uint64_t index) noexcept {
    const std::uint64_t base = index & ~std::uint64_t{1};
    const double u1 = counter_uniform(key, base);
    const double u2 = counter_uniform(key, base + 1);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    return (index & 1) ? r * std::sin(angle) : r * std::cos(angle);
}

double Stream::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(angle);
    has_spare_ = true;
    return r * std::cos(angle);
}

std::size_t Stream::below(std::size_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
    std::uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % n);
}

}  // namespace advbt::rng
