#include "kltrace/common.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

namespace kltrace {

std::string_view error_kind_name(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config:
            return "config";
        case ErrorKind::data:
            return "data";
        case ErrorKind::numerical:
            return "numerical";
    }
    return "unknown";
}

void Fnv1a::update(const void* data, std::size_t n) noexcept {
    const auto* p = static_cast<const std::uint8_t*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h_ ^= p[i];
        h_ *= 0x100000001b3ULL;
    }
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) noexcept {
    Fnv1a h;
    h.update(bytes.data(), bytes.size());
    return h.value();
}

std::uint64_t fnv1a64(std::string_view s) noexcept {
    Fnv1a h;
    h.update(s);
    return h.value();
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) noexcept {
    std::uint64_t h = splitmix64(seed);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ (b * 0x9e3779b97f4a7c15ULL));
    h = splitmix64(h ^ (c * 0xc2b2ae3d27d4eb4fULL));
    return h;
}

std::uint64_t Rng::next_u64() noexcept {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double Rng::uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) noexcept {
    if (hi <= lo) return lo;
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    // Rejection keeps the draw unbiased.
    const std::uint64_t limit = span == 0 ? 0 : (~0ULL - (~0ULL % span + 1) % span);
    std::uint64_t r = next_u64();
    while (span != 0 && r > limit) r = next_u64();
    return lo + static_cast<std::int64_t>(span == 0 ? r : r % span);
}

double Rng::normal() noexcept {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(th);
    has_spare_ = true;
    return r * std::cos(th);
}

}  // namespace kltrace
