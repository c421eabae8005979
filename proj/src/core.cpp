#include "cubemask/core.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace cubemask {

void FeatureTensor::validate_finite() const {
    for (float v : values)
        if (!std::isfinite(v)) throw DataError("FeatureTensor: non-finite value");
}

size_t count_masked(const MaskTensor& m) {
    size_t n = 0;
    for (uint8_t f : m.flags) n += (f != 0);
    return n;
}

namespace {

uint64_t splitmix64(uint64_t& x) {
    x += 0x9E3779B97F4A7C15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

uint64_t rotl64(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

SeededRng::SeededRng(uint64_t seed) : seed_(seed) {
    uint64_t x = seed;
    for (auto& s : s_) s = splitmix64(x);
    if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[0] = 0x9E3779B97F4A7C15ULL;
}

uint64_t SeededRng::next_u64() {
    const uint64_t result = rotl64(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl64(s_[3], 45);
    return result;
}

double SeededRng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

uint64_t SeededRng::uniform_below(uint64_t n) {
    if (n == 0) throw ConfigError("uniform_below: n must be > 0");
    const uint64_t threshold = (0 - n) % n;
    for (;;) {
        const uint64_t r = next_u64();
        if (r >= threshold) return r % n;
    }
}

double SeededRng::normal() {
    // open-interval uniforms keep log() finite
    const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

uint64_t SeededRng::mix(uint64_t a, uint64_t b) {
    uint64_t x = a ^ (0x9E3779B97F4A7C15ULL + (b << 1));
    uint64_t m = splitmix64(x);
    return m;
}

SeededRng SeededRng::child(uint64_t a, uint64_t b) const {
    return SeededRng(mix(mix(seed_, a), b));
}

SeededRng SeededRng::from_state(const std::array<uint64_t, 4>& st) {
    SeededRng r;
    r.s_[0] = st[0];
    r.s_[1] = st[1];
    r.s_[2] = st[2];
    r.s_[3] = st[3];
    return r;
}

}  // namespace cubemask
