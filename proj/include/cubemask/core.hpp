#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cubemask {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad user-facing configuration (CLI exit code 1).
struct ConfigError : Error {
    using Error::Error;
};

// Bad or corrupt data: files, NaN inputs, degenerate corpora (CLI exit code 2).
struct DataError : Error {
    using Error::Error;
};

// Inconsistent tensor shapes or out-of-range coordinates.
struct ShapeError : Error {
    using Error::Error;
};

// An observed configuration has probability zero under a toy joint.
struct ZeroSupportError : Error {
    using Error::Error;
};

/// 3-D token-tensor geometry: h x w spatial grid, d feature dimensions.
/// Layout is row-major (x, y, i) with the dimension axis innermost, so the
/// d scalars of one spatial position form a contiguous span.
struct Shape3 {
    uint32_t h = 0;
    uint32_t w = 0;
    uint32_t d = 0;

    Shape3() = default;
    Shape3(uint32_t h_, uint32_t w_, uint32_t d_) : h(h_), w(w_), d(d_) {
        if (h == 0 || w == 0 || d == 0)
            throw ShapeError("Shape3: all extents must be >= 1");
        // keep h*w*d comfortably inside size_t
        if (static_cast<uint64_t>(h) * w > (uint64_t(1) << 40) / d)
            throw ShapeError("Shape3: total element count too large");
    }

    size_t spatial() const { return static_cast<size_t>(h) * w; }
    size_t total() const { return static_cast<size_t>(h) * w * d; }

    friend bool operator==(const Shape3& a, const Shape3& b) {
        return a.h == b.h && a.w == b.w && a.d == b.d;
    }
    friend bool operator!=(const Shape3& a, const Shape3& b) { return !(a == b); }
};

inline size_t flat_index(const Shape3& s, uint32_t x, uint32_t y, uint32_t i) {
    if (x >= s.h || y >= s.w || i >= s.d)
        throw ShapeError("flat_index: coordinates out of range");
    return (static_cast<size_t>(x) * s.w + y) * s.d + i;
}

/// Continuous h x w x d scalar grid as ingested from an encoder.
struct FeatureTensor {
    Shape3 shape;
    std::vector<float> values;  // shape.total(), row-major (x, y, i)

    FeatureTensor() = default;
    FeatureTensor(const Shape3& s, std::vector<float> v) : shape(s), values(std::move(v)) {
        if (values.size() != shape.total())
            throw ShapeError("FeatureTensor: value count does not match shape");
    }
    static FeatureTensor zeros(const Shape3& s) {
        return FeatureTensor(s, std::vector<float>(s.total(), 0.0f));
    }

    float at(uint32_t x, uint32_t y, uint32_t i) const { return values[flat_index(shape, x, y, i)]; }

    /// Throws DataError on NaN/Inf entries.
    void validate_finite() const;
};

/// Discrete h x w x d grid of level indices in [0, levels).
struct TokenTensor {
    Shape3 shape;
    uint32_t levels = 0;
    std::vector<uint16_t> ids;  // shape.total(), row-major (x, y, i)

    TokenTensor() = default;
    TokenTensor(const Shape3& s, uint32_t levels_, std::vector<uint16_t> ids_)
        : shape(s), levels(levels_), ids(std::move(ids_)) {
        if (levels < 1) throw ConfigError("TokenTensor: levels must be >= 1");
        if (ids.size() != shape.total())
            throw ShapeError("TokenTensor: id count does not match shape");
        for (uint16_t id : ids)
            if (id >= levels) throw DataError("TokenTensor: id out of range");
    }
    static TokenTensor zeros(const Shape3& s, uint32_t levels) {
        return TokenTensor(s, levels, std::vector<uint16_t>(s.total(), 0));
    }

    uint16_t at(uint32_t x, uint32_t y, uint32_t i) const { return ids[flat_index(shape, x, y, i)]; }
};

/// Binary h x w x d grid; 1 marks a masked position.
struct MaskTensor {
    Shape3 shape;
    std::vector<uint8_t> flags;  // shape.total(), values 0/1

    MaskTensor() = default;
    explicit MaskTensor(const Shape3& s) : shape(s), flags(s.total(), 0) {}
    MaskTensor(const Shape3& s, std::vector<uint8_t> f) : shape(s), flags(std::move(f)) {
        if (flags.size() != shape.total())
            throw ShapeError("MaskTensor: flag count does not match shape");
    }
    static MaskTensor full(const Shape3& s) {
        MaskTensor m(s);
        std::fill(m.flags.begin(), m.flags.end(), uint8_t(1));
        return m;
    }

    bool masked(size_t linear) const { return flags[linear] != 0; }
};

size_t count_masked(const MaskTensor& m);

/// Deterministic engine-wide PRNG: xoshiro256++ seeded through splitmix64.
/// Identical seeds produce identical streams on every platform; distribution
/// helpers below are implemented in-house so no standard-library variation
/// can leak in.
class SeededRng {
  public:
    explicit SeededRng(uint64_t seed);

    uint64_t next_u64();

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform();

    /// Unbiased uniform integer in [0, n); n must be > 0.
    uint64_t uniform_below(uint64_t n);

    /// Standard normal via Box-Muller (two uniform draws per call).
    double normal();

    /// Child stream for (step, lane) decorrelated from this seed.
    SeededRng child(uint64_t a, uint64_t b) const;

    std::array<uint64_t, 4> state() const { return {s_[0], s_[1], s_[2], s_[3]}; }
    static SeededRng from_state(const std::array<uint64_t, 4>& st);

    uint64_t seed() const { return seed_; }

    static uint64_t mix(uint64_t a, uint64_t b);

  private:
    SeededRng() = default;
    uint64_t seed_ = 0;
    uint64_t s_[4] = {0, 0, 0, 0};
};

}  // namespace cubemask
