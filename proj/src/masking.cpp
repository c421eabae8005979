#include "cubemask/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cubemask {

const char* to_string(MaskStrategy s) {
    switch (s) {
        case MaskStrategy::PerElement: return "per-element";
        case MaskStrategy::PerSpatial: return "per-spatial";
        case MaskStrategy::PerDim: return "per-dim";
    }
    return "?";
}

MaskStrategy mask_strategy_from_string(const std::string& s) {
    if (s == "per-element") return MaskStrategy::PerElement;
    if (s == "per-spatial") return MaskStrategy::PerSpatial;
    if (s == "per-dim") return MaskStrategy::PerDim;
    throw ConfigError("unknown mask strategy: " + s);
}

double sample_ratio(const MaskRatioDist& dist, SeededRng& rng) {
    for (;;) {
        const double r = 1.0 + dist.sigma * rng.normal();
        if (r >= 0.0 && r <= 1.0) return r;
    }
}

namespace {

// first k of a partial Fisher-Yates shuffle over [0, n)
std::vector<size_t> choose_distinct(size_t n, size_t k, SeededRng& rng) {
    std::vector<size_t> pool(n);
    std::iota(pool.begin(), pool.end(), size_t(0));
    for (size_t j = 0; j < k; ++j) {
        const size_t swap_at = j + static_cast<size_t>(rng.uniform_below(n - j));
        std::swap(pool[j], pool[swap_at]);
    }
    pool.resize(k);
    return pool;
}

}  // namespace

MaskTensor sample_mask(const Shape3& shape, double ratio, MaskStrategy strategy, SeededRng& rng) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("sample_mask: ratio must be in [0, 1]");
    MaskTensor m(shape);
    switch (strategy) {
        case MaskStrategy::PerElement: {
            const size_t k = static_cast<size_t>(std::floor(ratio * static_cast<double>(shape.total())));
            for (size_t idx : choose_distinct(shape.total(), k, rng)) m.flags[idx] = 1;
            break;
        }
        case MaskStrategy::PerSpatial: {
            const size_t k = static_cast<size_t>(std::floor(ratio * static_cast<double>(shape.spatial())));
            for (size_t pos : choose_distinct(shape.spatial(), k, rng)) {
                const size_t base = pos * shape.d;
                std::fill_n(m.flags.begin() + base, shape.d, uint8_t(1));
            }
            break;
        }
        case MaskStrategy::PerDim: {
            const size_t k = static_cast<size_t>(std::floor(ratio * static_cast<double>(shape.d)));
            for (size_t dim : choose_distinct(shape.d, k, rng))
                for (size_t pos = 0; pos < shape.spatial(); ++pos)
                    m.flags[pos * shape.d + dim] = 1;
            break;
        }
    }
    return m;
}

UnmaskSchedule cosine_schedule(uint64_t n_tokens, uint64_t steps) {
    if (n_tokens < 1) throw ConfigError("cosine_schedule: need at least one token");
    if (steps < 1) throw ConfigError("cosine_schedule: need at least one step");
    if (steps > n_tokens)
        throw ConfigError("cosine_schedule: steps may not exceed the token count");

    // ceil'd cosine curve, capped so every step reveals at least one token;
    // T <= n_tokens guarantees the cap stays feasible, and at T == n_tokens
    // the schedule degenerates to one token per step (random-order
    // autoregressive decoding)
    std::vector<uint64_t> masked(steps + 1);
    masked[0] = n_tokens;
    masked[steps] = 0;
    for (uint64_t t = 1; t < steps; ++t) {
        const double frac = static_cast<double>(t) / static_cast<double>(steps);
        const double m = std::ceil(static_cast<double>(n_tokens) * std::cos(M_PI / 2.0 * frac));
        masked[t] = std::min<uint64_t>(masked[t - 1] - 1, static_cast<uint64_t>(std::max(0.0, m)));
    }

    UnmaskSchedule sched;
    sched.total = n_tokens;
    sched.unmask.resize(steps);
    for (uint64_t t = 0; t < steps; ++t) sched.unmask[t] = masked[t] - masked[t + 1];
    return sched;
}

std::vector<size_t> select_unmask(std::span<const size_t> masked_indices, size_t count,
                                  SeededRng& rng) {
    if (count > masked_indices.size())
        throw ConfigError("select_unmask: count exceeds available masked indices");
    std::vector<size_t> pool(masked_indices.begin(), masked_indices.end());
    for (size_t j = 0; j < count; ++j) {
        const size_t swap_at = j + static_cast<size_t>(rng.uniform_below(pool.size() - j));
        std::swap(pool[j], pool[swap_at]);
    }
    pool.resize(count);
    std::sort(pool.begin(), pool.end());
    return pool;
}

}  // namespace cubemask
