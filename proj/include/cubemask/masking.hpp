#pragma once

#include <span>

#include "cubemask/core.hpp"

namespace cubemask {

/// Truncated Gaussian over [0, 1] with the mean pinned at 1.0, so draws are
/// biased toward near-total masking.
struct MaskRatioDist {
    double sigma = 0.10;

    explicit MaskRatioDist(double sigma_ = 0.10) : sigma(sigma_) {
        if (!(sigma > 0.0)) throw ConfigError("MaskRatioDist: sigma must be > 0");
    }
};

enum class MaskStrategy { PerElement, PerSpatial, PerDim };

const char* to_string(MaskStrategy s);
MaskStrategy mask_strategy_from_string(const std::string& s);

/// Per-step unmask counts; unmask[t] tokens are revealed at step t+1 and the
/// counts sum exactly to `total`.
struct UnmaskSchedule {
    uint64_t total = 0;
    std::vector<uint64_t> unmask;

    uint64_t steps() const { return unmask.size(); }
};

/// One draw of N(1, sigma^2) restricted to [0, 1], by rejection.
double sample_ratio(const MaskRatioDist& dist, SeededRng& rng);

/// Materializes a mask with exact cardinality:
///   PerElement: floor(ratio * h*w*d) linear positions, uniform without replacement
///   PerSpatial: floor(ratio * h*w) spatial positions, all d flags each
///   PerDim:     floor(ratio * d) dimensions, all h*w flags each
MaskTensor sample_mask(const Shape3& shape, double ratio, MaskStrategy strategy, SeededRng& rng);

/// Cosine unmasking plan: masked count m[t] = ceil(N cos(pi/2 * t/T)) with
/// m[0] = N and m[T] = 0 forced; unmask[t] = m[t] - m[t+1].
UnmaskSchedule cosine_schedule(uint64_t n_tokens, uint64_t steps);

/// Uniform subset of exactly `count` indices, returned sorted ascending.
std::vector<size_t> select_unmask(std::span<const size_t> masked_indices, size_t count,
                                  SeededRng& rng);

}  // namespace cubemask
