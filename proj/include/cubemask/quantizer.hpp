#pragma once

#include <span>

#include "cubemask/core.hpp"

namespace cubemask {

/// Per-dimension value ranges estimated from a feature corpus.
struct CalibrationStats {
    uint32_t dims = 0;
    std::vector<double> lo;  // dims entries, lo[i] < hi[i]
    std::vector<double> hi;
    uint64_t sample_count = 0;  // scalars inspected per dimension

    void validate() const;
};

/// Uniform per-dimension binning over calibrated ranges; values outside the
/// range saturate. levels >= 2 is enforced at construction.
struct QuantizerSpec {
    uint32_t levels = 0;
    CalibrationStats stats;

    QuantizerSpec() = default;
    QuantizerSpec(uint32_t levels_, CalibrationStats stats_);
};

/// Empirical per-dimension [quantile, 1-quantile] ranges over every spatial
/// position of every corpus tensor. Linear-interpolation quantiles;
/// quantile = 0 degenerates to min/max.
CalibrationStats calibrate(std::span<const FeatureTensor> corpus, double quantile);

TokenTensor quantize(const FeatureTensor& z, const QuantizerSpec& spec);

FeatureTensor dequantize(const TokenTensor& q, const QuantizerSpec& spec);

/// Center of bin `id` along dimension `dim`.
double bin_center(const QuantizerSpec& spec, uint32_t dim, uint32_t id);

/// Mean |z - dequantize(quantize(z))| per dimension.
std::vector<double> roundtrip_error(const FeatureTensor& z, const QuantizerSpec& spec);

}  // namespace cubemask
