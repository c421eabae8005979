#include "cubemask/quantizer.hpp"

#include <algorithm>
#include <cmath>

namespace cubemask {

void CalibrationStats::validate() const {
    if (dims == 0) throw ConfigError("CalibrationStats: dims must be >= 1");
    if (lo.size() != dims || hi.size() != dims)
        throw ShapeError("CalibrationStats: bound count does not match dims");
    for (uint32_t i = 0; i < dims; ++i) {
        if (!std::isfinite(lo[i]) || !std::isfinite(hi[i]))
            throw DataError("CalibrationStats: non-finite bound");
        if (!(lo[i] < hi[i]))
            throw DataError("CalibrationStats: degenerate dimension " + std::to_string(i));
    }
}

QuantizerSpec::QuantizerSpec(uint32_t levels_, CalibrationStats stats_)
    : levels(levels_), stats(std::move(stats_)) {
    if (levels < 2) throw ConfigError("QuantizerSpec: levels must be >= 2");
    stats.validate();
}

namespace {

// linear-interpolation quantile over a sorted sample (R-7 scheme)
double sorted_quantile(const std::vector<float>& sorted, double q) {
    const size_t n = sorted.size();
    if (n == 1) return sorted[0];
    const double pos = q * static_cast<double>(n - 1);
    const size_t k = static_cast<size_t>(pos);
    const double frac = pos - static_cast<double>(k);
    if (k + 1 >= n) return sorted[n - 1];
    return static_cast<double>(sorted[k]) + frac * (static_cast<double>(sorted[k + 1]) - sorted[k]);
}

}  // namespace

CalibrationStats calibrate(std::span<const FeatureTensor> corpus, double quantile) {
    if (corpus.empty()) throw DataError("calibrate: empty corpus");
    if (!(quantile >= 0.0 && quantile < 0.5))
        throw ConfigError("calibrate: quantile must lie in [0, 0.5)");
    const uint32_t d = corpus[0].shape.d;
    size_t per_dim = 0;
    for (const auto& z : corpus) {
        if (z.shape.d != d) throw ShapeError("calibrate: corpus tensors disagree on d");
        z.validate_finite();
        per_dim += z.shape.spatial();
    }

    CalibrationStats stats;
    stats.dims = d;
    stats.lo.resize(d);
    stats.hi.resize(d);
    stats.sample_count = per_dim;

    std::vector<float> column;
    column.reserve(per_dim);
    for (uint32_t i = 0; i < d; ++i) {
        column.clear();
        for (const auto& z : corpus) {
            const size_t total = z.shape.total();
            for (size_t off = i; off < total; off += z.shape.d) column.push_back(z.values[off]);
        }
        std::sort(column.begin(), column.end());
        stats.lo[i] = sorted_quantile(column, quantile);
        stats.hi[i] = sorted_quantile(column, 1.0 - quantile);
        if (!(stats.lo[i] < stats.hi[i]))
            throw DataError("calibrate: degenerate dimension " + std::to_string(i));
    }
    return stats;
}

TokenTensor quantize(const FeatureTensor& z, const QuantizerSpec& spec) {
    if (z.shape.d != spec.stats.dims)
        throw ShapeError("quantize: tensor d does not match calibration stats");
    const uint32_t L = spec.levels;
    std::vector<uint16_t> ids(z.shape.total());
    const size_t total = z.shape.total();
    const uint32_t d = z.shape.d;
    for (size_t k = 0; k < total; ++k) {
        const uint32_t i = static_cast<uint32_t>(k % d);
        double v = z.values[k];
        if (std::isnan(v)) throw DataError("quantize: NaN input");
        const double lo = spec.stats.lo[i], hi = spec.stats.hi[i];
        v = std::clamp(v, lo, hi);
        auto id = static_cast<int64_t>(std::floor((v - lo) / (hi - lo) * L));
        if (id >= L) id = L - 1;
        if (id < 0) id = 0;
        ids[k] = static_cast<uint16_t>(id);
    }
    return TokenTensor(z.shape, L, std::move(ids));
}

double bin_center(const QuantizerSpec& spec, uint32_t dim, uint32_t id) {
    const double lo = spec.stats.lo[dim], hi = spec.stats.hi[dim];
    return lo + (static_cast<double>(id) + 0.5) * (hi - lo) / spec.levels;
}

FeatureTensor dequantize(const TokenTensor& q, const QuantizerSpec& spec) {
    if (q.levels != spec.levels) throw ConfigError("dequantize: level count mismatch");
    if (q.shape.d != spec.stats.dims)
        throw ShapeError("dequantize: tensor d does not match calibration stats");
    std::vector<float> values(q.shape.total());
    const size_t total = q.shape.total();
    const uint32_t d = q.shape.d;
    for (size_t k = 0; k < total; ++k) {
        const uint32_t i = static_cast<uint32_t>(k % d);
        values[k] = static_cast<float>(bin_center(spec, i, q.ids[k]));
    }
    return FeatureTensor(q.shape, std::move(values));
}

std::vector<double> roundtrip_error(const FeatureTensor& z, const QuantizerSpec& spec) {
    const TokenTensor q = quantize(z, spec);
    const FeatureTensor back = dequantize(q, spec);
    std::vector<double> err(z.shape.d, 0.0);
    const size_t total = z.shape.total();
    const uint32_t d = z.shape.d;
    for (size_t k = 0; k < total; ++k)
        err[k % d] += std::abs(static_cast<double>(z.values[k]) - back.values[k]);
    const double per_dim = static_cast<double>(z.shape.spatial());
    for (auto& e : err) e /= per_dim;
    return err;
}

}  // namespace cubemask
