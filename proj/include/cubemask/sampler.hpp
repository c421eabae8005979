#pragma once

#include <functional>

#include "cubemask/masking.hpp"
#include "cubemask/predictor.hpp"

namespace cubemask {

struct SampleConfig {
    uint64_t steps = 0;
    double temperature = 1.0;
    double guidance = 1.0;
    std::optional<uint32_t> class_id;
    uint64_t seed = 0;
    bool record_snapshots = false;
};

struct TrajectoryStep {
    uint64_t step = 0;
    uint64_t masked_before = 0;
    std::vector<size_t> unmasked;  // linear indices frozen at this step
    std::optional<TokenTensor> snapshot;
};

struct Trajectory {
    std::vector<TrajectoryStep> steps;
};

/// Produces logits for the current partial tensor. class_id is empty on the
/// unconditional guidance pass.
using PredictFn = std::function<LogitsTensor(const TokenTensor&, const MaskTensor&,
                                             std::optional<uint32_t>)>;

struct GenerateResult {
    TokenTensor tokens;
    Trajectory trajectory;
    uint64_t predictor_calls = 0;
};

/// Iterative parallel decoding: start fully masked; each step predicts every
/// masked slot, picks a random subset per the cosine schedule, samples those
/// slots from their categorical distributions in ascending linear-index
/// order, and freezes them. `conditional` gates the extra unconditional pass
/// used for guidance (skipped entirely at guidance == 1).
GenerateResult generate(const PredictFn& predict, const Shape3& shape, uint32_t levels,
                        const SampleConfig& cfg, bool conditional);

/// Runs the EMA-weight model as the predictor.
template <typename S>
GenerateResult generate(const Model<S>& model, const SampleConfig& cfg);

/// Alias of dequantize, the export boundary toward external decoders.
FeatureTensor decode_features(const TokenTensor& q, const QuantizerSpec& spec);

/// Wraps a model as a PredictFn. RandomId mask substitution draws from a
/// stream derived from `seed`.
template <typename S>
PredictFn make_model_predictor(const Model<S>& model, uint64_t seed = 0);

extern template GenerateResult generate<float>(const Model<float>&, const SampleConfig&);
extern template GenerateResult generate<double>(const Model<double>&, const SampleConfig&);
extern template PredictFn make_model_predictor<float>(const Model<float>&, uint64_t);
extern template PredictFn make_model_predictor<double>(const Model<double>&, uint64_t);

}  // namespace cubemask
