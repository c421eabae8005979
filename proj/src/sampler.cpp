#include "cubemask/sampler.hpp"

#include <algorithm>
#include <memory>

namespace cubemask {

GenerateResult generate(const PredictFn& predict, const Shape3& shape, uint32_t levels,
                        const SampleConfig& cfg, bool conditional) {
    if (!(cfg.temperature > 0.0)) throw ConfigError("generate: temperature must be > 0");
    const size_t n_tokens = shape.total();
    if (cfg.steps < 1 || cfg.steps > n_tokens)
        throw ConfigError("generate: steps must lie in [1, h*w*d]");

    const UnmaskSchedule sched = cosine_schedule(n_tokens, cfg.steps);
    const bool use_guidance = conditional && cfg.class_id.has_value() && cfg.guidance != 1.0;

    GenerateResult res{TokenTensor::zeros(shape, levels), {}, 0};
    MaskTensor mask = MaskTensor::full(shape);
    std::vector<size_t> still_masked(n_tokens);
    for (size_t k = 0; k < n_tokens; ++k) still_masked[k] = k;

    SeededRng rng(cfg.seed);

    for (uint64_t t = 0; t < cfg.steps; ++t) {
        LogitsTensor logits = predict(res.tokens, mask, cfg.class_id);
        ++res.predictor_calls;
        if (use_guidance) {
            LogitsTensor uncond = predict(res.tokens, mask, std::nullopt);
            ++res.predictor_calls;
            logits = guided_logits(logits, uncond, cfg.guidance);
        }

        const std::vector<size_t> chosen = select_unmask(still_masked, sched.unmask[t], rng);

        TrajectoryStep traj;
        traj.step = t + 1;
        traj.masked_before = still_masked.size();
        traj.unmasked = chosen;

        // freeze sampled ids in ascending linear-index order
        for (size_t idx : chosen) {
            const auto probs = categorical_probs(logits.slot(idx), cfg.temperature);
            const double u = rng.uniform();
            double acc = 0.0;
            uint16_t id = static_cast<uint16_t>(levels - 1);
            for (uint32_t l = 0; l < levels; ++l) {
                acc += probs[l];
                if (u < acc) {
                    id = static_cast<uint16_t>(l);
                    break;
                }
            }
            res.tokens.ids[idx] = id;
            mask.flags[idx] = 0;
        }
        if (!chosen.empty()) {
            std::vector<size_t> rest;
            rest.reserve(still_masked.size() - chosen.size());
            std::set_difference(still_masked.begin(), still_masked.end(), chosen.begin(),
                                chosen.end(), std::back_inserter(rest));
            still_masked.swap(rest);
        }

        if (cfg.record_snapshots) traj.snapshot = res.tokens;
        res.trajectory.steps.push_back(std::move(traj));
    }

    if (!still_masked.empty()) throw Error("generate: schedule left masked slots");
    return res;
}

template <typename S>
PredictFn make_model_predictor(const Model<S>& model, uint64_t seed) {
    if (model.config().mask_mode == MaskValueMode::RandomId) {
        auto rng = std::make_shared<SeededRng>(SeededRng::mix(seed, 0x6D61736Bu));
        return [&model, rng](const TokenTensor& q, const MaskTensor& m,
                             std::optional<uint32_t> class_id) {
            return model.forward(q, m, class_id, rng.get());
        };
    }
    return [&model](const TokenTensor& q, const MaskTensor& m,
                    std::optional<uint32_t> class_id) {
        return model.forward(q, m, class_id);
    };
}

template <typename S>
GenerateResult generate(const Model<S>& model, const SampleConfig& cfg) {
    const PredictFn predict = make_model_predictor(model, cfg.seed);
    return generate(predict, model.config().shape, model.config().levels, cfg,
                    model.config().class_count > 0);
}

FeatureTensor decode_features(const TokenTensor& q, const QuantizerSpec& spec) {
    return dequantize(q, spec);
}

template GenerateResult generate<float>(const Model<float>&, const SampleConfig&);
template GenerateResult generate<double>(const Model<double>&, const SampleConfig&);
template PredictFn make_model_predictor<float>(const Model<float>&, uint64_t);
template PredictFn make_model_predictor<double>(const Model<double>&, uint64_t);

}  // namespace cubemask
