#pragma once

#include <filesystem>
#include <functional>

#include "cubemask/sampler.hpp"
#include "cubemask/trainer.hpp"

namespace cubemask {

/// Mixture-of-templates generative spec: pick a template uniformly, then
/// corrupt each slot independently (probability `corruption` of replacing it
/// with a uniform level).
struct MixtureJointSpec {
    Shape3 shape;
    uint32_t levels = 0;
    std::vector<std::vector<uint16_t>> templates;
    double corruption = 0.0;
};

/// Explicit joint over all levels^total outcomes of a small token tensor.
/// Outcome index packs slot ids base-L with linear slot 0 least significant.
class ToyJoint {
  public:
    static ToyJoint from_table(const Shape3& shape, uint32_t levels, std::vector<double> table);
    static ToyJoint from_mixture(const MixtureJointSpec& spec);

    const Shape3& shape() const { return shape_; }
    uint32_t levels() const { return levels_; }
    size_t variables() const { return shape_.total(); }
    size_t outcome_count() const { return table_.size(); }
    const std::vector<double>& table() const { return table_; }
    const std::optional<MixtureJointSpec>& mixture() const { return mixture_; }

    double prob(uint64_t outcome) const { return table_[outcome]; }
    double prob(const TokenTensor& q) const { return table_[encode(q)]; }
    uint64_t encode(const TokenTensor& q) const;
    TokenTensor decode(uint64_t outcome) const;

    /// marginals()[slot * levels + v] = P(slot = v)
    const std::vector<double>& marginals() const { return marginals_; }

    /// place_values()[k] = levels^k, the outcome-index weight of slot k.
    const std::vector<uint64_t>& place_values() const { return pow_; }

  private:
    ToyJoint() = default;
    void finish();

    Shape3 shape_{1, 1, 1};
    uint32_t levels_ = 0;
    std::vector<double> table_;
    std::vector<double> marginals_;
    std::vector<double> cdf_;
    std::vector<uint64_t> pow_;  // levels^k per slot
    std::optional<MixtureJointSpec> mixture_;

    friend class OracleConditional;
    friend std::vector<TokenTensor> synth_corpus(const ToyJoint&, uint64_t, SeededRng&);
};

/// The spec's desk-scale verification joint: shape (2,2,3), two levels, four
/// templates coupling slots within positions and across the spatial grid,
/// 5% corruption.
MixtureJointSpec default_mixture();
ToyJoint default_toy_joint();

/// Bayes-exact conditionals by direct enumeration of the joint table.
/// Masked slots receive log p(slot = v | visible); unmasked slots a log-delta
/// on the observed id (large negative finite floor stands in for log 0).
class OracleConditional {
  public:
    explicit OracleConditional(const ToyJoint& joint);

    LogitsTensor forward(const TokenTensor& q, const MaskTensor& m) const;
    const ToyJoint& joint() const { return joint_; }

    PredictFn predictor() const;

  private:
    const ToyJoint& joint_;
    LogitsTensor all_masked_;  // cached: the fully masked query is identical every time
};

LogitsTensor oracle_forward(const TokenTensor& q, const MaskTensor& m, const ToyJoint& joint);

/// 0.5 * sum_o |counts[o]/n - p(o)|; counts indexed by outcome.
double tv_distance(std::span<const uint64_t> counts, const ToyJoint& joint);

/// i.i.d. exact draws by inverse CDF over the enumerated table.
std::vector<TokenTensor> synth_corpus(const ToyJoint& joint, uint64_t n, SeededRng& rng);

/// Mixture draw that also reports which template produced the sample
/// (usable as a class label).
std::pair<TokenTensor, uint32_t> sample_labeled(const MixtureJointSpec& spec, SeededRng& rng);

/// Strategy-aware iterative decoding: units (elements / spatial positions /
/// dimensions) are revealed under a cosine schedule on the unit count, each
/// revealed unit sampling its slots in parallel from per-slot conditionals.
GenerateResult generate_by_units(const PredictFn& predict, const Shape3& shape, uint32_t levels,
                                 MaskStrategy strategy, uint64_t steps, double temperature,
                                 uint64_t seed);

/// Outcome histogram over n generated samples; gen_one maps a derived seed to
/// one tensor. Deterministic and worker-count independent.
std::vector<uint64_t> outcome_counts(const ToyJoint& joint,
                                     const std::function<TokenTensor(uint64_t)>& gen_one,
                                     uint64_t n, uint64_t seed, unsigned workers = 0);

/// max_v |empirical(slot = v) - P(slot = v)| per slot, from an outcome histogram.
std::vector<double> marginal_errors(std::span<const uint64_t> counts, const ToyJoint& joint);

struct EvalReport {
    std::string label;
    double tv = 0.0;
    std::vector<double> marginal_err;
    double nll = 0.0;         // held-out masked NLL of the evaluated predictor
    double oracle_nll = 0.0;  // exact-conditional NLL on the same pairs
    double accuracy = 0.0;    // masked-slot argmax accuracy
    double structure_ok = 0.0;  // fraction of sampled masks satisfying the strategy structure
    uint64_t sample_count = 0;
    uint64_t config_hash = 0;

    void write_csv(const std::filesystem::path& path) const;
    void append_jsonl(const std::filesystem::path& path) const;
};

struct AblationProtocol {
    bool train_model = false;  // false: evaluate the exact oracle instead
    uint32_t hidden = 16;
    uint32_t blocks = 1;
    uint32_t heads = 2;
    uint32_t mlp_ratio = 4;
    MaskValueMode mask_mode = MaskValueMode::Learned;
    TrainConfig train;  // batch/lr/steps/sigma for the trained variant
    uint64_t train_samples = 10000;
    uint64_t eval_pairs = 2000;
    uint64_t gen_samples = 20000;
    uint64_t gen_steps = 0;  // 0: one unit per step (the maximum)
    double sigma = 0.10;     // eval mask-ratio spread
    uint64_t seed = 1;
    unsigned workers = 0;
};

/// Desk-scale masking-granularity study: structural mask checks, held-out
/// masked NLL against the exact oracle, and TV of strategy-decoded samples.
EvalReport run_ablation(MaskStrategy strategy, const ToyJoint& joint,
                        const AblationProtocol& protocol);

/// Held-out evaluation pairs (tensor, strategy mask) shared by reports and
/// acceptance checks.
struct NllEval {
    double predictor_nll = 0.0;
    double oracle_nll = 0.0;
    double accuracy = 0.0;
};
NllEval eval_masked_nll(const PredictFn& predict, const OracleConditional& oracle,
                        MaskStrategy strategy, double sigma, uint64_t pairs, uint64_t seed);

/// Deterministic with-replacement batch assembly for step `step`.
std::vector<size_t> batch_indices(uint64_t seed, uint64_t step, size_t corpus_size,
                                  size_t batch_size);

struct ToyTrainResult {
    std::unique_ptr<TrainState<float>> state;
    std::vector<double> loss_curve;  // one entry per step
};

/// Samples a corpus from the joint and optimizes a small predictor on it.
ToyTrainResult train_toy_model(const ToyJoint& joint, const PredictorConfig& model_cfg,
                               const TrainConfig& train_cfg, uint64_t data_seed,
                               uint64_t train_samples = 10000, unsigned workers = 0);

}  // namespace cubemask
