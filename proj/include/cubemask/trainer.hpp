#pragma once

#include <filesystem>

#include "cubemask/io.hpp"
#include "cubemask/masking.hpp"
#include "cubemask/predictor.hpp"

namespace cubemask {

struct TrainConfig {
    double lr = 5e-5;
    double weight_decay = 0.05;
    double clip_norm = 3.0;
    uint64_t warmup_steps = 0;
    uint64_t total_steps = 0;
    uint64_t batch_size = 2048;
    double ema_momentum = 0.9999;
    double sigma = 0.10;           // mask-ratio spread
    double cond_dropout = 0.1;     // null-class substitution probability
    uint64_t seed = 0;
    MaskStrategy strategy = MaskStrategy::PerElement;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
};

template <typename S>
struct OptimizerState {
    std::vector<S> m;  // first moments, parameter layout
    std::vector<S> v;  // second moments
    uint64_t step = 0;
};

/// Linear warmup to cfg.lr over warmup_steps, then cosine decay to zero at
/// total_steps.
double lr_at(uint64_t step, const TrainConfig& cfg);

/// Mean over masked slots of -log softmax(logits)[target]. Errors when the
/// mask selects nothing; unmasked slots never contribute.
double masked_ce_loss(const LogitsTensor& logits, const TokenTensor& targets,
                      const MaskTensor& m);

/// Scales grad in place so its global L2 norm is at most max_norm; returns
/// the pre-clip norm.
template <typename S>
double clip_global_norm(std::span<S> grad, double max_norm);

struct TrainSample {
    const TokenTensor* tokens = nullptr;
    std::optional<uint32_t> class_id;
};

/// Everything the optimization loop owns; checkpoints round-trip this struct
/// exactly (scratch buffers excluded).
template <typename S>
class TrainState {
  public:
    TrainState(Model<S> model, TrainConfig cfg);

    Model<S>& model() { return model_; }
    const Model<S>& model() const { return model_; }
    const TrainConfig& config() const { return cfg_; }
    std::vector<S>& ema() { return ema_; }
    const std::vector<S>& ema() const { return ema_; }
    OptimizerState<S>& optimizer() { return opt_; }
    const OptimizerState<S>& optimizer() const { return opt_; }
    uint64_t step() const { return opt_.step; }

    /// A copy of the model carrying the EMA weights (what samplers consume).
    Model<S> ema_model() const;

    /// One optimization step over the batch. Per-sample masking, condition
    /// dropout and losses derive from (seed, step, sample index), so results
    /// are bit-reproducible and independent of worker count. Returns the
    /// batch loss.
    double train_step(std::span<const TrainSample> batch, unsigned workers = 0);

  private:
    Model<S> model_;
    TrainConfig cfg_;
    std::vector<S> ema_;
    OptimizerState<S> opt_;
    std::vector<uint8_t> decay_mask_;

    // step scratch, never serialized
    static constexpr size_t kGradChunks = 8;
    std::vector<std::vector<S>> chunk_grads_;
    std::vector<double> chunk_losses_;
};

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const TrainState<S>& state);

template <typename S>
TrainState<S> load_checkpoint(const std::filesystem::path& path);

extern template struct OptimizerState<float>;
extern template struct OptimizerState<double>;
extern template class TrainState<float>;
extern template class TrainState<double>;
extern template double clip_global_norm<float>(std::span<float>, double);
extern template double clip_global_norm<double>(std::span<double>, double);
extern template void save_checkpoint<float>(const std::filesystem::path&, const TrainState<float>&);
extern template void save_checkpoint<double>(const std::filesystem::path&, const TrainState<double>&);
extern template TrainState<float> load_checkpoint<float>(const std::filesystem::path&);
extern template TrainState<double> load_checkpoint<double>(const std::filesystem::path&);

/// Scalar dtype stored in a checkpoint without loading it fully.
io::Dtype checkpoint_scalar_dtype(const std::filesystem::path& path);

}  // namespace cubemask
