#pragma once

#include <memory>
#include <span>
#include <string_view>

#include "cubemask/core.hpp"
#include "cubemask/quantizer.hpp"

namespace cubemask {

enum class MaskValueMode { Learned, Fixed, RandomId };

const char* to_string(MaskValueMode m);
MaskValueMode mask_value_mode_from_string(const std::string& s);

struct PredictorConfig {
    Shape3 shape;
    uint32_t levels = 0;
    uint32_t hidden = 0;
    uint32_t blocks = 0;
    uint32_t heads = 0;
    uint32_t mlp_ratio = 4;
    uint32_t class_count = 0;  // 0 = unconditional
    MaskValueMode mask_mode = MaskValueMode::Learned;
    double fixed_mask_value = 0.0;

    void validate() const;
};

/// Unnormalized categorical scores, one L-vector per (x, y, i) slot.
struct LogitsTensor {
    Shape3 shape;
    uint32_t levels = 0;
    std::vector<double> scores;  // h*w*d*L, slot-major with L innermost

    LogitsTensor() = default;
    LogitsTensor(const Shape3& s, uint32_t levels_)
        : shape(s), levels(levels_), scores(s.total() * levels_, 0.0) {}

    std::span<double> slot(size_t linear) { return {scores.data() + linear * levels, levels}; }
    std::span<const double> slot(size_t linear) const {
        return {scores.data() + linear * levels, levels};
    }
};

/// uncond + scale * (cond - uncond), elementwise.
LogitsTensor guided_logits(const LogitsTensor& cond, const LogitsTensor& uncond, double scale);

/// Max-stabilized softmax(logits / temperature).
std::vector<double> categorical_probs(std::span<const double> logits, double temperature);

/// One slice of the flat parameter buffer.
struct ParamSegment {
    std::string name;
    std::vector<uint64_t> shape;
    size_t offset = 0;
    size_t size = 0;
    bool decay = false;  // participates in weight decay
};

struct ParamLayout {
    std::vector<ParamSegment> segments;
    size_t total = 0;

    const ParamSegment& find(std::string_view name) const;
    const ParamSegment* try_find(std::string_view name) const;
};

ParamLayout build_param_layout(const PredictorConfig& cfg);

/// Bidirectional transformer over the h*w spatial grid. Each position's d
/// tokens are dequantized (masked slots substituting the configured mask
/// value) and fed as one d-dimensional input vector, so the sequence length
/// is h*w regardless of d. A two-layer MLP head emits d*L logits per
/// position.
///
/// All math runs in the scalar type S; instantiated for float and double.
template <typename S>
class Model {
  public:
    /// Reusable per-thread scratch for forward/backward passes.
    struct Workspace {
        std::vector<S> emb;  // [S x d]
        std::vector<S> x;    // running stream [S x H]
        struct BlockTrace {
            std::vector<S> ln1_xhat, ln1_rstd, ln1_out;
            std::vector<S> q, k, v;
            std::vector<S> att_probs;  // [heads x S x S]
            std::vector<S> att_cat;    // pre-out-projection [S x H]
            std::vector<S> ln2_xhat, ln2_rstd, ln2_out;
            std::vector<S> mlp_pre, mlp_act;  // [S x R*H]
            std::vector<S> x_in;              // stream entering the block
            std::vector<S> x_mid;             // stream after attention residual
        };
        std::vector<BlockTrace> blocks;
        std::vector<S> lnf_xhat, lnf_rstd, lnf_out;
        std::vector<S> head_pre, head_act;  // [S x H]
        std::vector<S> logits;              // [S x d*L]
        std::optional<uint32_t> class_row;  // embedding row used this pass

        // backward scratch
        std::vector<S> dlogits, d_head_act, d_lnf_out;
        std::vector<S> dx, d_branch, d_qkv_q, d_qkv_k, d_qkv_v, d_att_cat, d_scores, d_mlp,
            demb;

        void resize(const PredictorConfig& cfg);
    };

    Model(PredictorConfig cfg, QuantizerSpec spec);

    static Model random_init(PredictorConfig cfg, QuantizerSpec spec, uint64_t seed);

    const PredictorConfig& config() const { return cfg_; }
    const QuantizerSpec& spec() const { return spec_; }
    const ParamLayout& layout() const { return layout_; }
    size_t param_count() const { return layout_.total; }
    size_t sequence_length() const { return cfg_.shape.spatial(); }

    std::vector<S>& params() { return params_; }
    const std::vector<S>& params() const { return params_; }
    std::span<S> param(std::string_view name);
    std::span<const S> param(std::string_view name) const;

    /// Sequence of h*w input vectors of width d (dequantized values with the
    /// mask substitution applied). RandomId mode draws ids from mask_rng.
    std::vector<S> embed(const TokenTensor& q, const MaskTensor& m,
                         SeededRng* mask_rng = nullptr) const;

    LogitsTensor forward(const TokenTensor& q, const MaskTensor& m,
                         std::optional<uint32_t> class_id,
                         SeededRng* mask_rng = nullptr) const;

    /// Masked cross-entropy of one sample plus its gradient, accumulated into
    /// `grad` (same layout as params) scaled by `loss_scale`. Returns the
    /// unscaled per-sample loss.
    double loss_and_grad(const TokenTensor& q, const MaskTensor& m,
                         std::optional<uint32_t> class_id, std::span<S> grad, double loss_scale,
                         SeededRng* mask_rng = nullptr) const;
    double loss_and_grad(const TokenTensor& q, const MaskTensor& m,
                         std::optional<uint32_t> class_id, std::span<S> grad, double loss_scale,
                         Workspace& ws, SeededRng* mask_rng = nullptr) const;

    std::unique_ptr<Workspace> make_workspace() const;

  private:
    void check_inputs(const TokenTensor& q, const MaskTensor& m,
                      std::optional<uint32_t> class_id) const;
    void embed_into(const TokenTensor& q, const MaskTensor& m, SeededRng* mask_rng, S* emb) const;
    void run_forward(const TokenTensor& q, const MaskTensor& m, std::optional<uint32_t> class_id,
                     Workspace& ws, SeededRng* mask_rng) const;

    PredictorConfig cfg_;
    QuantizerSpec spec_;
    ParamLayout layout_;
    std::vector<S> params_;
};

extern template class Model<float>;
extern template class Model<double>;

}  // namespace cubemask
