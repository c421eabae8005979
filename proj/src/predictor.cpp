#include "cubemask/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <bit>
#include <cstring>

namespace cubemask {

const char* to_string(MaskValueMode m) {
    switch (m) {
        case MaskValueMode::Learned: return "learned";
        case MaskValueMode::Fixed: return "fixed";
        case MaskValueMode::RandomId: return "random-id";
    }
    return "?";
}

MaskValueMode mask_value_mode_from_string(const std::string& s) {
    if (s == "learned") return MaskValueMode::Learned;
    if (s == "fixed") return MaskValueMode::Fixed;
    if (s == "random-id") return MaskValueMode::RandomId;
    throw ConfigError("unknown mask value mode: " + s);
}

void PredictorConfig::validate() const {
    if (levels < 2) throw ConfigError("PredictorConfig: levels must be >= 2");
    if (hidden == 0 || blocks == 0 || heads == 0 || mlp_ratio == 0)
        throw ConfigError("PredictorConfig: hidden/blocks/heads/mlp_ratio must be >= 1");
    if (hidden % heads != 0)
        throw ConfigError("PredictorConfig: hidden width must be divisible by head count");
    if (mask_mode == MaskValueMode::Fixed && !std::isfinite(fixed_mask_value))
        throw ConfigError("PredictorConfig: fixed mask value must be finite");
    shape.total();  // validates shape
}

LogitsTensor guided_logits(const LogitsTensor& cond, const LogitsTensor& uncond, double scale) {
    if (cond.shape != uncond.shape || cond.levels != uncond.levels)
        throw ShapeError("guided_logits: shape mismatch");
    LogitsTensor out(cond.shape, cond.levels);
    for (size_t k = 0; k < out.scores.size(); ++k)
        out.scores[k] = uncond.scores[k] + scale * (cond.scores[k] - uncond.scores[k]);
    return out;
}

std::vector<double> categorical_probs(std::span<const double> logits, double temperature) {
    if (!(temperature > 0.0)) throw ConfigError("categorical_probs: temperature must be > 0");
    std::vector<double> p(logits.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (double z : logits) mx = std::max(mx, z / temperature);
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] / temperature - mx);
        sum += p[i];
    }
    for (auto& v : p) v /= sum;
    return p;
}

const ParamSegment& ParamLayout::find(std::string_view name) const {
    if (const ParamSegment* s = try_find(name)) return *s;
    throw ConfigError("unknown parameter segment: " + std::string(name));
}

const ParamSegment* ParamLayout::try_find(std::string_view name) const {
    for (const auto& s : segments)
        if (s.name == name) return &s;
    return nullptr;
}

ParamLayout build_param_layout(const PredictorConfig& cfg) {
    cfg.validate();
    ParamLayout layout;
    auto add = [&](std::string name, std::vector<uint64_t> shape, bool decay) {
        ParamSegment seg;
        seg.name = std::move(name);
        seg.shape = std::move(shape);
        seg.size = 1;
        for (uint64_t s : seg.shape) seg.size *= s;
        seg.offset = layout.total;
        seg.decay = decay;
        layout.total += seg.size;
        layout.segments.push_back(std::move(seg));
    };

    const uint64_t d = cfg.shape.d, H = cfg.hidden, L = cfg.levels;
    const uint64_t S = cfg.shape.spatial();
    add("input_proj.weight", {H, d}, true);
    add("input_proj.bias", {H}, false);
    add("pos_embed", {S, H}, false);
    if (cfg.class_count > 0) add("class_embed", {cfg.class_count + 1, H}, false);
    if (cfg.mask_mode == MaskValueMode::Learned) add("mask_value", {d}, false);
    for (uint32_t b = 0; b < cfg.blocks; ++b) {
        const std::string p = "block" + std::to_string(b) + ".";
        add(p + "ln1.gain", {H}, false);
        add(p + "ln1.bias", {H}, false);
        add(p + "attn.q.weight", {H, H}, true);
        add(p + "attn.q.bias", {H}, false);
        add(p + "attn.k.weight", {H, H}, true);
        add(p + "attn.k.bias", {H}, false);
        add(p + "attn.v.weight", {H, H}, true);
        add(p + "attn.v.bias", {H}, false);
        add(p + "attn.out.weight", {H, H}, true);
        add(p + "attn.out.bias", {H}, false);
        add(p + "ln2.gain", {H}, false);
        add(p + "ln2.bias", {H}, false);
        add(p + "mlp.fc1.weight", {cfg.mlp_ratio * H, H}, true);
        add(p + "mlp.fc1.bias", {cfg.mlp_ratio * H}, false);
        add(p + "mlp.fc2.weight", {H, cfg.mlp_ratio * H}, true);
        add(p + "mlp.fc2.bias", {H}, false);
    }
    add("final_norm.gain", {H}, false);
    add("final_norm.bias", {H}, false);
    add("head.fc1.weight", {H, H}, true);
    add("head.fc1.bias", {H}, false);
    add("head.fc2.weight", {d * L, H}, true);
    add("head.fc2.bias", {d * L}, false);
    return layout;
}

namespace {

constexpr double kLnEps = 1e-5;

// Flat-buffer offsets in the order build_param_layout emits segments.
struct OffsetTable {
    size_t input_w, input_b, pos, cls, maskv;
    struct Block {
        size_t ln1g, ln1b, qw, qb, kw, kb, vw, vb, ow, ob, ln2g, ln2b, f1w, f1b, f2w, f2b;
    };
    std::vector<Block> block;
    size_t lnfg, lnfb, h1w, h1b, h2w, h2b;
};

OffsetTable make_offsets(const ParamLayout& layout, const PredictorConfig& cfg) {
    OffsetTable t{};
    size_t i = 0;
    auto next = [&] { return layout.segments[i++].offset; };
    t.input_w = next();
    t.input_b = next();
    t.pos = next();
    t.cls = cfg.class_count > 0 ? next() : size_t(0);
    t.maskv = cfg.mask_mode == MaskValueMode::Learned ? next() : size_t(0);
    t.block.resize(cfg.blocks);
    for (auto& b : t.block) {
        b.ln1g = next();
        b.ln1b = next();
        b.qw = next();
        b.qb = next();
        b.kw = next();
        b.kb = next();
        b.vw = next();
        b.vb = next();
        b.ow = next();
        b.ob = next();
        b.ln2g = next();
        b.ln2b = next();
        b.f1w = next();
        b.f1b = next();
        b.f2w = next();
        b.f2b = next();
    }
    t.lnfg = next();
    t.lnfb = next();
    t.h1w = next();
    t.h1b = next();
    t.h2w = next();
    t.h2b = next();
    return t;
}

// four independent accumulator chains: fixed summation order, FMA latency
// hidden
template <typename S>
S dot(const S* a, const S* b, size_t n) {
    S acc0 = 0, acc1 = 0, acc2 = 0, acc3 = 0;
    size_t k = 0;
    for (; k + 4 <= n; k += 4) {
        acc0 += a[k] * b[k];
        acc1 += a[k + 1] * b[k + 1];
        acc2 += a[k + 2] * b[k + 2];
        acc3 += a[k + 3] * b[k + 3];
    }
    S acc = (acc0 + acc1) + (acc2 + acc3);
    for (; k < n; ++k) acc += a[k] * b[k];
    return acc;
}

// y[S x out] = x[S x in] * W[out x in]^T + b[out]
template <typename S>
void linear_forward(const S* x, const S* w, const S* b, S* y, size_t rows, size_t in,
                    size_t out) {
    for (size_t r = 0; r < rows; ++r) {
        const S* xr = x + r * in;
        S* yr = y + r * out;
        for (size_t o = 0; o < out; ++o) {
            yr[o] = (b ? b[o] : S(0)) + dot(xr, w + o * in, in);
        }
    }
}

// accumulates dx, dW, db given dy
template <typename S>
void linear_backward(const S* x, const S* w, const S* dy, S* dx, S* dw, S* db, size_t rows,
                     size_t in, size_t out) {
    for (size_t r = 0; r < rows; ++r) {
        const S* xr = x + r * in;
        const S* dyr = dy + r * out;
        S* dxr = dx ? dx + r * in : nullptr;
        for (size_t o = 0; o < out; ++o) {
            const S g = dyr[o];
            const S* wo = w + o * in;
            S* dwo = dw + o * in;
            if (dxr)
                for (size_t k = 0; k < in; ++k) dxr[k] += g * wo[k];
            for (size_t k = 0; k < in; ++k) dwo[k] += g * xr[k];
            db[o] += g;
        }
    }
}

template <typename S>
void layernorm_forward(const S* x, const S* gain, const S* bias, S* xhat, S* rstd, S* y,
                       size_t rows, size_t width) {
    for (size_t r = 0; r < rows; ++r) {
        const S* xr = x + r * width;
        S mean = 0;
        for (size_t k = 0; k < width; ++k) mean += xr[k];
        mean /= static_cast<S>(width);
        S var = 0;
        for (size_t k = 0; k < width; ++k) {
            const S c = xr[k] - mean;
            var += c * c;
        }
        var /= static_cast<S>(width);
        const S rs = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
        rstd[r] = rs;
        S* xhr = xhat + r * width;
        S* yr = y + r * width;
        for (size_t k = 0; k < width; ++k) {
            xhr[k] = (xr[k] - mean) * rs;
            yr[k] = gain[k] * xhr[k] + bias[k];
        }
    }
}

// accumulates dx, dgain, dbias given dy
template <typename S>
void layernorm_backward(const S* xhat, const S* rstd, const S* gain, const S* dy, S* dx,
                        S* dgain, S* dbias, size_t rows, size_t width) {
    for (size_t r = 0; r < rows; ++r) {
        const S* xhr = xhat + r * width;
        const S* dyr = dy + r * width;
        S* dxr = dx + r * width;
        S sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (size_t k = 0; k < width; ++k) {
            const S dxh = dyr[k] * gain[k];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhr[k];
            dgain[k] += dyr[k] * xhr[k];
            dbias[k] += dyr[k];
        }
        const S inv_w = S(1) / static_cast<S>(width);
        for (size_t k = 0; k < width; ++k) {
            const S dxh = dyr[k] * gain[k];
            dxr[k] += rstd[r] * (dxh - inv_w * sum_dxhat - xhr[k] * inv_w * sum_dxhat_xhat);
        }
    }
}

// exp(x) from exponent bits plus a degree-5 polynomial for 2^f, f in [0,1);
// relative error ~1e-7, branch-free and vectorizable
inline float fast_exp(float x) {
    x = std::min(87.0f, std::max(-87.0f, x));
    const float t = x * 1.44269504088896341f;
    const float fi = std::floor(t);
    const float f = t - fi;
    const float p =
        1.0f + f * (0.69314718056f +
                    f * (0.240226506959f +
                         f * (0.0555041086648f + f * (0.00961812910763f + f * 0.00133335581464f))));
    const auto bits = static_cast<uint32_t>((static_cast<int32_t>(fi) + 127) << 23);
    return p * std::bit_cast<float>(bits);
}

template <typename S>
S exp_for(S x) {
    return std::exp(x);
}
template <>
inline float exp_for<float>(float x) {
    return fast_exp(x);
}

// sigmoid-form gelu: x * sigmoid(1.702 x). One exp per activation, smooth
// everywhere, gradient implemented against the same formula.
template <typename S>
S gelu(S x) {
    const S s = S(1) / (S(1) + exp_for(S(-1.702) * x));
    return x * s;
}

template <typename S>
S gelu_grad(S x) {
    const S s = S(1) / (S(1) + exp_for(S(-1.702) * x));
    return s + S(1.702) * x * s * (S(1) - s);
}

}  // namespace

template <typename S>
void Model<S>::Workspace::resize(const PredictorConfig& cfg) {
    const size_t Sq = cfg.shape.spatial();
    const size_t H = cfg.hidden, d = cfg.shape.d, R = cfg.mlp_ratio;
    emb.resize(Sq * d);
    x.resize(Sq * H);
    blocks.resize(cfg.blocks);
    for (auto& b : blocks) {
        b.ln1_xhat.resize(Sq * H);
        b.ln1_rstd.resize(Sq);
        b.ln1_out.resize(Sq * H);
        b.q.resize(Sq * H);
        b.k.resize(Sq * H);
        b.v.resize(Sq * H);
        b.att_probs.resize(static_cast<size_t>(cfg.heads) * Sq * Sq);
        b.att_cat.resize(Sq * H);
        b.ln2_xhat.resize(Sq * H);
        b.ln2_rstd.resize(Sq);
        b.ln2_out.resize(Sq * H);
        b.mlp_pre.resize(Sq * R * H);
        b.mlp_act.resize(Sq * R * H);
        b.x_in.resize(Sq * H);
        b.x_mid.resize(Sq * H);
    }
    lnf_xhat.resize(Sq * H);
    lnf_rstd.resize(Sq);
    lnf_out.resize(Sq * H);
    head_pre.resize(Sq * H);
    head_act.resize(Sq * H);
    logits.resize(Sq * d * cfg.levels);

    dlogits.resize(Sq * d * cfg.levels);
    d_head_act.resize(Sq * H);
    d_lnf_out.resize(Sq * H);
    dx.resize(Sq * H);
    d_branch.resize(Sq * H);
    d_qkv_q.resize(Sq * H);
    d_qkv_k.resize(Sq * H);
    d_qkv_v.resize(Sq * H);
    d_att_cat.resize(Sq * H);
    d_scores.resize(Sq);
    d_mlp.resize(Sq * R * H);
    demb.resize(Sq * d);
}

template <typename S>
Model<S>::Model(PredictorConfig cfg, QuantizerSpec spec)
    : cfg_(std::move(cfg)), spec_(std::move(spec)) {
    cfg_.validate();
    if (spec_.levels != cfg_.levels)
        throw ConfigError("Model: quantizer spec levels disagree with config");
    if (spec_.stats.dims != cfg_.shape.d)
        throw ShapeError("Model: quantizer spec dimensionality disagrees with shape");
    layout_ = build_param_layout(cfg_);
    params_.assign(layout_.total, S(0));
}

template <typename S>
Model<S> Model<S>::random_init(PredictorConfig cfg, QuantizerSpec spec, uint64_t seed) {
    Model m(std::move(cfg), std::move(spec));
    SeededRng rng(seed);
    const S scale = S(0.02);
    for (const auto& seg : m.layout_.segments) {
        S* p = m.params_.data() + seg.offset;
        if (seg.name.ends_with(".gain")) {
            std::fill_n(p, seg.size, S(1));
        } else if (seg.name.ends_with(".bias") || seg.name == "mask_value") {
            std::fill_n(p, seg.size, S(0));
        } else {
            for (size_t k = 0; k < seg.size; ++k) p[k] = scale * static_cast<S>(rng.normal());
        }
    }
    return m;
}

template <typename S>
std::span<S> Model<S>::param(std::string_view name) {
    const auto& seg = layout_.find(name);
    return {params_.data() + seg.offset, seg.size};
}

template <typename S>
std::span<const S> Model<S>::param(std::string_view name) const {
    const auto& seg = layout_.find(name);
    return {params_.data() + seg.offset, seg.size};
}

template <typename S>
void Model<S>::check_inputs(const TokenTensor& q, const MaskTensor& m,
                            std::optional<uint32_t> class_id) const {
    if (q.shape != cfg_.shape || m.shape != cfg_.shape)
        throw ShapeError("Model: input shape mismatch");
    if (q.levels != cfg_.levels) throw ConfigError("Model: token levels mismatch");
    if (class_id) {
        if (cfg_.class_count == 0)
            throw ConfigError("Model: class id given to an unconditional model");
        if (*class_id >= cfg_.class_count) throw ConfigError("Model: invalid class id");
    }
}

template <typename S>
std::vector<S> Model<S>::embed(const TokenTensor& q, const MaskTensor& m,
                               SeededRng* mask_rng) const {
    std::vector<S> emb(cfg_.shape.total());
    embed_into(q, m, mask_rng, emb.data());
    return emb;
}

template <typename S>
void Model<S>::embed_into(const TokenTensor& q, const MaskTensor& m, SeededRng* mask_rng,
                          S* emb) const {
    if (q.shape != cfg_.shape || m.shape != cfg_.shape)
        throw ShapeError("Model: input shape mismatch");
    if (cfg_.mask_mode == MaskValueMode::RandomId && mask_rng == nullptr)
        throw ConfigError("Model: random-id mask mode needs an rng");
    const size_t total = cfg_.shape.total();
    const uint32_t d = cfg_.shape.d;
    std::span<const S> learned =
        cfg_.mask_mode == MaskValueMode::Learned ? param("mask_value") : std::span<const S>{};
    for (size_t k = 0; k < total; ++k) {
        const uint32_t i = static_cast<uint32_t>(k % d);
        if (m.flags[k]) {
            switch (cfg_.mask_mode) {
                case MaskValueMode::Learned: emb[k] = learned[i]; break;
                case MaskValueMode::Fixed: emb[k] = static_cast<S>(cfg_.fixed_mask_value); break;
                case MaskValueMode::RandomId: {
                    const auto id = static_cast<uint32_t>(mask_rng->uniform_below(cfg_.levels));
                    emb[k] = static_cast<S>(bin_center(spec_, i, id));
                    break;
                }
            }
        } else {
            emb[k] = static_cast<S>(bin_center(spec_, i, q.ids[k]));
        }
    }
}

template <typename S>
void Model<S>::run_forward(const TokenTensor& q, const MaskTensor& m,
                           std::optional<uint32_t> class_id, Workspace& ws,
                           SeededRng* mask_rng) const {
    check_inputs(q, m, class_id);
    ws.resize(cfg_);
    const OffsetTable off = make_offsets(layout_, cfg_);
    const S* P = params_.data();
    const size_t Sq = cfg_.shape.spatial();
    const size_t H = cfg_.hidden, d = cfg_.shape.d, L = cfg_.levels;
    const size_t nh = cfg_.heads, dh = H / nh;
    const size_t RH = static_cast<size_t>(cfg_.mlp_ratio) * H;

    embed_into(q, m, mask_rng, ws.emb.data());

    linear_forward(ws.emb.data(), P + off.input_w, P + off.input_b, ws.x.data(), Sq, d, H);
    {
        const S* pos = P + off.pos;
        for (size_t k = 0; k < Sq * H; ++k) ws.x[k] += pos[k];
    }
    ws.class_row.reset();
    if (cfg_.class_count > 0) {
        const uint32_t row = class_id ? *class_id : cfg_.class_count;  // last row = null class
        ws.class_row = row;
        const S* c = P + off.cls + static_cast<size_t>(row) * H;
        for (size_t p = 0; p < Sq; ++p)
            for (size_t k = 0; k < H; ++k) ws.x[p * H + k] += c[k];
    }

    const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(dh));
    for (uint32_t b = 0; b < cfg_.blocks; ++b) {
        auto& tr = ws.blocks[b];
        const auto& ob = off.block[b];
        tr.x_in = ws.x;

        layernorm_forward(ws.x.data(), P + ob.ln1g, P + ob.ln1b, tr.ln1_xhat.data(),
                          tr.ln1_rstd.data(), tr.ln1_out.data(), Sq, H);
        linear_forward(tr.ln1_out.data(), P + ob.qw, P + ob.qb, tr.q.data(), Sq, H, H);
        linear_forward(tr.ln1_out.data(), P + ob.kw, P + ob.kb, tr.k.data(), Sq, H, H);
        linear_forward(tr.ln1_out.data(), P + ob.vw, P + ob.vb, tr.v.data(), Sq, H, H);

        // bidirectional attention, one head at a time
        for (size_t h = 0; h < nh; ++h) {
            S* probs = tr.att_probs.data() + h * Sq * Sq;
            for (size_t s = 0; s < Sq; ++s) {
                const S* qs = tr.q.data() + s * H + h * dh;
                S* row = probs + s * Sq;
                S mx = -std::numeric_limits<S>::infinity();
                for (size_t t = 0; t < Sq; ++t) {
                    const S* kt = tr.k.data() + t * H + h * dh;
                    row[t] = dot(qs, kt, dh) * inv_sqrt_dh;
                    mx = std::max(mx, row[t]);
                }
                S denom = 0;
                for (size_t t = 0; t < Sq; ++t) {
                    row[t] = std::exp(row[t] - mx);
                    denom += row[t];
                }
                const S inv = S(1) / denom;
                for (size_t t = 0; t < Sq; ++t) row[t] *= inv;
                S* out = tr.att_cat.data() + s * H + h * dh;
                std::fill_n(out, dh, S(0));
                for (size_t t = 0; t < Sq; ++t) {
                    const S p = row[t];
                    const S* vt = tr.v.data() + t * H + h * dh;
                    for (size_t e = 0; e < dh; ++e) out[e] += p * vt[e];
                }
            }
        }

        linear_forward(tr.att_cat.data(), P + ob.ow, P + ob.ob, tr.x_mid.data(), Sq, H, H);
        for (size_t k = 0; k < Sq * H; ++k) tr.x_mid[k] += tr.x_in[k];

        layernorm_forward(tr.x_mid.data(), P + ob.ln2g, P + ob.ln2b, tr.ln2_xhat.data(),
                          tr.ln2_rstd.data(), tr.ln2_out.data(), Sq, H);
        linear_forward(tr.ln2_out.data(), P + ob.f1w, P + ob.f1b, tr.mlp_pre.data(), Sq, H, RH);
        for (size_t k = 0; k < Sq * RH; ++k) tr.mlp_act[k] = gelu(tr.mlp_pre[k]);
        linear_forward(tr.mlp_act.data(), P + ob.f2w, P + ob.f2b, ws.x.data(), Sq, RH, H);
        for (size_t k = 0; k < Sq * H; ++k) ws.x[k] += tr.x_mid[k];
    }

    layernorm_forward(ws.x.data(), P + off.lnfg, P + off.lnfb, ws.lnf_xhat.data(),
                      ws.lnf_rstd.data(), ws.lnf_out.data(), Sq, H);
    linear_forward(ws.lnf_out.data(), P + off.h1w, P + off.h1b, ws.head_pre.data(), Sq, H, H);
    for (size_t k = 0; k < Sq * H; ++k) ws.head_act[k] = gelu(ws.head_pre[k]);
    linear_forward(ws.head_act.data(), P + off.h2w, P + off.h2b, ws.logits.data(), Sq, H, d * L);
}

template <typename S>
LogitsTensor Model<S>::forward(const TokenTensor& q, const MaskTensor& m,
                               std::optional<uint32_t> class_id, SeededRng* mask_rng) const {
    thread_local Workspace ws;  // resized on config changes, reused otherwise
    run_forward(q, m, class_id, ws, mask_rng);
    LogitsTensor out(cfg_.shape, cfg_.levels);
    for (size_t k = 0; k < ws.logits.size(); ++k)
        out.scores[k] = static_cast<double>(ws.logits[k]);
    return out;
}

template <typename S>
std::unique_ptr<typename Model<S>::Workspace> Model<S>::make_workspace() const {
    return std::make_unique<Workspace>();
}

template <typename S>
double Model<S>::loss_and_grad(const TokenTensor& q, const MaskTensor& m,
                               std::optional<uint32_t> class_id, std::span<S> grad,
                               double loss_scale, SeededRng* mask_rng) const {
    Workspace ws;
    return loss_and_grad(q, m, class_id, grad, loss_scale, ws, mask_rng);
}

template <typename S>
double Model<S>::loss_and_grad(const TokenTensor& q, const MaskTensor& m,
                               std::optional<uint32_t> class_id, std::span<S> grad,
                               double loss_scale, Workspace& ws, SeededRng* mask_rng) const {
    if (grad.size() != layout_.total) throw ShapeError("loss_and_grad: grad size mismatch");
    const size_t n_masked = count_masked(m);
    if (n_masked == 0) throw DataError("loss_and_grad: mask selects no positions");

    run_forward(q, m, class_id, ws, mask_rng);

    const OffsetTable off = make_offsets(layout_, cfg_);
    const S* P = params_.data();
    S* G = grad.data();
    const size_t Sq = cfg_.shape.spatial();
    const size_t H = cfg_.hidden, d = cfg_.shape.d, L = cfg_.levels;
    const size_t nh = cfg_.heads, dh = H / nh;
    const size_t RH = static_cast<size_t>(cfg_.mlp_ratio) * H;
    const size_t total = cfg_.shape.total();

    // masked cross-entropy and dlogits, fused; mean over masked slots
    double loss = 0.0;
    std::fill(ws.dlogits.begin(), ws.dlogits.end(), S(0));
    const double inv_masked = 1.0 / static_cast<double>(n_masked);
    for (size_t slot = 0; slot < total; ++slot) {
        if (!m.flags[slot]) continue;
        const S* z = ws.logits.data() + slot * L;
        double mx = -std::numeric_limits<double>::infinity();
        for (size_t l = 0; l < L; ++l) mx = std::max(mx, static_cast<double>(z[l]));
        double denom = 0.0;
        for (size_t l = 0; l < L; ++l) denom += std::exp(static_cast<double>(z[l]) - mx);
        const double lse = std::log(denom) + mx;
        const uint16_t target = q.ids[slot];
        loss += (lse - static_cast<double>(z[target])) * inv_masked;
        S* dz = ws.dlogits.data() + slot * L;
        for (size_t l = 0; l < L; ++l) {
            const double p = std::exp(static_cast<double>(z[l]) - lse);
            double g = p * inv_masked;
            if (l == target) g -= inv_masked;
            dz[l] = static_cast<S>(g * loss_scale);
        }
    }

    // head
    std::fill(ws.dx.begin(), ws.dx.end(), S(0));
    std::fill(ws.d_head_act.begin(), ws.d_head_act.end(), S(0));
    linear_backward(ws.head_act.data(), P + off.h2w, ws.dlogits.data(), ws.d_head_act.data(),
                    G + off.h2w, G + off.h2b, Sq, H, d * L);
    for (size_t k = 0; k < Sq * H; ++k) ws.d_head_act[k] *= gelu_grad(ws.head_pre[k]);
    std::fill(ws.d_lnf_out.begin(), ws.d_lnf_out.end(), S(0));
    linear_backward(ws.lnf_out.data(), P + off.h1w, ws.d_head_act.data(), ws.d_lnf_out.data(),
                    G + off.h1w, G + off.h1b, Sq, H, H);
    layernorm_backward(ws.lnf_xhat.data(), ws.lnf_rstd.data(), P + off.lnfg, ws.d_lnf_out.data(),
                       ws.dx.data(), G + off.lnfg, G + off.lnfb, Sq, H);

    const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(dh));
    for (int64_t b = static_cast<int64_t>(cfg_.blocks) - 1; b >= 0; --b) {
        auto& tr = ws.blocks[b];
        const auto& ob = off.block[b];

        // MLP branch: x = x_mid + fc2(gelu(fc1(ln2(x_mid))))
        std::fill(ws.d_mlp.begin(), ws.d_mlp.end(), S(0));
        linear_backward(tr.mlp_act.data(), P + ob.f2w, ws.dx.data(), ws.d_mlp.data(),
                        G + ob.f2w, G + ob.f2b, Sq, RH, H);
        for (size_t k = 0; k < Sq * RH; ++k) ws.d_mlp[k] *= gelu_grad(tr.mlp_pre[k]);
        std::fill(ws.d_branch.begin(), ws.d_branch.end(), S(0));
        linear_backward(tr.ln2_out.data(), P + ob.f1w, ws.d_mlp.data(), ws.d_branch.data(),
                        G + ob.f1w, G + ob.f1b, Sq, H, RH);
        // dx holds d(x_out); the residual passes it straight through to x_mid
        layernorm_backward(tr.ln2_xhat.data(), tr.ln2_rstd.data(), P + ob.ln2g,
                           ws.d_branch.data(), ws.dx.data(), G + ob.ln2g, G + ob.ln2b, Sq, H);

        // attention branch: x_mid = x_in + out_proj(att_cat)
        std::fill(ws.d_att_cat.begin(), ws.d_att_cat.end(), S(0));
        linear_backward(tr.att_cat.data(), P + ob.ow, ws.dx.data(), ws.d_att_cat.data(),
                        G + ob.ow, G + ob.ob, Sq, H, H);

        std::fill(ws.d_qkv_q.begin(), ws.d_qkv_q.end(), S(0));
        std::fill(ws.d_qkv_k.begin(), ws.d_qkv_k.end(), S(0));
        std::fill(ws.d_qkv_v.begin(), ws.d_qkv_v.end(), S(0));
        for (size_t h = 0; h < nh; ++h) {
            const S* probs = tr.att_probs.data() + h * Sq * Sq;
            for (size_t s = 0; s < Sq; ++s) {
                const S* prow = probs + s * Sq;
                const S* doh = ws.d_att_cat.data() + s * H + h * dh;
                S dp_dot_p = 0;
                S* dsc = ws.d_scores.data();
                for (size_t t = 0; t < Sq; ++t) {
                    const S* vt = tr.v.data() + t * H + h * dh;
                    dsc[t] = dot(doh, vt, dh);
                    dp_dot_p += dsc[t] * prow[t];
                }
                for (size_t t = 0; t < Sq; ++t) dsc[t] = prow[t] * (dsc[t] - dp_dot_p);
                S* dq = ws.d_qkv_q.data() + s * H + h * dh;
                const S* qs = tr.q.data() + s * H + h * dh;
                for (size_t t = 0; t < Sq; ++t) {
                    const S p = prow[t];
                    const S g = dsc[t] * inv_sqrt_dh;
                    S* dv = ws.d_qkv_v.data() + t * H + h * dh;
                    S* dk = ws.d_qkv_k.data() + t * H + h * dh;
                    const S* kt = tr.k.data() + t * H + h * dh;
                    for (size_t e = 0; e < dh; ++e) {
                        dv[e] += p * doh[e];
                        dq[e] += g * kt[e];
                        dk[e] += g * qs[e];
                    }
                }
            }
        }

        std::fill(ws.d_branch.begin(), ws.d_branch.end(), S(0));
        linear_backward(tr.ln1_out.data(), P + ob.qw, ws.d_qkv_q.data(), ws.d_branch.data(),
                        G + ob.qw, G + ob.qb, Sq, H, H);
        linear_backward(tr.ln1_out.data(), P + ob.kw, ws.d_qkv_k.data(), ws.d_branch.data(),
                        G + ob.kw, G + ob.kb, Sq, H, H);
        linear_backward(tr.ln1_out.data(), P + ob.vw, ws.d_qkv_v.data(), ws.d_branch.data(),
                        G + ob.vw, G + ob.vb, Sq, H, H);
        layernorm_backward(tr.ln1_xhat.data(), tr.ln1_rstd.data(), P + ob.ln1g,
                           ws.d_branch.data(), ws.dx.data(), G + ob.ln1g, G + ob.ln1b, Sq, H);
    }

    // input projection, embeddings, mask scalars
    if (ws.class_row) {
        S* dcls = G + off.cls + static_cast<size_t>(*ws.class_row) * H;
        for (size_t p = 0; p < Sq; ++p)
            for (size_t k = 0; k < H; ++k) dcls[k] += ws.dx[p * H + k];
    }
    {
        S* dpos = G + off.pos;
        for (size_t k = 0; k < Sq * H; ++k) dpos[k] += ws.dx[k];
    }
    std::fill(ws.demb.begin(), ws.demb.end(), S(0));
    linear_backward(ws.emb.data(), P + off.input_w, ws.dx.data(), ws.demb.data(),
                    G + off.input_w, G + off.input_b, Sq, d, H);
    if (cfg_.mask_mode == MaskValueMode::Learned) {
        S* dmask = G + off.maskv;
        for (size_t k = 0; k < total; ++k)
            if (m.flags[k]) dmask[k % d] += ws.demb[k];
    }

    return loss;
}

template class Model<float>;
template class Model<double>;

}  // namespace cubemask
