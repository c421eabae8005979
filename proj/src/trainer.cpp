#include "cubemask/trainer.hpp"

#include <cmath>
#include <cstring>
#include <thread>

#include <json.hpp>

namespace cubemask {

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("TrainConfig: lr must be > 0");
    if (weight_decay < 0.0) throw ConfigError("TrainConfig: weight decay must be >= 0");
    if (!(clip_norm > 0.0)) throw ConfigError("TrainConfig: clip norm must be > 0");
    if (total_steps == 0) throw ConfigError("TrainConfig: total_steps must be >= 1");
    if (warmup_steps > total_steps)
        throw ConfigError("TrainConfig: warmup may not exceed total steps");
    if (batch_size == 0) throw ConfigError("TrainConfig: batch size must be >= 1");
    if (!(ema_momentum > 0.0 && ema_momentum < 1.0))
        throw ConfigError("TrainConfig: ema momentum must lie in (0, 1)");
    if (!(sigma > 0.0)) throw ConfigError("TrainConfig: sigma must be > 0");
    if (cond_dropout < 0.0 || cond_dropout > 1.0)
        throw ConfigError("TrainConfig: condition dropout must lie in [0, 1]");
}

double lr_at(uint64_t step, const TrainConfig& cfg) {
    if (step > cfg.total_steps) step = cfg.total_steps;
    if (step < cfg.warmup_steps)
        return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    const uint64_t span = cfg.total_steps - cfg.warmup_steps;
    if (span == 0) return cfg.lr;
    const double progress = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span);
    return cfg.lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

double masked_ce_loss(const LogitsTensor& logits, const TokenTensor& targets,
                      const MaskTensor& m) {
    if (logits.shape != targets.shape || logits.shape != m.shape)
        throw ShapeError("masked_ce_loss: shape mismatch");
    if (logits.levels != targets.levels) throw ConfigError("masked_ce_loss: level mismatch");
    const size_t total = logits.shape.total();
    const uint32_t L = logits.levels;
    double loss = 0.0;
    size_t n_masked = 0;
    for (size_t slot = 0; slot < total; ++slot) {
        if (!m.flags[slot]) continue;
        ++n_masked;
        const auto z = logits.slot(slot);
        double mx = -std::numeric_limits<double>::infinity();
        for (uint32_t l = 0; l < L; ++l) mx = std::max(mx, z[l]);
        double denom = 0.0;
        for (uint32_t l = 0; l < L; ++l) denom += std::exp(z[l] - mx);
        loss += std::log(denom) + mx - z[targets.ids[slot]];
    }
    if (n_masked == 0) throw DataError("masked_ce_loss: mask selects no positions");
    return loss / static_cast<double>(n_masked);
}

template <typename S>
double clip_global_norm(std::span<S> grad, double max_norm) {
    double sq = 0.0;
    for (S g : grad) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const S scale = static_cast<S>(max_norm / norm);
        for (S& g : grad) g *= scale;
    }
    return norm;
}

template <typename S>
TrainState<S>::TrainState(Model<S> model, TrainConfig cfg)
    : model_(std::move(model)), cfg_(std::move(cfg)) {
    cfg_.validate();
    const size_t n = model_.param_count();
    ema_ = model_.params();
    opt_.m.assign(n, S(0));
    opt_.v.assign(n, S(0));
    opt_.step = 0;
    decay_mask_.assign(n, 0);
    for (const auto& seg : model_.layout().segments)
        if (seg.decay) std::fill_n(decay_mask_.begin() + seg.offset, seg.size, uint8_t(1));
}

template <typename S>
Model<S> TrainState<S>::ema_model() const {
    Model<S> m = model_;
    m.params() = ema_;
    return m;
}

namespace {

// sample lanes inside one step's random stream
constexpr uint64_t kLaneRatio = 0;

}  // namespace

template <typename S>
double TrainState<S>::train_step(std::span<const TrainSample> batch, unsigned workers) {
    if (batch.empty()) throw ConfigError("train_step: empty batch");
    const size_t n_params = model_.param_count();
    const size_t n_chunks = std::min<size_t>(kGradChunks, batch.size());
    if (chunk_grads_.size() != n_chunks) {
        chunk_grads_.assign(n_chunks, std::vector<S>());
        chunk_losses_.assign(n_chunks, 0.0);
    }

    const SeededRng root(cfg_.seed);
    const double per_sample_scale = 1.0 / static_cast<double>(batch.size());
    const uint64_t step_now = opt_.step;

    auto process_chunk = [&](size_t c) {
        auto& grad = chunk_grads_[c];
        grad.assign(n_params, S(0));
        double loss = 0.0;
        auto ws = model_.make_workspace();
        const size_t begin = c * batch.size() / n_chunks;
        const size_t end = (c + 1) * batch.size() / n_chunks;
        for (size_t s = begin; s < end; ++s) {
            const TrainSample& sample = batch[s];
            if (sample.tokens == nullptr) throw ConfigError("train_step: null sample");
            SeededRng rng = root.child(step_now, s);
            const double ratio = sample_ratio(MaskRatioDist(cfg_.sigma), rng);
            const MaskTensor mask =
                sample_mask(sample.tokens->shape, ratio, cfg_.strategy, rng);
            std::optional<uint32_t> class_id = sample.class_id;
            if (class_id && cfg_.cond_dropout > 0.0 && rng.uniform() < cfg_.cond_dropout)
                class_id.reset();
            loss += model_.loss_and_grad(*sample.tokens, mask, class_id,
                                         std::span<S>(grad.data(), grad.size()),
                                         per_sample_scale, *ws, &rng) *
                    per_sample_scale;
        }
        chunk_losses_[c] = loss;
    };

    unsigned n_workers = workers == 0 ? std::thread::hardware_concurrency() : workers;
    n_workers = std::max(1u, std::min<unsigned>(n_workers, static_cast<unsigned>(n_chunks)));
    if (n_workers <= 1) {
        for (size_t c = 0; c < n_chunks; ++c) process_chunk(c);
    } else {
        std::vector<std::thread> pool;
        std::exception_ptr first_error;
        std::mutex err_mu;
        std::atomic<size_t> next{0};
        for (unsigned t = 0; t < n_workers; ++t) {
            pool.emplace_back([&] {
                for (;;) {
                    const size_t c = next.fetch_add(1);
                    if (c >= n_chunks) return;
                    try {
                        process_chunk(c);
                    } catch (...) {
                        std::lock_guard<std::mutex> lock(err_mu);
                        if (!first_error) first_error = std::current_exception();
                        return;
                    }
                }
            });
        }
        for (auto& th : pool) th.join();
        if (first_error) std::rethrow_exception(first_error);
    }

    // fixed-order reduction: chunk boundaries depend on batch size only
    std::vector<S>& grad = chunk_grads_[0];
    for (size_t c = 1; c < n_chunks; ++c) {
        const auto& g = chunk_grads_[c];
        for (size_t k = 0; k < n_params; ++k) grad[k] += g[k];
    }
    double loss = 0.0;
    for (size_t c = 0; c < n_chunks; ++c) loss += chunk_losses_[c];
    if (!std::isfinite(loss)) throw DataError("train_step: non-finite loss at step " +
                                              std::to_string(step_now));

    clip_global_norm(std::span<S>(grad.data(), grad.size()), cfg_.clip_norm);

    // AdamW with decoupled decay; embeddings, norms and mask scalars skip decay
    const double lr = lr_at(step_now, cfg_);
    const uint64_t t = step_now + 1;
    const double bc1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(t));
    std::vector<S>& p = model_.params();
    for (size_t k = 0; k < n_params; ++k) {
        const double g = static_cast<double>(grad[k]);
        const double m = cfg_.adam_beta1 * static_cast<double>(opt_.m[k]) +
                         (1.0 - cfg_.adam_beta1) * g;
        const double v = cfg_.adam_beta2 * static_cast<double>(opt_.v[k]) +
                         (1.0 - cfg_.adam_beta2) * g * g;
        opt_.m[k] = static_cast<S>(m);
        opt_.v[k] = static_cast<S>(v);
        double update = (m / bc1) / (std::sqrt(v / bc2) + cfg_.adam_eps);
        if (decay_mask_[k]) update += cfg_.weight_decay * static_cast<double>(p[k]);
        p[k] = static_cast<S>(static_cast<double>(p[k]) - lr * update);
    }

    const double mu = cfg_.ema_momentum;
    for (size_t k = 0; k < n_params; ++k)
        ema_[k] = static_cast<S>(mu * static_cast<double>(ema_[k]) +
                                 (1.0 - mu) * static_cast<double>(p[k]));

    opt_.step = step_now + 1;
    return loss;
}

// ---------------------------------------------------------------------------
// checkpointing: magic "CBDK", version, crc32 over the remainder, then
// manifest sections for meta / params / ema / optimizer / rng
// ---------------------------------------------------------------------------

namespace {

constexpr uint32_t kCheckpointVersion = 1;

template <typename S>
constexpr io::Dtype scalar_dtype() {
    return sizeof(S) == 4 ? io::Dtype::F32 : io::Dtype::F64;
}

template <typename S>
std::vector<uint8_t> to_bytes(std::span<const S> values) {
    std::vector<uint8_t> out(values.size() * sizeof(S));
    std::memcpy(out.data(), values.data(), out.size());
    return out;
}

template <typename S>
std::vector<S> from_bytes(const io::Blob& b) {
    if (b.dtype != scalar_dtype<S>()) throw DataError("checkpoint: dtype mismatch for " + b.name);
    std::vector<S> out(b.payload.size() / sizeof(S));
    std::memcpy(out.data(), b.payload.data(), b.payload.size());
    return out;
}

template <typename S>
std::vector<io::Blob> param_blobs(const ParamLayout& layout, const std::vector<S>& values) {
    std::vector<io::Blob> blobs;
    blobs.reserve(layout.segments.size());
    for (const auto& seg : layout.segments) {
        io::Blob b;
        b.name = seg.name;
        b.dtype = scalar_dtype<S>();
        b.shape = seg.shape;
        b.payload = to_bytes(std::span<const S>(values.data() + seg.offset, seg.size));
        blobs.push_back(std::move(b));
    }
    return blobs;
}

template <typename S>
std::vector<S> gather_param_blobs(const ParamLayout& layout, const std::vector<io::Blob>& blobs,
                                  const char* what) {
    std::vector<S> values(layout.total, S(0));
    if (blobs.size() != layout.segments.size())
        throw DataError(std::string("checkpoint: wrong blob count in ") + what);
    for (size_t i = 0; i < blobs.size(); ++i) {
        const auto& seg = layout.segments[i];
        const auto& b = blobs[i];
        if (b.name != seg.name || b.elements() != seg.size)
            throw DataError("checkpoint: unexpected blob " + b.name + " in " + what);
        const auto vals = from_bytes<S>(b);
        std::copy(vals.begin(), vals.end(), values.begin() + seg.offset);
    }
    return values;
}

nlohmann::json config_json(const PredictorConfig& pc, const TrainConfig& tc,
                           const QuantizerSpec& spec, io::Dtype dtype) {
    nlohmann::json j;
    j["scalar"] = dtype == io::Dtype::F32 ? "f32" : "f64";
    j["predictor"] = {
        {"h", pc.shape.h},           {"w", pc.shape.w},
        {"d", pc.shape.d},           {"levels", pc.levels},
        {"hidden", pc.hidden},       {"blocks", pc.blocks},
        {"heads", pc.heads},         {"mlp_ratio", pc.mlp_ratio},
        {"class_count", pc.class_count},
        {"mask_mode", to_string(pc.mask_mode)},
        {"fixed_mask_value", pc.fixed_mask_value},
    };
    j["train"] = {
        {"lr", tc.lr},
        {"weight_decay", tc.weight_decay},
        {"clip_norm", tc.clip_norm},
        {"warmup_steps", tc.warmup_steps},
        {"total_steps", tc.total_steps},
        {"batch_size", tc.batch_size},
        {"ema_momentum", tc.ema_momentum},
        {"sigma", tc.sigma},
        {"cond_dropout", tc.cond_dropout},
        {"seed", tc.seed},
        {"strategy", to_string(tc.strategy)},
        {"adam_beta1", tc.adam_beta1},
        {"adam_beta2", tc.adam_beta2},
        {"adam_eps", tc.adam_eps},
    };
    j["quantizer"] = {
        {"levels", spec.levels},
        {"dims", spec.stats.dims},
        {"lo", spec.stats.lo},
        {"hi", spec.stats.hi},
        {"sample_count", spec.stats.sample_count},
    };
    return j;
}

void parse_config_json(const nlohmann::json& j, PredictorConfig& pc, TrainConfig& tc,
                       QuantizerSpec& spec) {
    const auto& p = j.at("predictor");
    pc.shape = Shape3(p.at("h").get<uint32_t>(), p.at("w").get<uint32_t>(),
                      p.at("d").get<uint32_t>());
    pc.levels = p.at("levels").get<uint32_t>();
    pc.hidden = p.at("hidden").get<uint32_t>();
    pc.blocks = p.at("blocks").get<uint32_t>();
    pc.heads = p.at("heads").get<uint32_t>();
    pc.mlp_ratio = p.at("mlp_ratio").get<uint32_t>();
    pc.class_count = p.at("class_count").get<uint32_t>();
    pc.mask_mode = mask_value_mode_from_string(p.at("mask_mode").get<std::string>());
    pc.fixed_mask_value = p.at("fixed_mask_value").get<double>();
    const auto& t = j.at("train");
    tc.lr = t.at("lr").get<double>();
    tc.weight_decay = t.at("weight_decay").get<double>();
    tc.clip_norm = t.at("clip_norm").get<double>();
    tc.warmup_steps = t.at("warmup_steps").get<uint64_t>();
    tc.total_steps = t.at("total_steps").get<uint64_t>();
    tc.batch_size = t.at("batch_size").get<uint64_t>();
    tc.ema_momentum = t.at("ema_momentum").get<double>();
    tc.sigma = t.at("sigma").get<double>();
    tc.cond_dropout = t.at("cond_dropout").get<double>();
    tc.seed = t.at("seed").get<uint64_t>();
    tc.strategy = mask_strategy_from_string(t.at("strategy").get<std::string>());
    tc.adam_beta1 = t.at("adam_beta1").get<double>();
    tc.adam_beta2 = t.at("adam_beta2").get<double>();
    tc.adam_eps = t.at("adam_eps").get<double>();
    const auto& q = j.at("quantizer");
    CalibrationStats stats;
    stats.dims = q.at("dims").get<uint32_t>();
    stats.lo = q.at("lo").get<std::vector<double>>();
    stats.hi = q.at("hi").get<std::vector<double>>();
    stats.sample_count = q.at("sample_count").get<uint64_t>();
    spec = QuantizerSpec(q.at("levels").get<uint32_t>(), std::move(stats));
}

io::Blob u64_blob(std::string name, uint64_t value) {
    io::Blob b;
    b.name = std::move(name);
    b.dtype = io::Dtype::U64;
    b.shape = {1};
    b.payload.resize(8);
    for (int i = 0; i < 8; ++i) b.payload[i] = static_cast<uint8_t>(value >> (8 * i));
    return b;
}

uint64_t u64_from_blob(const io::Blob& b) {
    if (b.payload.size() != 8) throw DataError("checkpoint: bad u64 blob " + b.name);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b.payload[i]) << (8 * i);
    return v;
}

io::Blob text_blob(std::string name, std::string_view text) {
    io::Blob b;
    b.name = std::move(name);
    b.dtype = io::Dtype::U8;
    b.shape = {text.size()};
    b.payload.assign(text.begin(), text.end());
    return b;
}

struct RawCheckpoint {
    nlohmann::json meta;
    uint64_t step = 0;
    std::vector<io::Blob> params, ema, opt;
    uint64_t rng_seed = 0;
};

RawCheckpoint read_raw_checkpoint(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    io::Reader header(bytes);
    if (bytes.size() < 12 || header.str(4) != "CBDK")
        throw DataError("checkpoint: bad magic");
    if (header.u32() != kCheckpointVersion)
        throw DataError("checkpoint: unsupported version");
    const uint32_t stored_crc = header.u32();
    const auto body = std::span<const uint8_t>(bytes).subspan(12);
    if (io::crc32(body) != stored_crc) throw DataError("checkpoint: checksum mismatch");

    io::Reader r(body);
    RawCheckpoint raw;
    auto meta = io::read_section(r);
    raw.params = io::read_section(r);
    raw.ema = io::read_section(r);
    raw.opt = io::read_section(r);
    auto rng = io::read_section(r);
    if (r.remaining() != 0) throw DataError("checkpoint: trailing bytes");

    for (const auto& b : meta) {
        if (b.name == "config") {
            const std::string text(b.payload.begin(), b.payload.end());
            raw.meta = nlohmann::json::parse(text, nullptr, false);
            if (raw.meta.is_discarded()) throw DataError("checkpoint: invalid config JSON");
        } else if (b.name == "step") {
            raw.step = u64_from_blob(b);
        }
    }
    if (raw.meta.is_null()) throw DataError("checkpoint: missing config");
    for (const auto& b : rng)
        if (b.name == "seed") raw.rng_seed = u64_from_blob(b);
    return raw;
}

}  // namespace

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const TrainState<S>& state) {
    const auto& layout = state.model().layout();
    io::Writer body;

    std::vector<io::Blob> meta;
    const auto j = config_json(state.model().config(), state.config(), state.model().spec(),
                               scalar_dtype<S>());
    meta.push_back(text_blob("config", j.dump()));
    meta.push_back(u64_blob("step", state.step()));
    io::write_section(body, meta);

    io::write_section(body, param_blobs(layout, state.model().params()));
    io::write_section(body, param_blobs(layout, state.ema()));

    std::vector<io::Blob> opt;
    {
        auto m_blobs = param_blobs(layout, state.optimizer().m);
        auto v_blobs = param_blobs(layout, state.optimizer().v);
        for (auto& b : m_blobs) b.name = "adam.m." + b.name;
        for (auto& b : v_blobs) b.name = "adam.v." + b.name;
        opt = std::move(m_blobs);
        opt.insert(opt.end(), std::make_move_iterator(v_blobs.begin()),
                   std::make_move_iterator(v_blobs.end()));
    }
    io::write_section(body, opt);

    std::vector<io::Blob> rng;
    rng.push_back(u64_blob("seed", state.config().seed));
    rng.push_back(text_blob("algorithm", "xoshiro256++/splitmix64"));
    io::write_section(body, rng);

    io::Writer file;
    file.str("CBDK");
    file.u32(kCheckpointVersion);
    file.u32(io::crc32(body.data()));
    file.bytes(body.data());
    io::write_file(path, file.data());
}

template <typename S>
TrainState<S> load_checkpoint(const std::filesystem::path& path) {
    RawCheckpoint raw = read_raw_checkpoint(path);

    const std::string scalar = raw.meta.at("scalar").get<std::string>();
    if ((sizeof(S) == 4 && scalar != "f32") || (sizeof(S) == 8 && scalar != "f64"))
        throw DataError("checkpoint: scalar type is " + scalar);

    PredictorConfig pc;
    TrainConfig tc;
    QuantizerSpec spec;
    try {
        parse_config_json(raw.meta, pc, tc, spec);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint: bad config: " + std::string(e.what()));
    }

    Model<S> model(pc, spec);
    model.params() = gather_param_blobs<S>(model.layout(), raw.params, "params");

    TrainState<S> state(std::move(model), tc);
    const auto& layout = state.model().layout();
    state.ema() = gather_param_blobs<S>(layout, raw.ema, "ema");

    if (raw.opt.size() != 2 * layout.segments.size())
        throw DataError("checkpoint: wrong optimizer blob count");
    std::vector<io::Blob> m_blobs(raw.opt.begin(),
                                  raw.opt.begin() + static_cast<long>(layout.segments.size()));
    std::vector<io::Blob> v_blobs(raw.opt.begin() + static_cast<long>(layout.segments.size()),
                                  raw.opt.end());
    for (auto& b : m_blobs) {
        if (!b.name.starts_with("adam.m.")) throw DataError("checkpoint: bad moment blob " + b.name);
        b.name = b.name.substr(7);
    }
    for (auto& b : v_blobs) {
        if (!b.name.starts_with("adam.v.")) throw DataError("checkpoint: bad moment blob " + b.name);
        b.name = b.name.substr(7);
    }
    state.optimizer().m = gather_param_blobs<S>(layout, m_blobs, "adam.m");
    state.optimizer().v = gather_param_blobs<S>(layout, v_blobs, "adam.v");
    state.optimizer().step = raw.step;
    return state;
}

io::Dtype checkpoint_scalar_dtype(const std::filesystem::path& path) {
    RawCheckpoint raw = read_raw_checkpoint(path);
    const std::string scalar = raw.meta.at("scalar").get<std::string>();
    return scalar == "f32" ? io::Dtype::F32 : io::Dtype::F64;
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template class TrainState<float>;
template class TrainState<double>;
template double clip_global_norm<float>(std::span<float>, double);
template double clip_global_norm<double>(std::span<double>, double);
template void save_checkpoint<float>(const std::filesystem::path&, const TrainState<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, const TrainState<double>&);
template TrainState<float> load_checkpoint<float>(const std::filesystem::path&);
template TrainState<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace cubemask
