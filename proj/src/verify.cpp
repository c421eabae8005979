#include "cubemask/verify.hpp"

#include <cmath>
#include <sstream>

namespace cubemask {

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

QuantizerSpec random_spec(uint32_t d, uint32_t levels, SeededRng& rng) {
    CalibrationStats stats;
    stats.dims = d;
    stats.lo.resize(d);
    stats.hi.resize(d);
    stats.sample_count = 0;
    for (uint32_t i = 0; i < d; ++i) {
        stats.lo[i] = -5.0 + 4.0 * rng.uniform();
        stats.hi[i] = stats.lo[i] + 0.5 + 9.5 * rng.uniform();
    }
    return QuantizerSpec(levels, std::move(stats));
}

}  // namespace

double gradcheck_max_rel_err(Model<double>& model, const TokenTensor& q, const MaskTensor& m,
                             std::optional<uint32_t> class_id, double fd_eps) {
    const size_t n = model.param_count();
    std::vector<double> grad(n, 0.0);
    model.loss_and_grad(q, m, class_id, grad, 1.0);

    // central differences at fp64 resolve |loss|*eps_machine/(2*fd_eps) ~ 1e-11
    // in absolute terms; the floor keeps near-zero gradients from turning that
    // noise into a spurious relative error
    constexpr double kFloor = 1e-6;
    double max_rel = 0.0;
    std::vector<double>& p = model.params();
    for (size_t k = 0; k < n; ++k) {
        const double keep = p[k];
        p[k] = keep + fd_eps;
        const double up = masked_ce_loss(model.forward(q, m, class_id), q, m);
        p[k] = keep - fd_eps;
        const double down = masked_ce_loss(model.forward(q, m, class_id), q, m);
        p[k] = keep;
        const double numeric = (up - down) / (2.0 * fd_eps);
        const double denom = std::max({kFloor, std::abs(numeric), std::abs(grad[k])});
        max_rel = std::max(max_rel, std::abs(numeric - grad[k]) / denom);
    }
    return max_rel;
}

SuiteResult verify_quantizer(const VerifyOptions& opt) {
    SuiteResult res{"quantizer", true, {}};
    SeededRng rng(SeededRng::mix(opt.seed, 0x9A));
    const uint32_t level_choices[] = {2, 4, 8, 16};

    size_t idempotence_fail = 0, bound_fail = 0;
    const int cases = 200;
    for (int c = 0; c < cases; ++c) {
        const Shape3 shape(1 + static_cast<uint32_t>(rng.uniform_below(6)),
                           1 + static_cast<uint32_t>(rng.uniform_below(6)),
                           1 + static_cast<uint32_t>(rng.uniform_below(16)));
        const uint32_t L = level_choices[rng.uniform_below(4)];
        const QuantizerSpec spec = random_spec(shape.d, L, rng);

        std::vector<uint16_t> ids(shape.total());
        for (auto& id : ids) id = static_cast<uint16_t>(rng.uniform_below(L));
        const TokenTensor q(shape, L, ids);
        if (quantize(dequantize(q, spec), spec).ids != q.ids) ++idempotence_fail;

        std::vector<float> values(shape.total());
        for (size_t k = 0; k < values.size(); ++k) {
            const uint32_t i = static_cast<uint32_t>(k % shape.d);
            const double lo = spec.stats.lo[i], hi = spec.stats.hi[i];
            values[k] = static_cast<float>(lo + (hi - lo) * rng.uniform());
        }
        const FeatureTensor z(shape, values);
        const FeatureTensor back = dequantize(quantize(z, spec), spec);
        for (size_t k = 0; k < values.size(); ++k) {
            const uint32_t i = static_cast<uint32_t>(k % shape.d);
            const double half_bin = (spec.stats.hi[i] - spec.stats.lo[i]) / (2.0 * L);
            if (std::abs(static_cast<double>(z.values[k]) - back.values[k]) > half_bin + 1e-6)
                ++bound_fail;
        }
    }
    res.lines.push_back("idempotence failures: " + std::to_string(idempotence_fail) + "/" +
                        std::to_string(cases));
    res.lines.push_back("half-bin bound violations: " + std::to_string(bound_fail));
    res.passed = idempotence_fail == 0 && bound_fail == 0;
    return res;
}

SuiteResult verify_schedule(const VerifyOptions& opt) {
    SuiteResult res{"schedule", true, {}};
    SeededRng rng(SeededRng::mix(opt.seed, 0x5C));
    size_t fails = 0;
    for (int c = 0; c < 100; ++c) {
        const uint64_t n = 1 + rng.uniform_below(100000);
        const uint64_t t = 1 + rng.uniform_below(n);
        const UnmaskSchedule sched = cosine_schedule(n, t);
        uint64_t sum = 0;
        bool ok = sched.unmask.size() == t;
        for (uint64_t u : sched.unmask) sum += u;
        if (sum != n) ok = false;
        if (!ok) ++fails;
    }
    res.lines.push_back("conservation failures: " + std::to_string(fails) + "/100");
    res.passed = fails == 0;
    return res;
}

SuiteResult verify_oracle(const VerifyOptions& opt) {
    SuiteResult res{"oracle", true, {}};
    const ToyJoint joint = default_toy_joint();
    const OracleConditional oracle(joint);
    const PredictFn predict = oracle.predictor();
    const uint64_t n_tokens = joint.shape().total();

    const auto counts = outcome_counts(
        joint,
        [&](uint64_t sample_seed) {
            SampleConfig cfg;
            cfg.steps = n_tokens;
            cfg.seed = sample_seed;
            return generate(predict, joint.shape(), joint.levels(), cfg, false).tokens;
        },
        opt.oracle_samples, SeededRng::mix(opt.seed, 0x0A), opt.workers);
    const double tv = tv_distance(counts, joint);
    res.lines.push_back("tv distance over " + std::to_string(opt.oracle_samples) +
                        " samples: " + fmt(tv) + " (limit 0.05)");
    res.passed = tv <= 0.05;

    const auto errs = marginal_errors(counts, joint);
    double max_err = 0.0;
    for (double e : errs) max_err = std::max(max_err, e);
    res.lines.push_back("max per-slot marginal error: " + fmt(max_err));
    return res;
}

SuiteResult verify_gradcheck(const VerifyOptions& opt) {
    SuiteResult res{"gradcheck", true, {}};
    PredictorConfig pc;
    pc.shape = Shape3(2, 2, 3);
    pc.levels = 2;
    pc.hidden = 8;
    pc.blocks = 1;
    pc.heads = 2;
    pc.mlp_ratio = 4;
    pc.class_count = 3;
    pc.mask_mode = MaskValueMode::Learned;
    CalibrationStats stats;
    stats.dims = 3;
    stats.lo = {-1.0, -1.0, -1.0};
    stats.hi = {1.0, 1.0, 1.0};
    QuantizerSpec spec(2, std::move(stats));
    Model<double> model =
        Model<double>::random_init(pc, spec, SeededRng::mix(opt.seed, 0x96AD));

    SeededRng rng(SeededRng::mix(opt.seed, 0x11));
    std::vector<uint16_t> ids(pc.shape.total());
    for (auto& id : ids) id = static_cast<uint16_t>(rng.uniform_below(2));
    const TokenTensor q(pc.shape, 2, ids);
    const MaskTensor m = sample_mask(pc.shape, 0.5, MaskStrategy::PerElement, rng);

    const double err = gradcheck_max_rel_err(model, q, m, 1u);
    res.lines.push_back("max relative gradient error: " + fmt(err) + " (limit 1e-3)");
    res.passed = err < 1e-3;
    return res;
}

SuiteResult verify_ablation(const VerifyOptions& opt) {
    SuiteResult res{"ablation", true, {}};
    const ToyJoint joint = default_toy_joint();
    AblationProtocol protocol;
    protocol.train_model = false;
    protocol.gen_samples = opt.ablation_samples;
    protocol.eval_pairs = 500;
    protocol.seed = opt.seed;
    protocol.workers = opt.workers;

    const EvalReport per_element = run_ablation(MaskStrategy::PerElement, joint, protocol);
    const EvalReport per_spatial = run_ablation(MaskStrategy::PerSpatial, joint, protocol);
    const EvalReport per_dim = run_ablation(MaskStrategy::PerDim, joint, protocol);

    res.lines.push_back("mask structure ok: per-element " + fmt(per_element.structure_ok) +
                        ", per-spatial " + fmt(per_spatial.structure_ok) + ", per-dim " +
                        fmt(per_dim.structure_ok));
    res.lines.push_back("tv: per-element " + fmt(per_element.tv) + ", per-spatial " +
                        fmt(per_spatial.tv) + ", per-dim " + fmt(per_dim.tv));
    res.passed = per_element.structure_ok == 1.0 && per_spatial.structure_ok == 1.0 &&
                 per_dim.structure_ok == 1.0 && per_dim.tv > per_element.tv;
    return res;
}

SuiteResult run_suite(const std::string& name, const VerifyOptions& opt) {
    if (name == "quantizer") return verify_quantizer(opt);
    if (name == "schedule") return verify_schedule(opt);
    if (name == "oracle") return verify_oracle(opt);
    if (name == "gradcheck") return verify_gradcheck(opt);
    if (name == "ablation") return verify_ablation(opt);
    throw ConfigError("unknown verify suite: " + name);
}

}  // namespace cubemask
