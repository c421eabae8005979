// cubemask: discrete-diffusion engine over quantized token tensors.
// Subcommands: calibrate, quantize, dequantize, train, sample, verify, ablate.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "cubemask/harness.hpp"
#include "cubemask/io.hpp"
#include "cubemask/verify.hpp"

namespace fs = std::filesystem;
using namespace cubemask;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitVerify = 3;

fs::path resolve_path(const std::string& p) {
    fs::path path(p);
    if (path.is_relative()) {
        if (const char* base = std::getenv("CUBEMASK_DATA_DIR")) return fs::path(base) / path;
    }
    return path;
}

// ---------------------------------------------------------------------------
// key=value config files; flags win over file values
// ---------------------------------------------------------------------------

std::map<std::string, std::string> read_kv_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path.string());
    std::map<std::string, std::string> kv;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto strip = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return std::string();
            const auto e = s.find_last_not_of(" \t\r");
            return s.substr(b, e - b + 1);
        };
        if (strip(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path.string() + ":" + std::to_string(lineno) +
                              ": expected key = value");
        const std::string key = strip(line.substr(0, eq));
        const std::string value = strip(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(path.string() + ": empty key");
        if (!kv.emplace(key, value).second)
            throw ConfigError(path.string() + ": duplicate key " + key);
    }
    return kv;
}

struct TrainSettings {
    std::string data = "toy";          // toy | features | tokens
    std::string features_path;
    std::string tokens_dir;
    std::string spec_path;
    std::string labels_path;
    std::string out_dir = "run";
    std::string resume;
    bool class_conditional = false;
    uint64_t toy_samples = 10000;
    uint64_t checkpoint_every = 0;
    unsigned workers = 0;

    uint32_t hidden = 64;
    uint32_t blocks = 2;
    uint32_t heads = 4;
    uint32_t mlp_ratio = 4;
    std::string mask_mode = "learned";
    double fixed_mask_value = 0.0;
    uint32_t class_count = 0;

    double lr = 5e-5;
    double weight_decay = 0.05;
    double clip_norm = 3.0;
    uint64_t warmup_steps = 100;
    uint64_t total_steps = 1000;
    uint64_t batch_size = 64;
    double ema_momentum = 0.9999;
    double sigma = 0.10;
    double cond_dropout = 0.1;
    uint64_t seed = 1;
    std::string strategy = "per-element";
};

// every recognized train key, its target and a parser
void apply_train_kv(TrainSettings& s, const std::map<std::string, std::string>& kv,
                    const std::set<std::string>& flag_overrides) {
    auto parse_u64 = [](const std::string& k, const std::string& v) -> uint64_t {
        try {
            size_t used = 0;
            const uint64_t out = std::stoull(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return out;
        } catch (const std::exception&) {
            throw ConfigError("config key " + k + ": not an unsigned integer: " + v);
        }
    };
    auto parse_f64 = [](const std::string& k, const std::string& v) -> double {
        try {
            size_t used = 0;
            const double out = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return out;
        } catch (const std::exception&) {
            throw ConfigError("config key " + k + ": not a number: " + v);
        }
    };
    auto parse_bool = [](const std::string& k, const std::string& v) -> bool {
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("config key " + k + ": not a boolean: " + v);
    };

    for (const auto& [key, value] : kv) {
        if (flag_overrides.count(key)) continue;  // flags win
        if (key == "data") s.data = value;
        else if (key == "features") s.features_path = value;
        else if (key == "tokens") s.tokens_dir = value;
        else if (key == "spec") s.spec_path = value;
        else if (key == "labels") s.labels_path = value;
        else if (key == "out") s.out_dir = value;
        else if (key == "resume") s.resume = value;
        else if (key == "class_conditional") s.class_conditional = parse_bool(key, value);
        else if (key == "toy_samples") s.toy_samples = parse_u64(key, value);
        else if (key == "checkpoint_every") s.checkpoint_every = parse_u64(key, value);
        else if (key == "workers") s.workers = static_cast<unsigned>(parse_u64(key, value));
        else if (key == "hidden") s.hidden = static_cast<uint32_t>(parse_u64(key, value));
        else if (key == "blocks") s.blocks = static_cast<uint32_t>(parse_u64(key, value));
        else if (key == "heads") s.heads = static_cast<uint32_t>(parse_u64(key, value));
        else if (key == "mlp_ratio") s.mlp_ratio = static_cast<uint32_t>(parse_u64(key, value));
        else if (key == "mask_mode") s.mask_mode = value;
        else if (key == "fixed_mask_value") s.fixed_mask_value = parse_f64(key, value);
        else if (key == "class_count") s.class_count = static_cast<uint32_t>(parse_u64(key, value));
        else if (key == "lr") s.lr = parse_f64(key, value);
        else if (key == "weight_decay") s.weight_decay = parse_f64(key, value);
        else if (key == "clip_norm") s.clip_norm = parse_f64(key, value);
        else if (key == "warmup_steps") s.warmup_steps = parse_u64(key, value);
        else if (key == "total_steps") s.total_steps = parse_u64(key, value);
        else if (key == "batch_size") s.batch_size = parse_u64(key, value);
        else if (key == "ema_momentum") s.ema_momentum = parse_f64(key, value);
        else if (key == "sigma") s.sigma = parse_f64(key, value);
        else if (key == "cond_dropout") s.cond_dropout = parse_f64(key, value);
        else if (key == "seed") s.seed = parse_u64(key, value);
        else if (key == "strategy") s.strategy = value;
        else throw ConfigError("unknown config key: " + key);
    }
}

void dump_resolved_config(const fs::path& path, const TrainSettings& s) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write resolved config: " + path.string());
    f << "batch_size = " << s.batch_size << "\n"
      << "blocks = " << s.blocks << "\n"
      << "checkpoint_every = " << s.checkpoint_every << "\n"
      << "class_conditional = " << (s.class_conditional ? "true" : "false") << "\n"
      << "class_count = " << s.class_count << "\n"
      << "clip_norm = " << s.clip_norm << "\n"
      << "cond_dropout = " << s.cond_dropout << "\n"
      << "data = " << s.data << "\n"
      << "ema_momentum = " << s.ema_momentum << "\n"
      << "features = " << s.features_path << "\n"
      << "fixed_mask_value = " << s.fixed_mask_value << "\n"
      << "heads = " << s.heads << "\n"
      << "hidden = " << s.hidden << "\n"
      << "labels = " << s.labels_path << "\n"
      << "lr = " << s.lr << "\n"
      << "mask_mode = " << s.mask_mode << "\n"
      << "mlp_ratio = " << s.mlp_ratio << "\n"
      << "out = " << s.out_dir << "\n"
      << "resume = " << s.resume << "\n"
      << "seed = " << s.seed << "\n"
      << "sigma = " << s.sigma << "\n"
      << "spec = " << s.spec_path << "\n"
      << "strategy = " << s.strategy << "\n"
      << "tokens = " << s.tokens_dir << "\n"
      << "total_steps = " << s.total_steps << "\n"
      << "toy_samples = " << s.toy_samples << "\n"
      << "warmup_steps = " << s.warmup_steps << "\n"
      << "weight_decay = " << s.weight_decay << "\n"
      << "workers = " << s.workers << "\n";
}

std::vector<uint32_t> read_labels(const fs::path& path, size_t expected) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open labels file: " + path.string());
    std::vector<uint32_t> labels;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        labels.push_back(static_cast<uint32_t>(std::stoul(line)));
    }
    if (labels.size() != expected)
        throw DataError("labels file has " + std::to_string(labels.size()) + " entries, corpus has " +
                        std::to_string(expected));
    return labels;
}

int cmd_train(const TrainSettings& settings_in) {
    TrainSettings s = settings_in;
    const fs::path out_dir = resolve_path(s.out_dir);
    fs::create_directories(out_dir);

    // resume first: the checkpoint's config (seed included) governs the run
    std::unique_ptr<TrainState<float>> state;
    if (!s.resume.empty()) {
        state = std::make_unique<TrainState<float>>(
            load_checkpoint<float>(resolve_path(s.resume)));
        s.seed = state->config().seed;
        std::cout << "resumed at step " << state->step() << " of "
                  << state->config().total_steps << "\n";
    }

    // assemble the token corpus
    std::vector<TokenTensor> corpus;
    std::vector<uint32_t> labels;
    QuantizerSpec spec;
    if (s.data == "toy") {
        const MixtureJointSpec mix = default_mixture();
        const ToyJoint joint = ToyJoint::from_mixture(mix);
        SeededRng rng(SeededRng::mix(s.seed, 0xDA7A));
        if (s.class_conditional) {
            corpus.reserve(s.toy_samples);
            labels.reserve(s.toy_samples);
            for (uint64_t i = 0; i < s.toy_samples; ++i) {
                auto [tensor, label] = sample_labeled(mix, rng);
                corpus.push_back(std::move(tensor));
                labels.push_back(label);
            }
            if (s.class_count == 0) s.class_count = static_cast<uint32_t>(mix.templates.size());
        } else {
            corpus = synth_corpus(joint, s.toy_samples, rng);
        }
        CalibrationStats stats;
        stats.dims = joint.shape().d;
        stats.lo.assign(stats.dims, -1.0);
        stats.hi.assign(stats.dims, 1.0);
        spec = QuantizerSpec(joint.levels(), std::move(stats));
    } else if (s.data == "features") {
        if (s.features_path.empty() || s.spec_path.empty())
            throw ConfigError("data=features requires features= and spec=");
        spec = io::load_quantizer_spec(resolve_path(s.spec_path));
        const auto features = io::read_features(resolve_path(s.features_path));
        corpus.reserve(features.size());
        for (const auto& z : features) corpus.push_back(quantize(z, spec));
        if (!s.labels_path.empty()) labels = read_labels(resolve_path(s.labels_path), corpus.size());
    } else if (s.data == "tokens") {
        if (s.tokens_dir.empty() || s.spec_path.empty())
            throw ConfigError("data=tokens requires tokens= and spec=");
        spec = io::load_quantizer_spec(resolve_path(s.spec_path));
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(resolve_path(s.tokens_dir)))
            if (entry.path().extension() == ".cubq") files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw DataError("no .cubq files in " + s.tokens_dir);
        for (const auto& f : files) corpus.push_back(io::read_tokens(f));
        if (!s.labels_path.empty()) labels = read_labels(resolve_path(s.labels_path), corpus.size());
    } else {
        throw ConfigError("data must be toy, features or tokens");
    }
    for (size_t i = 1; i < corpus.size(); ++i)
        if (corpus[i].shape != corpus[0].shape || corpus[i].levels != corpus[0].levels)
            throw DataError("corpus tensors disagree on shape or levels");
    if (!labels.empty() && s.class_count == 0) {
        uint32_t mx = 0;
        for (uint32_t l : labels) mx = std::max(mx, l);
        s.class_count = mx + 1;
    }

    // fresh model + train state unless a checkpoint was resumed above
    if (!state) {
        PredictorConfig pc;
        pc.shape = corpus[0].shape;
        pc.levels = corpus[0].levels;
        pc.hidden = s.hidden;
        pc.blocks = s.blocks;
        pc.heads = s.heads;
        pc.mlp_ratio = s.mlp_ratio;
        pc.class_count = labels.empty() ? 0 : s.class_count;
        pc.mask_mode = mask_value_mode_from_string(s.mask_mode);
        pc.fixed_mask_value = s.fixed_mask_value;

        TrainConfig tc;
        tc.lr = s.lr;
        tc.weight_decay = s.weight_decay;
        tc.clip_norm = s.clip_norm;
        tc.warmup_steps = s.warmup_steps;
        tc.total_steps = s.total_steps;
        tc.batch_size = s.batch_size;
        tc.ema_momentum = s.ema_momentum;
        tc.sigma = s.sigma;
        tc.cond_dropout = s.cond_dropout;
        tc.seed = s.seed;
        tc.strategy = mask_strategy_from_string(s.strategy);

        Model<float> model =
            Model<float>::random_init(pc, spec, SeededRng::mix(s.seed, 0x1217));
        state = std::make_unique<TrainState<float>>(std::move(model), tc);
    }

    dump_resolved_config(out_dir / "resolved_config.txt", s);

    const TrainConfig& tc = state->config();
    std::ofstream loss_log(out_dir / "loss.csv", state->step() == 0 ? std::ios::trunc : std::ios::app);
    if (state->step() == 0) loss_log << "step,lr,loss\n";

    std::vector<TrainSample> batch(tc.batch_size);
    while (state->step() < tc.total_steps) {
        const uint64_t step = state->step();
        const auto idx = batch_indices(tc.seed, step, corpus.size(), batch.size());
        for (size_t k = 0; k < batch.size(); ++k) {
            batch[k].tokens = &corpus[idx[k]];
            batch[k].class_id = labels.empty()
                                    ? std::nullopt
                                    : std::optional<uint32_t>(labels[idx[k]]);
        }
        double loss;
        try {
            loss = state->train_step(batch, s.workers);
        } catch (const DataError& e) {
            std::cerr << "aborting: " << e.what() << " (last checkpoint kept)\n";
            throw;
        }
        loss_log << step << "," << lr_at(step, tc) << "," << loss << "\n";
        if ((step + 1) % 100 == 0 || step + 1 == tc.total_steps)
            std::cout << "step " << (step + 1) << "/" << tc.total_steps << " loss " << loss
                      << "\n";
        if (s.checkpoint_every > 0 && state->step() % s.checkpoint_every == 0 &&
            state->step() < tc.total_steps) {
            save_checkpoint(out_dir / ("checkpoint_step" + std::to_string(state->step()) +
                                       ".cbdk"),
                            *state);
        }
    }
    save_checkpoint(out_dir / "checkpoint_final.cbdk", *state);
    std::cout << "final checkpoint: " << (out_dir / "checkpoint_final.cbdk").string() << "\n";
    return kExitOk;
}

int cmd_sample(const std::string& checkpoint, uint64_t steps, uint64_t count,
               int64_t class_id, double guidance, double temperature, uint64_t seed,
               const std::string& out, bool snapshots, bool trajectory) {
    const auto state = load_checkpoint<float>(resolve_path(checkpoint));
    const Model<float> model = state.ema_model();
    const fs::path out_dir = resolve_path(out);
    fs::create_directories(out_dir);

    for (uint64_t i = 0; i < count; ++i) {
        SampleConfig cfg;
        cfg.steps = steps;
        cfg.temperature = temperature;
        cfg.guidance = guidance;
        if (class_id >= 0) cfg.class_id = static_cast<uint32_t>(class_id);
        cfg.seed = SeededRng::mix(seed, i);
        cfg.record_snapshots = snapshots;
        const GenerateResult res = generate(model, cfg);

        const std::string stem = "sample_" + std::to_string(seed) + "_" + std::to_string(i);
        io::write_tokens(out_dir / (stem + ".cubq"), res.tokens);
        const FeatureTensor features = decode_features(res.tokens, model.spec());
        io::write_features(out_dir / (stem + ".cubf"), std::span<const FeatureTensor>(&features, 1));
        if (trajectory) {
            std::ofstream tf(out_dir / (stem + "_trajectory.csv"));
            tf << "step,masked_count,unmasked_count\n";
            for (const auto& st : res.trajectory.steps)
                tf << st.step << "," << st.masked_before << "," << st.unmasked.size() << "\n";
        }
    }
    std::cout << "wrote " << count << " samples to " << out_dir.string() << "\n";
    return kExitOk;
}

int cmd_verify(const std::string& suite, const VerifyOptions& opt) {
    std::vector<std::string> names;
    if (suite == "all")
        names = {"quantizer", "schedule", "oracle", "gradcheck", "ablation"};
    else
        names = {suite};
    bool all_ok = true;
    for (const auto& name : names) {
        const SuiteResult res = run_suite(name, opt);
        std::cout << (res.passed ? "[PASS] " : "[FAIL] ") << res.name << "\n";
        for (const auto& line : res.lines) std::cout << "       " << line << "\n";
        all_ok = all_ok && res.passed;
    }
    return all_ok ? kExitOk : kExitVerify;
}

int cmd_ablate(const std::string& strategy, bool train_model, uint64_t samples,
               uint64_t eval_pairs, uint64_t steps, uint64_t seed, unsigned workers,
               const std::string& out_csv, const std::string& out_jsonl) {
    const ToyJoint joint = default_toy_joint();
    AblationProtocol protocol;
    protocol.train_model = train_model;
    protocol.gen_samples = samples;
    protocol.eval_pairs = eval_pairs;
    protocol.gen_steps = steps;
    protocol.seed = seed;
    protocol.workers = workers;
    if (train_model) {
        protocol.train.lr = 5e-4;
        protocol.train.warmup_steps = 100;
        protocol.train.total_steps = 1500;
        protocol.train.batch_size = 128;
        protocol.train.ema_momentum = 0.999;
        protocol.train.seed = seed;
    }

    const EvalReport report = run_ablation(mask_strategy_from_string(strategy), joint, protocol);
    std::cout << report.label << ": tv=" << report.tv << " nll=" << report.nll
              << " oracle_nll=" << report.oracle_nll << " accuracy=" << report.accuracy
              << " structure_ok=" << report.structure_ok << "\n";
    if (!out_csv.empty()) report.write_csv(resolve_path(out_csv));
    if (!out_jsonl.empty()) report.append_jsonl(resolve_path(out_jsonl));
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"masked discrete-diffusion engine over token tensors"};
    app.require_subcommand(1);

    // calibrate ---------------------------------------------------------------
    auto* calibrate_cmd = app.add_subcommand("calibrate", "estimate per-dimension ranges");
    std::string cal_features, cal_out;
    double cal_quantile = 0.0005;
    uint32_t cal_levels = 8;
    calibrate_cmd->add_option("--features", cal_features, "input .cubf corpus")->required();
    calibrate_cmd->add_option("--quantile", cal_quantile, "per-tail calibration quantile");
    calibrate_cmd->add_option("--levels", cal_levels, "quantization levels L");
    calibrate_cmd->add_option("--out", cal_out, "output spec JSON")->required();

    // quantize ----------------------------------------------------------------
    auto* quantize_cmd = app.add_subcommand("quantize", "features -> token files");
    std::string qz_features, qz_spec, qz_out;
    quantize_cmd->add_option("--features", qz_features, "input .cubf corpus")->required();
    quantize_cmd->add_option("--spec", qz_spec, "quantizer spec JSON")->required();
    quantize_cmd->add_option("--out", qz_out, "output directory for .cubq files")->required();

    // dequantize ----------------------------------------------------------------
    auto* dequantize_cmd = app.add_subcommand("dequantize", "token file -> features");
    std::string dq_tokens, dq_spec, dq_out;
    dequantize_cmd->add_option("--tokens", dq_tokens, "input .cubq file")->required();
    dequantize_cmd->add_option("--spec", dq_spec, "quantizer spec JSON")->required();
    dequantize_cmd->add_option("--out", dq_out, "output .cubf file")->required();

    // train ---------------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "masked cross-entropy training");
    std::string train_config;
    TrainSettings ts;
    train_cmd->add_option("--config", train_config, "key=value config file");
    train_cmd->add_option("--data", ts.data, "toy | features | tokens");
    train_cmd->add_option("--features", ts.features_path, "input .cubf corpus");
    train_cmd->add_option("--tokens", ts.tokens_dir, "directory of .cubq files");
    train_cmd->add_option("--spec", ts.spec_path, "quantizer spec JSON");
    train_cmd->add_option("--labels", ts.labels_path, "class labels, one integer per line");
    train_cmd->add_option("--out", ts.out_dir, "output directory");
    train_cmd->add_option("--resume", ts.resume, "checkpoint to resume from");
    train_cmd->add_flag("--class-conditional", ts.class_conditional,
                        "toy data: use template ids as class labels");
    train_cmd->add_option("--toy-samples", ts.toy_samples, "toy corpus size");
    train_cmd->add_option("--checkpoint-every", ts.checkpoint_every, "periodic checkpoint stride");
    train_cmd->add_option("--workers", ts.workers, "worker threads (0 = auto)");
    train_cmd->add_option("--hidden", ts.hidden, "hidden width");
    train_cmd->add_option("--blocks", ts.blocks, "transformer blocks");
    train_cmd->add_option("--heads", ts.heads, "attention heads");
    train_cmd->add_option("--mlp-ratio", ts.mlp_ratio, "MLP expansion ratio");
    train_cmd->add_option("--mask-mode", ts.mask_mode, "learned | fixed | random-id");
    train_cmd->add_option("--fixed-mask-value", ts.fixed_mask_value, "constant for fixed mode");
    train_cmd->add_option("--class-count", ts.class_count, "number of classes");
    train_cmd->add_option("--lr", ts.lr, "peak learning rate");
    train_cmd->add_option("--weight-decay", ts.weight_decay, "decoupled weight decay");
    train_cmd->add_option("--clip-norm", ts.clip_norm, "global gradient norm clip");
    train_cmd->add_option("--warmup-steps", ts.warmup_steps, "linear warmup steps");
    train_cmd->add_option("--total-steps", ts.total_steps, "total optimization steps");
    train_cmd->add_option("--batch-size", ts.batch_size, "samples per step");
    train_cmd->add_option("--ema-momentum", ts.ema_momentum, "EMA momentum");
    train_cmd->add_option("--sigma", ts.sigma, "mask-ratio spread");
    train_cmd->add_option("--cond-dropout", ts.cond_dropout, "null-class dropout probability");
    train_cmd->add_option("--seed", ts.seed, "master seed");
    train_cmd->add_option("--strategy", ts.strategy, "per-element | per-spatial | per-dim");

    // sample --------------------------------------------------------------------
    auto* sample_cmd = app.add_subcommand("sample", "iterative parallel generation");
    std::string sm_checkpoint, sm_out = "samples";
    uint64_t sm_steps = 256, sm_count = 1, sm_seed = 1;
    int64_t sm_class = -1;
    double sm_guidance = 1.0, sm_temperature = 1.0;
    bool sm_snapshots = false, sm_trajectory = false;
    sample_cmd->add_option("--checkpoint", sm_checkpoint, "trained checkpoint")->required();
    sample_cmd->add_option("--steps", sm_steps, "decoding steps T");
    sample_cmd->add_option("--count", sm_count, "number of samples");
    sample_cmd->add_option("--class", sm_class, "class id (-1 = unconditional)");
    sample_cmd->add_option("--guidance", sm_guidance, "guidance scale");
    sample_cmd->add_option("--temperature", sm_temperature, "sampling temperature");
    sample_cmd->add_option("--seed", sm_seed, "sampling seed");
    sample_cmd->add_option("--out", sm_out, "output directory");
    sample_cmd->add_flag("--snapshots", sm_snapshots, "record per-step snapshots");
    sample_cmd->add_flag("--trajectory", sm_trajectory, "write per-step trajectory CSV");

    // verify ---------------------------------------------------------------------
    auto* verify_cmd = app.add_subcommand("verify", "module acceptance suites");
    std::string vf_suite = "all";
    VerifyOptions vf_opt;
    verify_cmd->add_option("--suite", vf_suite,
                           "quantizer | schedule | oracle | gradcheck | ablation | all");
    verify_cmd->add_option("--oracle-samples", vf_opt.oracle_samples, "samples for the TV check");
    verify_cmd->add_option("--ablation-samples", vf_opt.ablation_samples,
                           "samples per ablation run");
    verify_cmd->add_option("--seed", vf_opt.seed, "suite seed");
    verify_cmd->add_option("--workers", vf_opt.workers, "worker threads (0 = auto)");

    // ablate ---------------------------------------------------------------------
    auto* ablate_cmd = app.add_subcommand("ablate", "masking-granularity study");
    std::string ab_strategy = "per-element", ab_csv, ab_jsonl;
    bool ab_train = false;
    uint64_t ab_samples = 20000, ab_eval_pairs = 1000, ab_steps = 0, ab_seed = 1;
    unsigned ab_workers = 0;
    ablate_cmd->add_option("--strategy", ab_strategy, "per-element | per-spatial | per-dim");
    ablate_cmd->add_flag("--train", ab_train, "train a small predictor instead of the oracle");
    ablate_cmd->add_option("--samples", ab_samples, "generated samples for TV");
    ablate_cmd->add_option("--eval-pairs", ab_eval_pairs, "held-out NLL pairs");
    ablate_cmd->add_option("--steps", ab_steps, "decoding steps (0 = one unit per step)");
    ablate_cmd->add_option("--seed", ab_seed, "study seed");
    ablate_cmd->add_option("--workers", ab_workers, "worker threads (0 = auto)");
    ablate_cmd->add_option("--out-csv", ab_csv, "write the report as CSV");
    ablate_cmd->add_option("--out-jsonl", ab_jsonl, "append the report as JSONL");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (calibrate_cmd->parsed()) {
            const auto corpus = io::read_features(resolve_path(cal_features));
            const CalibrationStats stats = calibrate(corpus, cal_quantile);
            const QuantizerSpec spec(cal_levels, stats);
            io::save_quantizer_spec(resolve_path(cal_out), spec);
            std::cout << "calibrated " << stats.dims << " dims over " << stats.sample_count
                      << " positions; wrote " << cal_out << "\n";
            return kExitOk;
        }
        if (quantize_cmd->parsed()) {
            const auto spec = io::load_quantizer_spec(resolve_path(qz_spec));
            const auto corpus = io::read_features(resolve_path(qz_features));
            const fs::path out_dir = resolve_path(qz_out);
            fs::create_directories(out_dir);
            char name[32];
            for (size_t i = 0; i < corpus.size(); ++i) {
                std::snprintf(name, sizeof(name), "tokens_%05zu.cubq", i);
                io::write_tokens(out_dir / name, quantize(corpus[i], spec));
            }
            std::cout << "wrote " << corpus.size() << " token files to " << out_dir.string()
                      << "\n";
            return kExitOk;
        }
        if (dequantize_cmd->parsed()) {
            const auto spec = io::load_quantizer_spec(resolve_path(dq_spec));
            const TokenTensor q = io::read_tokens(resolve_path(dq_tokens));
            const FeatureTensor z = dequantize(q, spec);
            io::write_features(resolve_path(dq_out), std::span<const FeatureTensor>(&z, 1));
            std::cout << "wrote " << dq_out << "\n";
            return kExitOk;
        }
        if (train_cmd->parsed()) {
            std::set<std::string> overrides;
            const std::map<std::string, const char*> flag_to_key = {
                {"--data", "data"}, {"--features", "features"}, {"--tokens", "tokens"},
                {"--spec", "spec"}, {"--labels", "labels"}, {"--out", "out"},
                {"--resume", "resume"}, {"--class-conditional", "class_conditional"},
                {"--toy-samples", "toy_samples"}, {"--checkpoint-every", "checkpoint_every"},
                {"--workers", "workers"}, {"--hidden", "hidden"}, {"--blocks", "blocks"},
                {"--heads", "heads"}, {"--mlp-ratio", "mlp_ratio"}, {"--mask-mode", "mask_mode"},
                {"--fixed-mask-value", "fixed_mask_value"}, {"--class-count", "class_count"},
                {"--lr", "lr"}, {"--weight-decay", "weight_decay"}, {"--clip-norm", "clip_norm"},
                {"--warmup-steps", "warmup_steps"}, {"--total-steps", "total_steps"},
                {"--batch-size", "batch_size"}, {"--ema-momentum", "ema_momentum"},
                {"--sigma", "sigma"}, {"--cond-dropout", "cond_dropout"}, {"--seed", "seed"},
                {"--strategy", "strategy"},
            };
            for (const auto& [flag, key] : flag_to_key)
                if (train_cmd->count(flag) > 0) overrides.insert(key);
            if (!train_config.empty())
                apply_train_kv(ts, read_kv_file(resolve_path(train_config)), overrides);
            return cmd_train(ts);
        }
        if (sample_cmd->parsed())
            return cmd_sample(sm_checkpoint, sm_steps, sm_count, sm_class, sm_guidance,
                              sm_temperature, sm_seed, sm_out, sm_snapshots, sm_trajectory);
        if (verify_cmd->parsed()) return cmd_verify(vf_suite, vf_opt);
        if (ablate_cmd->parsed())
            return cmd_ablate(ab_strategy, ab_train, ab_samples, ab_eval_pairs, ab_steps,
                              ab_seed, ab_workers, ab_csv, ab_jsonl);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}
