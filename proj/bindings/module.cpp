// Python bindings for the main engine operations: quantization, masking,
// schedules, toy joints with the exact oracle, generation and checkpoints.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cubemask/harness.hpp"
#include "cubemask/io.hpp"
#include "cubemask/verify.hpp"

namespace py = pybind11;
using namespace cubemask;

namespace {

Shape3 shape_from_tuple(const std::tuple<uint32_t, uint32_t, uint32_t>& t) {
    return Shape3(std::get<0>(t), std::get<1>(t), std::get<2>(t));
}

FeatureTensor features_from_array(const py::array_t<float, py::array::c_style>& arr) {
    if (arr.ndim() != 3) throw ShapeError("expected an (h, w, d) float32 array");
    const Shape3 shape(static_cast<uint32_t>(arr.shape(0)), static_cast<uint32_t>(arr.shape(1)),
                       static_cast<uint32_t>(arr.shape(2)));
    std::vector<float> values(arr.data(), arr.data() + shape.total());
    return FeatureTensor(shape, std::move(values));
}

py::array_t<float> features_to_array(const FeatureTensor& z) {
    py::array_t<float> out({py::ssize_t(z.shape.h), py::ssize_t(z.shape.w), py::ssize_t(z.shape.d)});
    std::copy(z.values.begin(), z.values.end(), out.mutable_data());
    return out;
}

TokenTensor tokens_from_array(const py::array_t<uint16_t, py::array::c_style>& arr,
                              uint32_t levels) {
    if (arr.ndim() != 3) throw ShapeError("expected an (h, w, d) uint16 array");
    const Shape3 shape(static_cast<uint32_t>(arr.shape(0)), static_cast<uint32_t>(arr.shape(1)),
                       static_cast<uint32_t>(arr.shape(2)));
    std::vector<uint16_t> ids(arr.data(), arr.data() + shape.total());
    return TokenTensor(shape, levels, std::move(ids));
}

py::array_t<uint16_t> tokens_to_array(const TokenTensor& q) {
    py::array_t<uint16_t> out(
        {py::ssize_t(q.shape.h), py::ssize_t(q.shape.w), py::ssize_t(q.shape.d)});
    std::copy(q.ids.begin(), q.ids.end(), out.mutable_data());
    return out;
}

MaskTensor mask_from_array(const py::array_t<uint8_t, py::array::c_style>& arr) {
    if (arr.ndim() != 3) throw ShapeError("expected an (h, w, d) uint8 array");
    const Shape3 shape(static_cast<uint32_t>(arr.shape(0)), static_cast<uint32_t>(arr.shape(1)),
                       static_cast<uint32_t>(arr.shape(2)));
    std::vector<uint8_t> flags(arr.data(), arr.data() + shape.total());
    return MaskTensor(shape, std::move(flags));
}

py::array_t<uint8_t> mask_to_array(const MaskTensor& m) {
    py::array_t<uint8_t> out(
        {py::ssize_t(m.shape.h), py::ssize_t(m.shape.w), py::ssize_t(m.shape.d)});
    std::copy(m.flags.begin(), m.flags.end(), out.mutable_data());
    return out;
}

}  // namespace

PYBIND11_MODULE(_cubemask, m) {
    m.doc() = "masked discrete-diffusion engine over quantized token tensors";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<ZeroSupportError>(m, "ZeroSupportError", PyExc_ValueError);

    py::class_<QuantizerSpec>(m, "QuantizerSpec")
        .def_property_readonly("levels", [](const QuantizerSpec& s) { return s.levels; })
        .def_property_readonly("lo", [](const QuantizerSpec& s) { return s.stats.lo; })
        .def_property_readonly("hi", [](const QuantizerSpec& s) { return s.stats.hi; })
        .def_static(
            "uniform",
            [](uint32_t levels, uint32_t dims, double lo, double hi) {
                CalibrationStats stats;
                stats.dims = dims;
                stats.lo.assign(dims, lo);
                stats.hi.assign(dims, hi);
                return QuantizerSpec(levels, std::move(stats));
            },
            py::arg("levels"), py::arg("dims"), py::arg("lo") = -1.0, py::arg("hi") = 1.0)
        .def_static("load", &io::load_quantizer_spec, py::arg("path"))
        .def("save", &io::save_quantizer_spec, py::arg("path"));
    // free-function form mirrors the C++ API
    m.def(
        "calibrate",
        [](const std::vector<py::array_t<float, py::array::c_style>>& corpus, double quantile,
           uint32_t levels) {
            std::vector<FeatureTensor> tensors;
            tensors.reserve(corpus.size());
            for (const auto& arr : corpus) tensors.push_back(features_from_array(arr));
            return QuantizerSpec(levels, calibrate(tensors, quantile));
        },
        py::arg("corpus"), py::arg("quantile") = 0.0005, py::arg("levels") = 8);
    m.def(
        "quantize",
        [](const py::array_t<float, py::array::c_style>& z, const QuantizerSpec& spec) {
            return tokens_to_array(quantize(features_from_array(z), spec));
        },
        py::arg("features"), py::arg("spec"));
    m.def(
        "dequantize",
        [](const py::array_t<uint16_t, py::array::c_style>& q, const QuantizerSpec& spec) {
            return features_to_array(dequantize(tokens_from_array(q, spec.levels), spec));
        },
        py::arg("tokens"), py::arg("spec"));

    m.def(
        "sample_ratio",
        [](double sigma, uint64_t seed, size_t n) {
            SeededRng rng(seed);
            const MaskRatioDist dist(sigma);
            py::array_t<double> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(n)});
            for (size_t i = 0; i < n; ++i) out.mutable_data()[i] = sample_ratio(dist, rng);
            return out;
        },
        py::arg("sigma") = 0.10, py::arg("seed") = 0, py::arg("n") = 1);
    m.def(
        "sample_mask",
        [](const std::tuple<uint32_t, uint32_t, uint32_t>& shape, double ratio,
           const std::string& strategy, uint64_t seed) {
            SeededRng rng(seed);
            return mask_to_array(sample_mask(shape_from_tuple(shape), ratio,
                                             mask_strategy_from_string(strategy), rng));
        },
        py::arg("shape"), py::arg("ratio"), py::arg("strategy") = "per-element",
        py::arg("seed") = 0);
    m.def(
        "cosine_schedule",
        [](uint64_t n_tokens, uint64_t steps) {
            const UnmaskSchedule sched = cosine_schedule(n_tokens, steps);
            py::array_t<uint64_t> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(sched.unmask.size())});
            std::copy(sched.unmask.begin(), sched.unmask.end(), out.mutable_data());
            return out;
        },
        py::arg("n_tokens"), py::arg("steps"));

    py::class_<ToyJoint>(m, "ToyJoint")
        .def_static("default_joint", &default_toy_joint)
        .def_property_readonly("outcome_count", &ToyJoint::outcome_count)
        .def_property_readonly("variables", &ToyJoint::variables)
        .def_property_readonly("levels", &ToyJoint::levels)
        .def("prob",
             [](const ToyJoint& j, const py::array_t<uint16_t, py::array::c_style>& q) {
                 return j.prob(tokens_from_array(q, j.levels()));
             })
        .def("synth_corpus",
             [](const ToyJoint& j, uint64_t n, uint64_t seed) {
                 SeededRng rng(seed);
                 const auto corpus = synth_corpus(j, n, rng);
                 py::list out;
                 for (const auto& t : corpus) out.append(tokens_to_array(t));
                 return out;
             },
             py::arg("n"), py::arg("seed") = 0)
        .def("oracle_logits",
             [](const ToyJoint& j, const py::array_t<uint16_t, py::array::c_style>& q,
                const py::array_t<uint8_t, py::array::c_style>& mask) {
                 const LogitsTensor logits =
                     oracle_forward(tokens_from_array(q, j.levels()), mask_from_array(mask), j);
                 py::array_t<double> out({py::ssize_t(logits.shape.h), py::ssize_t(logits.shape.w),
                                          py::ssize_t(logits.shape.d),
                                          py::ssize_t(logits.levels)});
                 std::copy(logits.scores.begin(), logits.scores.end(), out.mutable_data());
                 return out;
             },
             py::arg("tokens"), py::arg("mask"))
        .def("generate_oracle",
             [](const ToyJoint& j, uint64_t steps, uint64_t n, uint64_t seed) {
                 const OracleConditional oracle(j);
                 const PredictFn predict = oracle.predictor();
                 py::array_t<uint16_t> out({py::ssize_t(n), py::ssize_t(j.shape().h),
                                            py::ssize_t(j.shape().w), py::ssize_t(j.shape().d)});
                 for (uint64_t i = 0; i < n; ++i) {
                     SampleConfig cfg;
                     cfg.steps = steps;
                     cfg.seed = SeededRng::mix(seed, i);
                     const auto res = generate(predict, j.shape(), j.levels(), cfg, false);
                     std::copy(res.tokens.ids.begin(), res.tokens.ids.end(),
                               out.mutable_data() + i * j.variables());
                 }
                 return out;
             },
             py::arg("steps"), py::arg("n"), py::arg("seed") = 0)
        .def("tv_distance",
             [](const ToyJoint& j, const py::array_t<uint16_t, py::array::c_style>& samples) {
                 if (samples.ndim() != 4) throw ShapeError("expected an (n, h, w, d) array");
                 std::vector<uint64_t> counts(j.outcome_count(), 0);
                 const size_t n_vars = j.variables();
                 for (py::ssize_t i = 0; i < samples.shape(0); ++i) {
                     std::vector<uint16_t> ids(samples.data() + i * n_vars,
                                               samples.data() + (i + 1) * n_vars);
                     ++counts[j.encode(TokenTensor(j.shape(), j.levels(), std::move(ids)))];
                 }
                 return tv_distance(counts, j);
             },
             py::arg("samples"));

    m.def(
        "generate_from_checkpoint",
        [](const std::filesystem::path& path, uint64_t steps, uint64_t count, uint64_t seed,
           std::optional<uint32_t> class_id, double guidance, double temperature) {
            const auto state = load_checkpoint<float>(path);
            const Model<float> model = state.ema_model();
            const Shape3& shape = model.config().shape;
            py::array_t<uint16_t> out({py::ssize_t(count), py::ssize_t(shape.h),
                                       py::ssize_t(shape.w), py::ssize_t(shape.d)});
            for (uint64_t i = 0; i < count; ++i) {
                SampleConfig cfg;
                cfg.steps = steps;
                cfg.seed = SeededRng::mix(seed, i);
                cfg.class_id = class_id;
                cfg.guidance = guidance;
                cfg.temperature = temperature;
                const auto res = generate(model, cfg);
                std::copy(res.tokens.ids.begin(), res.tokens.ids.end(),
                          out.mutable_data() + i * shape.total());
            }
            return out;
        },
        py::arg("checkpoint"), py::arg("steps"), py::arg("count") = 1, py::arg("seed") = 0,
        py::arg("class_id") = std::nullopt, py::arg("guidance") = 1.0,
        py::arg("temperature") = 1.0);

    m.def("masked_ce_loss",
          [](const py::array_t<double, py::array::c_style>& logits,
             const py::array_t<uint16_t, py::array::c_style>& targets,
             const py::array_t<uint8_t, py::array::c_style>& mask) {
              if (logits.ndim() != 4) throw ShapeError("expected an (h, w, d, L) logits array");
              const Shape3 shape(static_cast<uint32_t>(logits.shape(0)),
                                 static_cast<uint32_t>(logits.shape(1)),
                                 static_cast<uint32_t>(logits.shape(2)));
              const auto levels = static_cast<uint32_t>(logits.shape(3));
              LogitsTensor lt(shape, levels);
              std::copy(logits.data(), logits.data() + lt.scores.size(), lt.scores.begin());
              return masked_ce_loss(lt, tokens_from_array(targets, levels),
                                    mask_from_array(mask));
          },
          py::arg("logits"), py::arg("targets"), py::arg("mask"));

    m.def("read_tokens", [](const std::filesystem::path& p) {
        const TokenTensor q = io::read_tokens(p);
        return py::make_tuple(tokens_to_array(q), q.levels);
    });
    m.def("read_features", [](const std::filesystem::path& p) {
        const auto corpus = io::read_features(p);
        py::list out;
        for (const auto& z : corpus) out.append(features_to_array(z));
        return out;
    });
}
