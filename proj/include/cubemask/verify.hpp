#pragma once

#include <string>

#include "cubemask/harness.hpp"

namespace cubemask {

struct SuiteResult {
    std::string name;
    bool passed = false;
    std::vector<std::string> lines;  // one observation per check
};

struct VerifyOptions {
    uint64_t seed = 7;
    uint64_t oracle_samples = 100000;
    uint64_t ablation_samples = 20000;
    unsigned workers = 0;
};

SuiteResult verify_quantizer(const VerifyOptions& opt);
SuiteResult verify_schedule(const VerifyOptions& opt);
SuiteResult verify_oracle(const VerifyOptions& opt);
SuiteResult verify_gradcheck(const VerifyOptions& opt);
SuiteResult verify_ablation(const VerifyOptions& opt);

/// Runs one named suite (quantizer | schedule | oracle | gradcheck | ablation).
SuiteResult run_suite(const std::string& name, const VerifyOptions& opt);

/// Central finite differences of masked_ce_loss(forward(...)) against the
/// analytic gradient, over every parameter of a double-precision model.
/// Returns the maximum relative error.
double gradcheck_max_rel_err(Model<double>& model, const TokenTensor& q, const MaskTensor& m,
                             std::optional<uint32_t> class_id, double fd_eps = 1e-5);

}  // namespace cubemask
