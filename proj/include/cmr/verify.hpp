#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cmr/tensor.hpp"

namespace cmr {

struct CheckResult {
    std::string name;
    bool passed = false;
    double max_err = 0.0;
    std::string detail;
};

/// Central finite differences (step h) on randomly sampled entries of each
/// parameter vs the analytic gradients of loss_fn. Returns the worst
/// relative error, |analytic - fd| / max(|analytic|, |fd|, 0.1).
/// loss_fn must rebuild its graph on every call.
double max_grad_error(const std::function<Tensor()>& loss_fn,
                      std::vector<Tensor> params, Rng& rng,
                      std::size_t samples_per_param, double h = 1e-5);

CheckResult check_gradcheck(std::size_t num_seeds = 20);
CheckResult check_linear_attention_equivalence(std::size_t num_cases = 50);
CheckResult check_alg1_oracle();
CheckResult check_alg2_oracle();
CheckResult check_permutation_invariance();
CheckResult check_empty_memory();

/// Runs all checks (or the named subset). Check names: gradcheck, alg1,
/// alg2, linear_attention, permutation, empty_memory.
std::vector<CheckResult> run_verification(
    const std::vector<std::string>& only = {});

}  // namespace cmr
