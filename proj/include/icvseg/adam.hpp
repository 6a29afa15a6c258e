#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "icvseg/tensor.hpp"

namespace icvseg {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// First/second moment accumulators, one pair per trainable tensor.
template <typename T>
struct AdamState {
    AdamConfig config;
    std::uint64_t step_count = 0;
    std::vector<BasicTensor<T>> m;
    std::vector<BasicTensor<T>> v;

    /// Zeroed accumulators shaped like `params`.
    static AdamState zeros_like(std::span<BasicTensor<T>* const> params, AdamConfig config = {});
};

struct AdamStepResult {
    bool applied = false;
    std::string rejection;  // set when a non-finite gradient blocked the update
};

/// Bias-corrected Adam update. A step with any non-finite gradient leaves
/// parameters and state untouched and reports why.
template <typename T>
AdamStepResult adam_step(std::span<BasicTensor<T>* const> params, std::span<const BasicTensor<T>> grads,
                         AdamState<T>& state);

}  // namespace icvseg
