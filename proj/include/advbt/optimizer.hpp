#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "advbt/tensor.hpp"

namespace advbt {

struct ParamRef {
    std::string name;
    Tensor* tensor = nullptr;
};

// AdamW moments, one accumulator pair per parameter in registration order.
struct OptimizerState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
};

// One AdamW update:
//   w <- w * (1 - lr * weight_decay)
//   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
//   w <- w - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
// Parameters whose grad is empty are skipped. A non-finite gradient aborts
// the whole step before any parameter changes.
void optimizer_step(std::span<const ParamRef> params, OptimizerState& state, double lr,
                    double weight_decay);

}  // namespace advbt
