#include "advbt/optimizer.hpp"

#include <cmath>

namespace advbt {

void optimizer_step(std::span<const ParamRef> params, OptimizerState& state, double lr,
                    double weight_decay) {
    if (state.first_moment.empty()) {
        state.first_moment.resize(params.size());
        state.second_moment.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.first_moment[i].assign(params[i].tensor->numel(), 0.0);
            state.second_moment[i].assign(params[i].tensor->numel(), 0.0);
        }
    }
    if (state.first_moment.size() != params.size()) {
        throw Error("shape-mismatch", "optimizer state tracks " +
                                          std::to_string(state.first_moment.size()) +
                                          " parameters, got " + std::to_string(params.size()));
    }
    for (const auto& p : params) {
        for (double g : p.tensor->grad) {
            if (!std::isfinite(g)) {
                throw Error("non-finite-gradient", "non-finite gradient in parameter " + p.name);
            }
        }
    }

    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bias1 = 1.0 - std::pow(state.beta1, t);
    const double bias2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& w = *params[i].tensor;
        if (w.grad.empty()) continue;
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        if (m.size() != w.numel()) {
            throw Error("shape-mismatch", "optimizer moments do not match " + params[i].name);
        }
        const double decay = 1.0 - lr * weight_decay;
        for (std::size_t j = 0; j < w.numel(); ++j) {
            const double g = w.grad[j];
            w.data[j] *= decay;
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            const double mhat = m[j] / bias1;
            const double vhat = v[j] / bias2;
            w.data[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

}  // namespace advbt
