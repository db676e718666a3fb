#include "advbt/perturbation.hpp"

#include <cmath>

#include "advbt/rng.hpp"

namespace advbt {

void NoiseSpec::validate(std::size_t num_layers) const {
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw Error("invalid-config", "noise sigma must be finite and >= 0");
    if (!std::isfinite(mu)) throw Error("invalid-config", "noise mu must be finite");
    if (layer > num_layers) {
        throw Error("invalid-tap", "noise layer " + std::to_string(layer) + " outside [0, " +
                                       std::to_string(num_layers) + "]");
    }
}

Tensor sample_noise(const NoiseSpec& spec, const Shape& shape, NoiseCounter counter) {
    if (!(spec.sigma >= 0.0)) throw Error("invalid-config", "noise sigma must be >= 0");
    Tensor out = Tensor::zeros(shape);
    const std::uint64_t key = rng::mix(rng::mix(spec.seed, counter.step), counter.stream);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out.data[i] = spec.mu + spec.sigma * rng::counter_normal(key, i);
    }
    return out;
}

Tensor perturb_hidden(const Tensor& hidden, const NoiseSpec& spec, NoiseCounter counter) {
    Tensor out(hidden.shape, hidden.data);
    if (spec.mu == 0.0 && spec.sigma == 0.0) return out;
    const Tensor noise = sample_noise(spec, hidden.shape, counter);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += noise.data[i];
    return out;
}

Var perturb_hidden(Var hidden, const NoiseSpec& spec, NoiseCounter counter) {
    if (spec.mu == 0.0 && spec.sigma == 0.0) return hidden;
    Var noise = hidden.graph->constant(sample_noise(spec, hidden.shape(), counter));
    return add(hidden, noise);
}

}  // namespace advbt
