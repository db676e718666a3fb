#pragma once

#include <cstddef>
#include <cstdint>

#include "advbt/autodiff.hpp"

namespace advbt {

// Gaussian perturbation added to one tapped hidden state. `sigma` is a
// standard deviation. `layer` uses the encoder's tap numbering: 0 is the
// embedding output, i the output of the i-th encoder layer.
struct NoiseSpec {
    double mu = 0.0;
    double sigma = 1.0;
    std::size_t layer = 1;
    std::uint64_t seed = 0;

    void validate(std::size_t num_layers) const;
    bool operator==(const NoiseSpec&) const = default;
};

// Position of a draw in the noise sequence. The trainer uses the global
// step and a per-stream id, so every batch gets fresh noise.
struct NoiseCounter {
    std::uint64_t step = 0;
    std::uint64_t stream = 0;
};

// Element i is mu + sigma * z_i with z_i a counter-based standard normal
// keyed by (seed, step, stream, i): same inputs, same tensor, on any platform.
Tensor sample_noise(const NoiseSpec& spec, const Shape& shape, NoiseCounter counter = {});

// hidden + noise as a new tensor.
Tensor perturb_hidden(const Tensor& hidden, const NoiseSpec& spec, NoiseCounter counter = {});

// Graph version. The noise enters as a constant, so gradients pass through
// the addition unchanged and nothing flows into the noise itself.
Var perturb_hidden(Var hidden, const NoiseSpec& spec, NoiseCounter counter = {});

}  // namespace advbt
