#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>

#include "advbt/autodiff.hpp"

namespace advbt {

struct BTConfig {
    double lambda = 5e-3;  // weight of the redundancy-reduction term
    double eps = 1e-12;    // keeps zero-norm columns finite

    void validate() const;
    bool operator==(const BTConfig&) const = default;
};

struct LinearParams {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]
};

struct BatchNormParams {
    Tensor gamma, beta;
    RunningStats stats;
    double eps = 1e-5;
};

// linear -> bn -> relu -> linear -> bn -> relu -> linear
struct ProjectionHead {
    LinearParams layer1, layer2, layer3;
    BatchNormParams norm1, norm2;

    // Linear weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    static ProjectionHead init(std::size_t hidden_dim, std::size_t proj_dim, std::uint64_t seed);

    std::size_t input_dim() const { return layer1.weight.shape.at(0); }
    std::size_t proj_dim() const { return layer3.weight.shape.at(1); }

    // Trainable tensors, named projection.<part>.<field>.
    void for_each_parameter(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each_parameter(const std::function<void(const std::string&, const Tensor&)>& fn) const;
    void zero_grad();
};

// Train mode uses batch statistics (N >= 2) and updates the running ones.
Var project(Graph& graph, ProjectionHead& head, Var cls, Mode mode);

// Subtracts each column's batch mean. Needs N >= 2.
Var batch_center(Var z);

// M[i,j] = <zc[:,i], za[:,j]> / (sqrt(|zc[:,i]|^2 + eps) * sqrt(|za[:,j]|^2 + eps)),
// for already centered [N, d] inputs; returns [d, d].
Var cross_correlation(Var z_clean, Var z_adv, double eps);

// sum_i (1 - M_ii)^2 + lambda * sum_{i != j} M_ij^2
Var barlow_twins_loss(Var m, const BTConfig& config);

// Center both projections, correlate, and score.
Var barlow_twins_from_projections(Var z_clean, Var z_adv, const BTConfig& config);

}  // namespace advbt
