#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "advbt/error.hpp"

namespace advbt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major float64 array. `grad` is empty until a backward pass
// writes into it; when present it always matches `data` in length.
//
// The gradient accumulator is not part of the tensor's value, so it is
// writable through const references. This lets a read-only model be bound
// into a graph for evaluation and still receive gradients during training.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    mutable std::vector<double> grad;

    Tensor() = default;
    Tensor(Shape shape_, std::vector<double> data_, bool requires_grad_ = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor filled(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t numel() const noexcept { return data.size(); }
    std::size_t rank() const noexcept { return shape.size(); }
    std::size_t dim(std::size_t axis) const { return shape.at(axis); }
    // Size of the trailing axis; the leading axes are treated as rows.
    std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
    std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

    double item() const;
    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    bool has_grad() const noexcept { return !grad.empty(); }
    void zero_grad() const;
    void accumulate_grad(std::span<const double> g) const;

    // Throws unless the invariants hold (positive dims, data length).
    void validate() const;
};

void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

}  // namespace advbt
