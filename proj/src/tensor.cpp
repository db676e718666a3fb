#include "advbt/tensor.hpp"

#include <sstream>

namespace advbt {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape_, std::vector<double> data_, bool requires_grad_)
    : shape(std::move(shape_)), data(std::move(data_)), requires_grad(requires_grad_) {
    validate();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return filled(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw Error("shape-mismatch", "ragged matrix literal");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
}

double Tensor::item() const {
    if (numel() != 1) {
        throw Error("shape-mismatch", "item() on tensor of shape " + shape_string(shape));
    }
    return data[0];
}

void Tensor::zero_grad() const { grad.assign(data.size(), 0.0); }

void Tensor::accumulate_grad(std::span<const double> g) const {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

void Tensor::validate() const {
    for (auto d : shape) {
        if (d == 0) throw Error("shape-mismatch", "zero-sized dimension in " + shape_string(shape));
    }
    if (shape_numel(shape) != data.size()) {
        throw Error("shape-mismatch", "shape " + shape_string(shape) + " does not match " +
                                          std::to_string(data.size()) + " elements");
    }
    if (!grad.empty() && grad.size() != data.size()) {
        throw Error("shape-mismatch", "gradient length differs from data length");
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape) {
        throw Error("shape-mismatch", std::string(op) + ": shapes " + shape_string(a.shape) +
                                          " and " + shape_string(b.shape) + " differ");
    }
}

}  // namespace advbt
