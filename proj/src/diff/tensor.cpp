#include "magekt/diff/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>

namespace magekt::diff {

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
    const std::size_t n = std::accumulate(shape_.begin(), shape_.end(), std::size_t{1}, std::multiplies<>());
    if (n != values_.size()) {
        throw DomainError("tensor " + shape_string() + " given " + std::to_string(values_.size()) + " values");
    }
}

Tensor Tensor::zeros(std::size_t rows, std::size_t cols) {
    return Tensor({rows, cols}, std::vector<double>(rows * cols, 0.0));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
}

Tensor Tensor::scalar(double v) { return Tensor({1, 1}, {v}); }

std::size_t Tensor::rows() const {
    if (shape_.size() != 2) throw DomainError("expected a matrix, got " + shape_string());
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (shape_.size() != 2) throw DomainError("expected a matrix, got " + shape_string());
    return shape_[1];
}

double Tensor::item() const {
    if (values_.size() != 1) throw DomainError("item() on tensor " + shape_string());
    return values_[0];
}

bool Tensor::all_finite() const {
    for (double v : values_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::string Tensor::shape_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape_[i]);
    }
    return s + "]";
}

Parameter::Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.size(), 0.0) {
    if (!value.all_finite()) throw DomainError("parameter " + name + " has non-finite values");
}

void Parameter::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

}  // namespace magekt::diff
