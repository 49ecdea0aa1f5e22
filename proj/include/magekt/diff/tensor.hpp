#pragma once

#include "magekt/core.hpp"

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace magekt::diff {

/// Dense row-major array of doubles. Ops work on rank-2 tensors; a vector
/// is a 1 x n matrix.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<std::size_t> shape, std::vector<double> values);

    static Tensor zeros(std::size_t rows, std::size_t cols);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
    static Tensor row(std::vector<double> values);
    static Tensor scalar(double v);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t size() const { return values_.size(); }
    /// Throws unless rank 2.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> values() const { return values_; }
    std::vector<double>& data() { return values_; }
    const std::vector<double>& data() const { return values_; }

    double operator()(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }
    double& operator()(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }
    double item() const;

    bool all_finite() const;
    std::string shape_string() const;

    bool operator==(const Tensor&) const = default;

    /// Tensors handed to a `Tape` as leaves record gradients when set.
    bool requires_grad = false;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> values_;
};

/// Named trainable tensor. `grad` has the same size as `value` and
/// accumulates across backward passes until zeroed.
struct Parameter {
    Parameter() = default;
    Parameter(std::string name, Tensor value);

    std::string name;
    Tensor value;
    std::vector<double> grad;

    void zero_grad();
};

}  // namespace magekt::diff
