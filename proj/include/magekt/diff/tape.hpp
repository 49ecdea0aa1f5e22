#pragma once

#include "magekt/diff/tensor.hpp"

#include <cstdint>
#include <deque>
#include <functional>
#include <span>

namespace magekt::diff {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    Tape& tape() const;
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Counter-keyed dropout masks. `key` should already mix (seed, epoch,
/// batch, window); every dropout call on the tape draws a fresh instance id.
struct DropoutContext {
    bool training = false;
    std::uint64_t key = 0;
    std::uint64_t next_instance = 0;
};

/// Records a computation for reverse-mode differentiation. Node ids grow in
/// creation order, which is already a topological order, so backward is a
/// single reverse sweep. One tape belongs to one thread.
class Tape {
public:
    /// Receives the tape, the node's own id and its output gradient.
    using Backward = std::function<void(Tape&, std::size_t self, std::span<const double> out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Value without gradient.
    Var constant(Tensor value);
    /// Differentiable leaf if `value.requires_grad`; gradient via `grad`.
    Var leaf(Tensor value);
    /// Reads the parameter's current value; gradients accumulate into
    /// `p.grad`. The parameter must outlive the tape.
    Var param(Parameter& p);

    /// Internal: appends an op result. Checks finiteness and only keeps
    /// `backward` if some parent needs a gradient.
    Var record(Tensor value, std::initializer_list<Var> parents, Backward backward, const char* op);
    Var record(Tensor value, const std::vector<Var>& parents, Backward backward, const char* op);

    /// Seeds d(root)/d(root) = seed and sweeps backward. Gradients of
    /// non-parameter nodes are reset first; parameter gradients accumulate.
    void backward(Var root, double seed = 1.0);

    /// Gradient of a leaf or intermediate from the last backward (empty if
    /// it received none).
    const std::vector<double>& grad(Var v) const;

    const Tensor& value(std::size_t id) const;
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    /// Mutable gradient buffer, allocated on first use.
    std::span<double> grad_buffer(std::size_t id);

    DropoutContext& dropout() { return dropout_; }
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        std::vector<double> grad;
        Parameter* param = nullptr;
        bool needs_grad = false;
        Backward backward;
    };

    Var push(Node node);

    std::deque<Node> nodes_;
    DropoutContext dropout_;
};

}  // namespace magekt::diff
