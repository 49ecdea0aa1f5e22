#include "magekt/diff/tape.hpp"

namespace magekt::diff {

const Tensor& Var::value() const {
    if (!tape_) throw DomainError("use of an empty Var");
    return tape_->value(id_);
}

Tape& Var::tape() const {
    if (!tape_) throw DomainError("use of an empty Var");
    return *tape_;
}

Var Tape::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
    if (!value.all_finite()) throw DomainError("constant with non-finite values");
    value.requires_grad = false;
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
}

Var Tape::leaf(Tensor value) {
    if (!value.all_finite()) throw DomainError("leaf with non-finite values");
    Node n;
    n.needs_grad = value.requires_grad;
    n.value = std::move(value);
    return push(std::move(n));
}

Var Tape::param(Parameter& p) {
    if (p.grad.size() != p.value.size()) p.grad.assign(p.value.size(), 0.0);
    Node n;
    n.param = &p;
    n.needs_grad = true;
    return push(std::move(n));
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, Backward backward, const char* op) {
    return record(std::move(value), std::vector<Var>(parents), std::move(backward), op);
}

Var Tape::record(Tensor value, const std::vector<Var>& parents, Backward backward, const char* op) {
    if (!value.all_finite()) throw DomainError(std::string("non-finite result in ") + op);
    Node n;
    n.value = std::move(value);
    for (const auto& p : parents) {
        if (&p.tape() != this) throw DomainError(std::string(op) + ": operands from different tapes");
        n.needs_grad = n.needs_grad || nodes_[p.id()].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(backward);
    return push(std::move(n));
}

const Tensor& Tape::value(std::size_t id) const {
    const auto& n = nodes_.at(id);
    return n.param ? n.param->value : n.value;
}

std::span<double> Tape::grad_buffer(std::size_t id) {
    auto& n = nodes_.at(id);
    if (n.param) return n.param->grad;
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

const std::vector<double>& Tape::grad(Var v) const {
    const auto& n = nodes_.at(v.id());
    return n.param ? n.param->grad : n.grad;
}

void Tape::backward(Var root, double seed) {
    if (&root.tape() != this) throw DomainError("backward: root from another tape");
    if (value(root.id()).size() != 1) {
        throw DomainError("backward: root must be a scalar, got " + value(root.id()).shape_string());
    }
    for (auto& n : nodes_) {
        if (!n.param) n.grad.clear();
    }
    grad_buffer(root.id())[0] += seed;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
        auto& n = nodes_[i];
        if (!n.backward || n.grad.empty()) continue;
        n.backward(*this, i, n.grad);
    }
}

}  // namespace magekt::diff
