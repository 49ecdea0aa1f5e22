#include "magekt/diff/optim.hpp"

#include "magekt/diff/tape.hpp"
#include "magekt/jsonl.hpp"
#include "magekt/random.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace magekt::diff {

void AdamConfig::validate() const {
    if (!(lr > 0.0)) throw DomainError("adam: lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw DomainError("adam: betas must be in [0, 1)");
    }
    if (!(eps > 0.0)) throw DomainError("adam: eps must be positive");
    if (!(weight_decay >= 0.0)) throw DomainError("adam: weight_decay must be non-negative");
}

AdamState make_adam_state(const std::vector<Parameter*>& params, const AdamConfig& cfg) {
    cfg.validate();
    AdamState s;
    s.hyper = cfg;
    for (const auto* p : params) {
        s.m.emplace_back(p->value.size(), 0.0);
        s.v.emplace_back(p->value.size(), 0.0);
    }
    return s;
}

void adam_step(const std::vector<Parameter*>& params, AdamState& state) {
    if (params.size() != state.m.size()) throw DomainError("adam_step: state built for a different parameter list");
    const auto& h = state.hyper;
    ++state.step;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = *params[k];
        auto& m = state.m[k];
        auto& v = state.v[k];
        if (p.grad.size() != p.value.size() || m.size() != p.value.size()) {
            throw DomainError("adam_step: shape mismatch for " + p.name);
        }
        auto& w = p.value.data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double g = p.grad[i];
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= h.lr * (mhat / (std::sqrt(vhat) + h.eps) + h.weight_decay * w[i]);
        }
        if (!p.value.all_finite()) throw DomainError("adam_step: non-finite value in " + p.name);
    }
}

GradCheckReport gradient_check(const std::function<Var(Tape&)>& f, const std::vector<Parameter*>& params,
                               double step, std::size_t max_coords, std::uint64_t seed) {
    if (!(step > 0.0)) throw DomainError("gradient_check: step must be positive");
    for (auto* p : params) p->zero_grad();
    {
        Tape tape;
        const Var out = f(tape);
        tape.backward(out);
    }
    std::vector<std::vector<double>> analytic;
    for (auto* p : params) analytic.push_back(p->grad);

    auto eval = [&] {
        Tape tape;
        const double v = f(tape).value().item();
        if (!std::isfinite(v)) throw DomainError("gradient_check: non-finite function value");
        return v;
    };

    GradCheckReport report;
    Rng rng(seed);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& w = params[k]->value.data();
        std::vector<std::size_t> coords(w.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (coords.size() > max_coords) {
            rng.shuffle(coords);
            coords.resize(max_coords);
            std::sort(coords.begin(), coords.end());
        }
        for (auto i : coords) {
            const double orig = w[i];
            auto at = [&](double offset) {
                w[i] = orig + offset;
                return eval();
            };
            // Five-point stencil, truncation error O(step^4). Differencing
            // symmetric pairs first keeps flat directions exactly zero.
            const double near = at(step) - at(-step);
            const double far = at(2.0 * step) - at(-2.0 * step);
            const double numeric = (8.0 * near - far) / (12.0 * step);
            w[i] = orig;
            const double a = analytic[k][i];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            ++report.coordinates;
            if (report.worst.empty() || err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = params[k]->name + "[" + std::to_string(i) + "]";
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    for (auto* p : params) p->zero_grad();
    return report;
}

GradCheckReport gradient_check(const std::function<Var(Tape&, const std::vector<Var>&)>& f,
                               const std::vector<Tensor>& point, double step) {
    std::vector<Parameter> holders;
    holders.reserve(point.size());
    for (std::size_t i = 0; i < point.size(); ++i) holders.emplace_back("x" + std::to_string(i), point[i]);
    std::vector<Parameter*> ptrs;
    for (auto& h : holders) ptrs.push_back(&h);
    return gradient_check(
        [&](Tape& t) {
            std::vector<Var> xs;
            for (auto& h : holders) xs.push_back(t.param(h));
            return f(t, xs);
        },
        ptrs, step);
}

void save_parameters(std::ostream& out, const std::vector<const Parameter*>& params) {
    for (const auto* p : params) {
        nlohmann::json shape = p->value.shape();
        out << jsonl::LineWriter()
                   .field("name", p->name)
                   .raw("shape", shape.dump())
                   .field("values", p->value.data())
                   .str()
            << '\n';
    }
}

void load_parameters(std::istream& in, const std::vector<Parameter*>& params) {
    std::map<std::string, nlohmann::json> by_name;
    for (auto& j : jsonl::read_lines(in)) {
        if (!j.contains("name")) continue;  // metadata rows
        auto name = j.at("name").get<std::string>();
        by_name[std::move(name)] = std::move(j);
    }
    for (auto* p : params) {
        auto it = by_name.find(p->name);
        if (it == by_name.end()) throw DomainError("checkpoint has no parameter " + p->name);
        const auto shape = it->second.at("shape").get<std::vector<std::size_t>>();
        if (shape != p->value.shape()) {
            throw DomainError("checkpoint shape mismatch for " + p->name);
        }
        p->value = Tensor(shape, it->second.at("values").get<std::vector<double>>());
        p->grad.assign(p->value.size(), 0.0);
    }
}

}  // namespace magekt::diff
