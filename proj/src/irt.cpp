#include "magekt/irt.hpp"

#include "magekt/jsonl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

namespace magekt::irt {

namespace {

double inf_norm(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double logistic(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// Truncated CG for H d = -g. Stops on small residual, on non-positive
// curvature, or after `max_iter` steps.
std::vector<double> newton_direction(const RaschObjective& f, std::span<const double> x,
                                     std::span<const double> g) {
    const std::size_t n = g.size();
    std::vector<double> d(n, 0.0), r(n), p(n), hp(n);
    for (std::size_t i = 0; i < n; ++i) r[i] = -g[i];
    p = r;
    double rr = dot(r, r);
    const double g_norm = std::sqrt(rr);
    const double target = std::min(0.5, std::sqrt(g_norm)) * g_norm;
    const std::size_t max_iter = std::max<std::size_t>(2 * n, 10);
    for (std::size_t it = 0; it < max_iter && std::sqrt(rr) > target; ++it) {
        f.hessian_times(x, p, hp);
        const double curv = dot(p, hp);
        if (curv <= 1e-14 * dot(p, p)) {
            if (it == 0) d = r;
            break;
        }
        const double alpha = rr / curv;
        for (std::size_t i = 0; i < n; ++i) {
            d[i] += alpha * p[i];
            r[i] -= alpha * hp[i];
        }
        const double rr_new = dot(r, r);
        const double beta = rr_new / rr;
        rr = rr_new;
        for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
    }
    return d;
}

}  // namespace

void IrtConfig::validate() const {
    if (!(tol > 0.0)) throw DomainError("IRT tol must be positive");
    if (max_iters < 1) throw DomainError("IRT max_iters must be at least 1");
    if (!(l2_prior >= 0.0)) throw DomainError("IRT l2_prior must be non-negative");
}

double softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double rasch_probability(double theta, double b) {
    if (!std::isfinite(theta) || !std::isfinite(b)) {
        throw DomainError("rasch_probability: non-finite input");
    }
    return logistic(theta - b);
}

double negative_log_likelihood(const IrtParams& params, const InteractionLog& log,
                               const IrtConfig& cfg) {
    double nll = 0.0;
    for (const auto& r : log.records()) {
        auto ts = params.theta.find(r.student_id);
        if (ts == params.theta.end()) throw DomainError("no ability for student " + r.student_id);
        auto bq = params.b.find(r.question_id);
        if (bq == params.b.end()) throw DomainError("no difficulty for question " + r.question_id);
        const double z = ts->second - bq->second;
        nll += r.correct ? softplus(-z) : softplus(z);
    }
    double sq = 0.0;
    for (const auto& [id, v] : params.theta) sq += v * v;
    for (const auto& [id, v] : params.b) sq += v * v;
    return nll + 0.5 * cfg.l2_prior * sq;
}

RaschObjective::RaschObjective(const InteractionLog& log, double l2_prior)
    : students_(log.students()), questions_(log.questions()), l2_(l2_prior) {
    Interner s(students_), q(questions_);
    obs_.reserve(log.size());
    for (const auto& r : log.records()) {
        obs_.push_back({s.at(r.student_id), q.at(r.question_id), r.correct});
    }
}

double RaschObjective::value(std::span<const double> x) const {
    const std::size_t ns = students_.size();
    double v = 0.0;
    for (const auto& o : obs_) {
        const double z = x[o.s] - x[ns + o.q];
        v += o.r ? softplus(-z) : softplus(z);
    }
    return v + 0.5 * l2_ * dot(x, x);
}

double RaschObjective::value_and_gradient(std::span<const double> x, std::span<double> grad) const {
    const std::size_t ns = students_.size();
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = l2_ * x[i];
    double v = 0.0;
    for (const auto& o : obs_) {
        const double z = x[o.s] - x[ns + o.q];
        v += o.r ? softplus(-z) : softplus(z);
        // d/dz of the record term is p - r.
        const double resid = logistic(z) - o.r;
        grad[o.s] += resid;
        grad[ns + o.q] -= resid;
    }
    return v + 0.5 * l2_ * dot(x, x);
}

void RaschObjective::hessian_times(std::span<const double> x, std::span<const double> v,
                                   std::span<double> out) const {
    const std::size_t ns = students_.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = l2_ * v[i];
    for (const auto& o : obs_) {
        const double p = logistic(x[o.s] - x[ns + o.q]);
        const double w = p * (1.0 - p) * (v[o.s] - v[ns + o.q]);
        out[o.s] += w;
        out[ns + o.q] -= w;
    }
}

IrtParams fit_rasch(const InteractionLog& log, const IrtConfig& cfg) {
    cfg.validate();
    if (log.empty()) throw DomainError("fit_rasch: empty interaction log");
    const RaschObjective f(log, cfg.l2_prior);
    const std::size_t n = f.dimension();

    std::vector<double> x(n, 0.0), g(n), x_new(n), g_new(n);
    double fx = f.value_and_gradient(x, g);
    FitReport report;
    report.objective_trace.push_back(fx);
    double gd_step = 1.0;

    int iter = 0;
    while (iter < cfg.max_iters && inf_norm(g) > cfg.tol) {
        std::vector<double> d;
        if (cfg.schedule == Schedule::NewtonCg) {
            d = newton_direction(f, x, g);
        } else {
            d.resize(n);
            for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
        }
        double slope = dot(g, d);
        if (slope >= 0.0) {
            for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
            slope = -dot(g, g);
        }
        double step = cfg.schedule == Schedule::NewtonCg ? 1.0 : gd_step;
        double f_new = fx;
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
            for (std::size_t i = 0; i < n; ++i) x_new[i] = x[i] + step * d[i];
            f_new = f.value_and_gradient(x_new, g_new);
            if (!std::isfinite(f_new)) {
                step *= 0.5;
                continue;
            }
            // Near the optimum the Armijo decrease drops below the rounding
            // noise of f; a non-increasing value with a smaller gradient is
            // still progress.
            if (f_new <= fx + 1e-4 * step * slope ||
                (f_new <= fx && inf_norm(g_new) < inf_norm(g))) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        ++iter;
        if (!accepted) break;
        if (cfg.schedule == Schedule::GradientDescent) {
            // Barzilai-Borwein step s's / s'y for the next iteration.
            double ss = 0.0, sy = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double si = x_new[i] - x[i], yi = g_new[i] - g[i];
                ss += si * si;
                sy += si * yi;
            }
            gd_step = sy > 0.0 ? std::clamp(ss / sy, 1e-6, 1e3) : std::min(step * 2.0, 1e3);
        }
        x.swap(x_new);
        g.swap(g_new);
        fx = f_new;
        report.objective_trace.push_back(fx);
    }

    report.iterations = iter;
    report.final_nll = fx;
    report.grad_inf_norm = inf_norm(g);
    report.converged = report.grad_inf_norm <= cfg.tol;
    report.penalty_norm_sq = dot(x, x);

    const std::size_t ns = f.student_count();
    double mean_b = 0.0;
    for (std::size_t j = ns; j < n; ++j) mean_b += x[j];
    mean_b /= static_cast<double>(f.question_count());

    IrtParams params;
    for (std::size_t i = 0; i < ns; ++i) params.theta[f.students()[i]] = x[i] - mean_b;
    for (std::size_t j = 0; j < f.question_count(); ++j) {
        params.b[f.questions()[j]] = x[ns + j] - mean_b;
    }
    // Re-centre exactly: subtracting a rounded mean can leave O(ulp) residue.
    double residue = 0.0;
    for (const auto& [id, v] : params.b) residue += v;
    residue /= static_cast<double>(params.b.size());
    if (residue != 0.0) {
        for (auto& [id, v] : params.b) v -= residue;
        for (auto& [id, v] : params.theta) v -= residue;
    }
    params.report = std::move(report);
    return params;
}

double fit_ability(std::span<const Response> responses, const IrtConfig& cfg) {
    cfg.validate();
    // Newton on a strictly convex 1-D objective when l2_prior > 0; with no
    // prior an all-correct or all-wrong pattern has no finite optimum, so the
    // iterate is clamped.
    double theta = 0.0;
    for (int it = 0; it < cfg.max_iters; ++it) {
        double g = cfg.l2_prior * theta;
        double h = cfg.l2_prior;
        for (const auto& r : responses) {
            const double p = logistic(theta - r.difficulty);
            g += p - r.correct;
            h += p * (1.0 - p);
        }
        if (std::abs(g) <= cfg.tol) break;
        const double step = h > 1e-12 ? g / h : g;
        theta = std::clamp(theta - std::clamp(step, -2.0, 2.0), -30.0, 30.0);
    }
    return theta;
}

double ability_or_fit(const IrtParams& params, const std::string& student,
                      std::span<const Response> responses, const IrtConfig& cfg) {
    auto it = params.theta.find(student);
    if (it != params.theta.end()) return it->second;
    return fit_ability(responses, cfg);
}

std::vector<std::string> params_to_lines(const IrtParams& params) {
    std::vector<std::string> out;
    const auto& r = params.report;
    out.push_back(jsonl::LineWriter()
                      .field("kind", "fit_report")
                      .field("iterations", r.iterations)
                      .field("converged", r.converged)
                      .field("final_nll", r.final_nll)
                      .field("grad_inf_norm", r.grad_inf_norm)
                      .field("penalty_norm_sq", r.penalty_norm_sq)
                      .str());
    for (const auto& [id, v] : params.theta) {
        out.push_back(jsonl::LineWriter().field("kind", "student").field("id", id).field("theta", v).str());
    }
    for (const auto& [id, v] : params.b) {
        out.push_back(jsonl::LineWriter().field("kind", "question").field("id", id).field("b", v).str());
    }
    return out;
}

IrtParams params_from_lines(std::istream& in) {
    IrtParams p;
    for (const auto& j : jsonl::read_lines(in)) {
        const auto kind = j.value("kind", std::string{});
        if (kind == "student") {
            p.theta[j.at("id").get<std::string>()] = j.at("theta").get<double>();
        } else if (kind == "question") {
            p.b[j.at("id").get<std::string>()] = j.at("b").get<double>();
        } else if (kind == "fit_report") {
            p.report.iterations = j.at("iterations").get<int>();
            p.report.converged = j.at("converged").get<bool>();
            p.report.final_nll = j.at("final_nll").get<double>();
            p.report.grad_inf_norm = j.at("grad_inf_norm").get<double>();
            p.report.penalty_norm_sq = j.at("penalty_norm_sq").get<double>();
        }
    }
    return p;
}

}  // namespace magekt::irt
