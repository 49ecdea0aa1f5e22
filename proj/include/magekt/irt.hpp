#pragma once

#include "magekt/core.hpp"

#include <map>
#include <span>
#include <string>
#include <vector>

namespace magekt::irt {

enum class Schedule {
    /// Truncated Newton (conjugate-gradient inner solve) + backtracking.
    NewtonCg,
    /// Steepest descent with Barzilai-Borwein trial steps + backtracking.
    GradientDescent,
};

struct IrtConfig {
    double l2_prior = 0.1;
    int max_iters = 200;
    /// Convergence threshold on the gradient infinity-norm.
    double tol = 1e-6;
    Schedule schedule = Schedule::NewtonCg;

    void validate() const;
};

struct FitReport {
    int iterations = 0;
    bool converged = false;
    double final_nll = 0.0;
    /// Gradient infinity-norm at the optimizer's final iterate (before the
    /// gauge shift, which moves the penalty term).
    double grad_inf_norm = 0.0;
    /// ||theta||^2 + ||b||^2 at the final iterate, before the gauge shift.
    double penalty_norm_sq = 0.0;
    /// Objective value after every accepted iteration (index 0 = start).
    std::vector<double> objective_trace;
};

struct IrtParams {
    std::map<std::string, double> theta;
    std::map<std::string, double> b;
    FitReport report;
};

/// sigma(theta - b), overflow-safe. Throws DomainError on non-finite input.
double rasch_probability(double theta, double b);

/// ln(1 + e^x) without overflow.
double softplus(double x);

/// -sum[r ln p + (1-r) ln(1-p)] + (l2_prior/2)(||theta||^2 + ||b||^2).
/// Throws DomainError for ids without parameters.
double negative_log_likelihood(const IrtParams& params, const InteractionLog& log,
                               const IrtConfig& cfg);

/// Dense objective over x = [theta (students, sorted ids) ; b (questions,
/// sorted ids)].
class RaschObjective {
public:
    RaschObjective(const InteractionLog& log, double l2_prior);

    std::size_t student_count() const { return students_.size(); }
    std::size_t question_count() const { return questions_.size(); }
    std::size_t dimension() const { return students_.size() + questions_.size(); }
    const std::vector<std::string>& students() const { return students_; }
    const std::vector<std::string>& questions() const { return questions_; }

    double value(std::span<const double> x) const;
    /// Returns the value and writes the gradient into `grad`.
    double value_and_gradient(std::span<const double> x, std::span<double> grad) const;
    /// Hessian-vector product at x.
    void hessian_times(std::span<const double> x, std::span<const double> v,
                       std::span<double> out) const;

private:
    struct Obs {
        std::size_t s;
        std::size_t q;
        int r;
    };
    std::vector<std::string> students_;
    std::vector<std::string> questions_;
    std::vector<Obs> obs_;
    double l2_;
};

/// Regularized maximum-likelihood Rasch fit. Deterministic. After fitting,
/// b is shifted to mean 0 and theta by the same amount, so theta - b (and
/// every predicted probability) is unchanged.
IrtParams fit_rasch(const InteractionLog& log, const IrtConfig& cfg = {});

struct Response {
    double difficulty = 0.0;
    int correct = 0;
};

/// Ability for a student not seen during fitting, with difficulties frozen.
double fit_ability(std::span<const Response> responses, const IrtConfig& cfg = {});

/// Looks up theta, falling back to `fit_ability` over the given responses.
double ability_or_fit(const IrtParams& params, const std::string& student,
                      std::span<const Response> responses, const IrtConfig& cfg = {});

std::vector<std::string> params_to_lines(const IrtParams& params);
IrtParams params_from_lines(std::istream& in);

}  // namespace magekt::irt
