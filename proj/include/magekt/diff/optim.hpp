#pragma once

#include "magekt/diff/tensor.hpp"

#include <cstdint>
#include <functional>
#include <istream>
#include <limits>
#include <ostream>
#include <vector>

namespace magekt::diff {

class Tape;
class Var;

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;

    void validate() const;
};

struct AdamState {
    AdamConfig hyper;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::int64_t step = 0;
};

AdamState make_adam_state(const std::vector<Parameter*>& params, const AdamConfig& cfg = {});

/// One AdamW update from each parameter's accumulated `grad`:
/// p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p).
void adam_step(const std::vector<Parameter*>& params, AdamState& state);

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    /// "name[index]" of the worst coordinate, with both derivatives there.
    std::string worst;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

inline constexpr std::size_t kAllCoordinates = std::numeric_limits<std::size_t>::max();

/// Five-point central differences against reverse mode for the scalar
/// built by `f`.
/// Per parameter, at most `max_coords` coordinates are probed (a seeded
/// random subset when the tensor is larger). Relative error per coordinate
/// is |a - n| / max(|a|, |n|, 1e-8).
GradCheckReport gradient_check(const std::function<Var(Tape&)>& f, const std::vector<Parameter*>& params,
                               double step = 1e-5, std::size_t max_coords = kAllCoordinates,
                               std::uint64_t seed = 0);

/// Convenience form: differentiates `f` with respect to the given points.
GradCheckReport gradient_check(const std::function<Var(Tape&, const std::vector<Var>&)>& f,
                               const std::vector<Tensor>& point, double step = 1e-5);

/// One JSON line per parameter: name, shape, values (17 significant digits).
void save_parameters(std::ostream& out, const std::vector<const Parameter*>& params);
/// Overwrites values by name; rows without a name (metadata) are skipped.
/// Throws on a missing name or shape mismatch.
void load_parameters(std::istream& in, const std::vector<Parameter*>& params);

}  // namespace magekt::diff
