#pragma once

#include "magekt/core.hpp"
#include "magekt/fusion/model.hpp"
#include "magekt/ingest.hpp"
#include "magekt/irt.hpp"
#include "magekt/retrieval.hpp"

#include <tuple>

namespace magekt::fusion {

struct RetrievalConfig {
    std::size_t sq_hops = 2;
    std::size_t kc_hops = 2;
    std::size_t budget = 512;
    /// Fit every student's ability on the visible history instead of
    /// looking up the training-time value.
    bool prefix_ability = false;

    void validate() const;
};

/// Row-stochastic mixing h_i = (x_i + mean_w(neighbors of i)) / 2, where
/// the neighbor mean is weighted by edge weight; isolated nodes keep x_i.
/// Parallel edges keep their largest weight; self loops and non-positive
/// weights are ignored.
diff::SparseMatrix neighborhood_mix(std::size_t n,
                                    const std::vector<std::tuple<std::size_t, std::size_t, double>>& edges);

/// Builds model inputs from already retrieved subgraphs. Empty subgraphs
/// are allowed: the target question, student and KCs are always present.
/// Unseen students get an ability fitted on the history with difficulties
/// held fixed.
StepInput build_step_input(const retrieval::PredictionInstance& inst, const retrieval::Subgraph& sq_sub,
                           const retrieval::Subgraph& kc_sub, const SqGraph& sq, const KcGraph& kc,
                           Variant variant, const irt::IrtConfig& ability_cfg = {}, bool prefix_ability = false);

/// Retrieval plus `build_step_input` under one variant's rules.
class Encoder {
public:
    Encoder(const SqGraph& sq, const KcGraph& kc, RetrievalConfig cfg, Variant variant,
            irt::IrtConfig ability_cfg = {});

    StepInput encode(const retrieval::PredictionInstance& inst) const;
    /// One input per predictable position t = 1 .. T-1, history = items[0, t).
    std::vector<StepInput> encode_window(const ingest::Window& window) const;

    std::size_t students() const { return sq_.students.size(); }
    std::size_t questions() const { return sq_.questions.size(); }
    std::size_t kcs() const { return kc_.node_count(); }
    Variant variant() const { return variant_; }

private:
    const SqGraph& sq_;
    const KcGraph& kc_;
    RetrievalConfig cfg_;
    Variant variant_;
    irt::IrtConfig ability_cfg_;
    retrieval::SqRetriever sq_ret_;
    retrieval::KcRetriever kc_ret_;
};

}  // namespace magekt::fusion
