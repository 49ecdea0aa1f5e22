#pragma once

#include "magekt/agents.hpp"

namespace magekt::agents {

/// Thresholds of the rule-based stand-in for live agents.
struct HeuristicConfig {
    double equivalence_overlap = 0.8;
    double containment_overlap = 0.5;
    double precedence = 0.7;
    double dependence = 0.15;
    /// Sibling needs overlap in [sibling_overlap, equivalence_overlap).
    double sibling_overlap = 0.3;
    std::size_t association_cooccurrence = 3;
    /// Personas vote None when no candidate reaches this weighted score.
    double vote_floor = 3.0;
    /// In round 2 a persona adopts the relation both peers agree on when
    /// its own score for it is within this margin of its best.
    double revision_margin = 1.0;
};

/// Facet a criterion speaks to; personas weight their own facet double.
enum class Facet { Order, Semantic, Behavior };
Facet facet_of(const std::string& criterion);

/// Lower-case, single-spaced name.
std::string standardize_name(const std::string& name);
/// First name token found in a small subject keyword table, else the
/// first token ("general" for an empty name).
std::string heuristic_category(const std::string& name);

/// Step 2 rules in priority order: Equivalence, Containment,
/// PredecessorSuccessor, Sibling, Association, None. `ev` is oriented a->b.
TypedRelation heuristic_relation(const ConceptProfile& a, const ConceptProfile& b, const PairEvidence& ev,
                                 const HeuristicConfig& cfg = {});

/// Step 3 criteria for `r`, each bucketed as round(5 * clamp(x, 0, 1)).
/// `ev` is oriented a->b; it is flipped internally to follow r.src->r.dst.
/// Independence-type criteria score 0 for pairs never co-attempted.
std::map<std::string, int> heuristic_scores(const TypedRelation& r, const ConceptProfile& a,
                                            const ConceptProfile& b, const PairEvidence& ev,
                                            const HeuristicConfig& cfg = {});

/// Persona-weighted mean over the criteria of `r`.
double persona_score(Persona persona, const std::map<std::string, int>& scores);

/// Every oriented candidate relation for a pair (None excluded).
std::vector<TypedRelation> candidate_relations(const std::string& a, const std::string& b);

/// Deterministic, reentrant backend driven by the rules above.
class HeuristicBackend : public AgentBackend {
public:
    explicit HeuristicBackend(HeuristicConfig cfg = {}) : cfg_(cfg) {}

    nlohmann::json respond(const AgentRole& role, TaskKind task, const nlohmann::json& payload) override;

    const HeuristicConfig& config() const { return cfg_; }

private:
    nlohmann::json vote(Persona persona, const nlohmann::json& payload) const;

    HeuristicConfig cfg_;
};

}  // namespace magekt::agents
