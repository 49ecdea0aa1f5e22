#pragma once

#include "magekt/core.hpp"

#include <nlohmann/json.hpp>

#include <cstddef>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

namespace magekt::agents {

/// A backend reply that does not match the task's response schema.
class SchemaError : public DomainError {
public:
    using DomainError::DomainError;
};

/// Transport-level failure of a live backend (after its own retries).
class BackendError : public DomainError {
public:
    using DomainError::DomainError;
};

// ---------------------------------------------------------------------------
// Evidence

/// Interaction statistics for the ordered pair (A, B). The `reverse_*`
/// fields hold the same statistics for (B, A).
struct PairEvidence {
    /// Students who attempted both KCs.
    std::size_t cooccurrence = 0;
    /// Share of co-attempting students whose first A attempt is strictly
    /// earlier than their first B attempt.
    double precedence_prob = 0.0;
    double reverse_precedence_prob = 0.0;
    /// P(correct on B | latest earlier A attempt correct) minus the same
    /// with that A attempt wrong, pooled over B attempts; 0 when either
    /// group is empty.
    double dependence = 0.0;
    double reverse_dependence = 0.0;
    /// Token-set Jaccard of name + definition + category.
    double name_overlap = 0.0;

    /// Same statistics seen from B.
    PairEvidence reversed() const;
    bool operator==(const PairEvidence&) const = default;
};

nlohmann::json to_json(const PairEvidence& ev);
PairEvidence evidence_from_json(const nlohmann::json& j);

/// Lower-cased alphanumeric words minus a short stop list.
std::set<std::string> tokens(const std::string& text);
std::set<std::string> profile_tokens(const ConceptProfile& p);
double jaccard(const std::set<std::string>& a, const std::set<std::string>& b);

/// Per-student KC sequences, built once and reused across pairs.
class EvidenceIndex {
public:
    explicit EvidenceIndex(const InteractionLog& log);

    bool has_kc(const std::string& kc) const { return students_of_.count(kc) > 0; }
    /// Throws DomainError for A == B or a KC absent from the log.
    PairEvidence pair(const ConceptProfile& a, const ConceptProfile& b) const;
    /// Same, but a KC absent from the log simply has no interactions.
    PairEvidence pair_or_empty(const ConceptProfile& a, const ConceptProfile& b) const;
    /// Co-attempt counts for every KC pair that co-occurs at least once,
    /// keyed by (min id, max id).
    std::map<std::pair<std::string, std::string>, std::size_t> cooccurrence_counts() const;

private:
    struct Step {
        std::vector<std::string> kcs;
        int correct;
        double time;
    };
    PairEvidence compute(const ConceptProfile& a, const ConceptProfile& b) const;
    std::vector<std::vector<Step>> students_;
    /// Per student: KC -> time of its first attempt.
    std::vector<std::map<std::string, double>> first_seen_;
    /// KC -> students (indices) who attempted it, ascending.
    std::map<std::string, std::vector<std::size_t>> students_of_;
};

PairEvidence compute_pair_evidence(const InteractionLog& log, const ConceptProfile& a, const ConceptProfile& b);

// ---------------------------------------------------------------------------
// Backend protocol

enum class Role { Semantic, Scoring, Arbiter, Persona };

enum class Persona { Teaching = 0, Structure = 1, Behavior = 2 };
inline constexpr Persona kPersonas[] = {Persona::Teaching, Persona::Structure, Persona::Behavior};
std::string_view to_string(Persona p);

struct AgentRole {
    Role role = Role::Semantic;
    Persona persona = Persona::Teaching;

    /// "semantic", "scoring", "arbiter" or "persona:<name>".
    std::string name() const;
};

enum class TaskKind { CompleteConcept, ProposeRelation, ScoreRelation, Arbitrate, Vote };
std::string_view to_string(TaskKind t);

/// One agent call: role + task + structured payload in, structured object
/// out. Implementations must be safe to call from several threads.
class AgentBackend {
public:
    virtual ~AgentBackend() = default;
    virtual nlohmann::json respond(const AgentRole& role, TaskKind task, const nlohmann::json& payload) = 0;
};

/// Criteria scored for a relation type, in a fixed order.
const std::vector<std::string>& criteria_for(RelationType type);

/// Throws SchemaError unless `response` fits the task's schema. The
/// payload supplies context (pair ids, expected criteria).
void validate_response(TaskKind task, const nlohmann::json& payload, const nlohmann::json& response);

/// Calls the backend and validates; on SchemaError re-asks with the error
/// appended under "repair", up to `retries` more times.
nlohmann::json ask(AgentBackend& backend, const AgentRole& role, TaskKind task, nlohmann::json payload,
                   int retries);

// ---------------------------------------------------------------------------
// Pipeline records

/// A typed relation with orientation: for Containment `src` contains
/// `dst`; for PredecessorSuccessor `src` comes first. Symmetric types keep
/// the pair order as given.
struct TypedRelation {
    RelationType type = RelationType::None;
    std::string src;
    std::string dst;

    bool operator==(const TypedRelation&) const = default;
};

nlohmann::json to_json(const TypedRelation& r);
TypedRelation relation_from_json(const nlohmann::json& j, const std::string& a, const std::string& b);

struct RelationProposal {
    ConceptProfile a;
    ConceptProfile b;
    TypedRelation relation;
    std::string justification;
    std::string evidence_excerpts;
    bool doubtful = false;
    /// The backend never produced a valid answer.
    bool failed = false;
    /// Serialized agent output for the audit trail.
    std::string audit;
};

struct ScoreVector {
    std::map<std::string, int> scores;
    std::map<std::string, std::string> explanations;
    bool doubtful = false;
    std::string audit;

    /// 0 for an empty vector.
    double mean() const;
};

// ---------------------------------------------------------------------------
// Steps

/// Step 1. Idempotent for profiles that already carry a definition and a
/// category. Falls back to definition = name (flagged degraded).
ConceptProfile complete_concept(const ConceptProfile& kc, AgentBackend& backend, int retries = 3);

/// Step 2. Schema failure yields type None flagged doubtful.
RelationProposal propose_relation(const ConceptProfile& a, const ConceptProfile& b, const PairEvidence& ev,
                                  AgentBackend& backend, int retries = 3);

/// Step 3. Requires a typed proposal; schema failure yields all zeros,
/// flagged doubtful.
ScoreVector score_relation(const RelationProposal& proposal, const PairEvidence& ev, AgentBackend& backend,
                           int retries = 3);

struct ArbitrationContext {
    /// Edges accepted so far, checked for acyclicity.
    std::vector<TypedRelation> accepted;
    double doubt_threshold = 3.0;
};

/// Step 4. Confidence = mean score / 5; doubtful when the mean is below
/// the threshold, the arbiter overrides the proposal, or the relation
/// would break an axiom against `ctx.accepted`.
RelationDecision arbitrate(const RelationProposal& proposal, const ScoreVector& scores, const PairEvidence& ev,
                           AgentBackend& backend, const ArbitrationContext& ctx, int retries = 3);

/// Everything the personas see about one doubtful decision.
struct DoubtfulCase {
    RelationDecision decision;
    RelationProposal proposal;
    ScoreVector scores;
    PairEvidence evidence;
};

struct Vote {
    Persona persona = Persona::Teaching;
    TypedRelation relation;
    std::string rationale;
};

/// True if adding `r` to `accepted` closes a cycle of an acyclic type or
/// gives a pair a second relation type.
bool violates_axioms(const TypedRelation& r, const std::vector<TypedRelation>& accepted);

/// Strict majority over valid votes; None otherwise. Returns the relation
/// and its vote share.
std::pair<TypedRelation, double> tally(const std::vector<Vote>& votes, const std::string& a, const std::string& b);

/// Step 5. Blind round, then a round with peer summaries; strict majority
/// of the second round wins with confidence = vote share. Results that
/// break an axiom against `accepted` (or earlier corrections) get one more
/// vote with that relation excluded, then fall back to None.
std::vector<RelationDecision> cross_correct(const std::vector<DoubtfulCase>& doubtful, AgentBackend& backend,
                                            std::vector<TypedRelation> accepted, int retries = 3);

// ---------------------------------------------------------------------------
// Orchestration

struct PipelineConfig {
    /// A pair is examined when it co-occurs this often or its names overlap.
    std::size_t min_cooccurrence = 3;
    double min_name_overlap = 0.3;
    double doubt_threshold = 3.0;
    int retries = 3;
    /// Upper bound on concurrent backend calls.
    std::size_t max_in_flight = 4;
    /// Ablation switches.
    bool completion = true;
    bool cross_correction = true;
};

struct ExtractionResult {
    KcGraph graph;
    std::vector<ConceptProfile> profiles;
    /// One per examined pair, with kc_a/kc_b oriented as the final edge.
    std::vector<RelationDecision> decisions;
    /// Notes from graph assembly (dropped conflicts, cycles).
    std::vector<std::string> dropped;
    std::size_t candidate_pairs = 0;
};

/// Steps 1-5 over candidate pairs, then `graphs::build_kc_graph`.
/// Throws only when every backend call for every pair failed.
ExtractionResult extract_relations(const std::vector<ConceptProfile>& kcs, const InteractionLog& log,
                                   AgentBackend& backend, const PipelineConfig& cfg = {});

/// Decision export, one JSON object per line.
std::string decision_to_line(const RelationDecision& d);
RelationDecision decision_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Evaluation

/// Relation-quality scores in percent. Pred: gold pairs with any predicted
/// edge. Corr: gold pairs whose predicted type and orientation match.
/// Jacc: |P & G| / |P | G| over typed edges (symmetric types unordered).
struct RelationScores {
    double pred = 0.0;
    double corr = 0.0;
    double jacc = 0.0;
};

RelationScores evaluate_relations(const KcGraph& predicted, const std::vector<TypedRelation>& gold);

/// Gold file: one "src,dst,type" per line (comma or tab); a header line
/// and '#' comments are skipped.
std::vector<TypedRelation> read_gold_relations(std::istream& in);
std::vector<std::string> gold_to_lines(const std::vector<TypedRelation>& gold);
/// Typed edges of a graph in gold form (symmetric types once).
std::vector<TypedRelation> graph_relations(const KcGraph& g);

}  // namespace magekt::agents
