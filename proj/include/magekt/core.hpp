#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace magekt {

/// Error raised for malformed domain inputs (bad ids, broken preconditions).
class DomainError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Interaction {
    std::string student_id;
    std::string question_id;
    std::vector<std::string> kc_ids;
    int correct = 0;
    double timestamp = 0.0;

    bool operator==(const Interaction&) const = default;
};

/// Time-ordered interaction records. Records are kept in source order;
/// `student_sequences()` gives the per-student views sorted by timestamp
/// (ties keep source order).
class InteractionLog {
public:
    InteractionLog() = default;
    explicit InteractionLog(std::vector<Interaction> records);

    const std::vector<Interaction>& records() const { return records_; }
    std::size_t size() const { return records_.size(); }
    bool empty() const { return records_.empty(); }

    /// student id -> record indices, stable-sorted by timestamp.
    std::map<std::string, std::vector<std::size_t>> student_sequences() const;

    /// Sorted, de-duplicated id lists.
    std::vector<std::string> students() const;
    std::vector<std::string> questions() const;
    std::vector<std::string> kcs() const;

    /// Copy with records reordered student-by-student (sorted id) and by
    /// timestamp within a student.
    InteractionLog sorted_by_student_time() const;

    bool operator==(const InteractionLog&) const = default;

private:
    std::vector<Interaction> records_;
};

struct LogViolation {
    std::size_t record_index = 0;
    std::string rule;
    std::string detail;
};

/// Checks record-level invariants (non-empty KC set, binary correctness,
/// non-decreasing timestamps within each student in source order).
std::vector<LogViolation> validate_log(const InteractionLog& log);

/// Dense id <-> index mapping; indices follow construction order (callers
/// pass sorted ids for determinism).
class Interner {
public:
    Interner() = default;
    explicit Interner(std::vector<std::string> ids);

    std::size_t size() const { return ids_.size(); }
    const std::string& id(std::size_t index) const { return ids_.at(index); }
    const std::vector<std::string>& ids() const { return ids_; }
    std::optional<std::size_t> find(std::string_view id) const;
    std::size_t at(std::string_view id) const;

private:
    std::vector<std::string> ids_;
    std::unordered_map<std::string, std::size_t> index_;
};

enum class RelationType {
    None,
    Association,
    Containment,
    Equivalence,
    Sibling,
    PredecessorSuccessor,
};

std::string_view to_string(RelationType type);
RelationType relation_from_string(std::string_view name);

/// Equivalence, Sibling and Association carry no direction.
constexpr bool is_symmetric(RelationType type) {
    return type == RelationType::Association || type == RelationType::Equivalence ||
           type == RelationType::Sibling;
}

/// Containment and PredecessorSuccessor edge sets must be acyclic.
constexpr bool is_acyclic_type(RelationType type) {
    return type == RelationType::Containment || type == RelationType::PredecessorSuccessor;
}

inline constexpr RelationType kAllRelationTypes[] = {
    RelationType::Association, RelationType::Containment, RelationType::Equivalence,
    RelationType::Sibling,     RelationType::PredecessorSuccessor,
};

struct ConceptProfile {
    std::string kc_id;
    std::string name;
    std::string definition;
    std::string category;
    /// Set when the profile came from a degraded fallback.
    bool degraded = false;

    bool operator==(const ConceptProfile&) const = default;
};

/// A typed KC-KC edge. For Containment, `src` contains `dst`; for
/// PredecessorSuccessor, `src` must be mastered before `dst`.
struct KcEdge {
    std::size_t src = 0;
    std::size_t dst = 0;
    RelationType type = RelationType::None;
    double confidence = 0.0;
    std::string evidence;

    bool operator==(const KcEdge&) const = default;
};

/// Multi-relational concept graph. Symmetric types are stored in both
/// directions. Construction does not check axioms; see
/// `graphs::validate_kc_axioms`.
class KcGraph {
public:
    KcGraph() = default;
    KcGraph(std::vector<ConceptProfile> nodes, std::vector<KcEdge> edges);

    const Interner& interner() const { return interner_; }
    const std::vector<ConceptProfile>& nodes() const { return nodes_; }
    const std::vector<KcEdge>& edges() const { return edges_; }
    std::size_t node_count() const { return nodes_.size(); }

    /// Undirected adjacency (edge indices touching each node).
    const std::vector<std::vector<std::size_t>>& incident() const { return incident_; }

    bool operator==(const KcGraph& other) const {
        return nodes_ == other.nodes_ && edges_ == other.edges_;
    }

private:
    std::vector<ConceptProfile> nodes_;
    Interner interner_;
    std::vector<KcEdge> edges_;
    std::vector<std::vector<std::size_t>> incident_;
};

struct QsEdge {
    std::size_t question = 0;
    std::size_t student = 0;
    int label = 0;

    bool operator==(const QsEdge&) const = default;
};

struct WeightedEdge {
    std::size_t a = 0;
    std::size_t b = 0;
    double weight = 0.0;

    bool operator==(const WeightedEdge&) const = default;
};

/// Student-question graph: response edges plus IRT-similarity edges.
/// Similarity edges are stored once per unordered pair with a < b.
struct SqGraph {
    Interner students;
    Interner questions;
    std::vector<double> theta;
    std::vector<double> difficulty;
    std::vector<QsEdge> qs_edges;
    std::vector<WeightedEdge> qq_edges;
    std::vector<WeightedEdge> ss_edges;

    bool operator==(const SqGraph& other) const {
        return students.ids() == other.students.ids() &&
               questions.ids() == other.questions.ids() && theta == other.theta &&
               difficulty == other.difficulty && qs_edges == other.qs_edges &&
               qq_edges == other.qq_edges && ss_edges == other.ss_edges;
    }
};

enum class DecisionStep { Arbitration, CrossCorrection };

std::string_view to_string(DecisionStep step);

/// Final relation for a KC pair, with the trail of agent outputs that led
/// to it. `audit` holds serialized agent responses in call order.
struct RelationDecision {
    std::string kc_a;
    std::string kc_b;
    RelationType final_type = RelationType::None;
    double confidence = 0.0;
    DecisionStep provenance = DecisionStep::Arbitration;
    bool doubtful = false;
    std::vector<std::string> audit;
};

}  // namespace magekt
