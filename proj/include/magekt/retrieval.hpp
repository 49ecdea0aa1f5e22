#pragma once

#include "magekt/core.hpp"

#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace magekt::retrieval {

struct PredictionInstance {
    std::string student_id;
    /// (question id, correctness) in time order.
    std::vector<std::pair<std::string, int>> history;
    std::string target_question;
    std::vector<std::string> target_kcs;
};

enum class NodeKind { Student, Question, Concept };
enum class EdgeKind { Response, QuestionSimilarity, StudentSimilarity, Concept };

struct SubNode {
    NodeKind kind = NodeKind::Question;
    /// Index into the parent graph's interner for this kind.
    std::size_t index = 0;
    std::size_t hop = 0;

    bool operator==(const SubNode&) const = default;
};

struct SubEdge {
    /// Positions in `Subgraph::nodes`.
    std::size_t u = 0;
    std::size_t v = 0;
    EdgeKind kind = EdgeKind::Response;
    double weight = 1.0;
    /// Response label for Response edges.
    int label = 0;
    RelationType relation = RelationType::None;
    /// Index into the parent edge list of the matching kind.
    std::size_t parent_edge = 0;

    bool operator==(const SubEdge&) const = default;
};

/// Induced subgraph. Seeds come first in `nodes`, in seed order; remaining
/// nodes follow by (hop, descending connecting-edge weight, parent index).
struct Subgraph {
    std::vector<SubNode> nodes;
    std::vector<SubEdge> edges;
    std::vector<std::size_t> seeds;
    /// Seed ids that were not present in the parent graph.
    std::vector<std::string> unknown_seeds;
};

inline constexpr std::size_t kUnlimited = std::numeric_limits<std::size_t>::max();

/// Precomputed adjacency over an SqGraph. Holds a reference; the graph must
/// outlive the retriever. Read-only and safe to share across threads.
class SqRetriever {
public:
    explicit SqRetriever(const SqGraph& graph);

    /// Seeds = {student} + history questions; union of <= hops neighborhoods
    /// over response and similarity edges, capped at `budget` nodes.
    /// Throws DomainError if no seed is known.
    Subgraph retrieve(const PredictionInstance& inst, std::size_t hops,
                      std::size_t budget = kUnlimited) const;

    /// Every node (seeds first, then parent order), capped at `budget`.
    Subgraph full(const PredictionInstance& inst, std::size_t budget = kUnlimited) const;

    const SqGraph& graph() const { return graph_; }

private:
    struct Arc {
        std::size_t to;
        double weight;
    };
    std::vector<std::size_t> seeds_for(const PredictionInstance& inst, std::vector<std::string>& unknown) const;
    Subgraph induce(std::vector<std::size_t> order, std::vector<std::size_t> hops, std::size_t seed_count,
                    std::vector<std::string> unknown) const;

    const SqGraph& graph_;
    /// Global node ids: students [0, S), questions [S, S + Q).
    std::vector<std::vector<Arc>> adj_;
};

class KcRetriever {
public:
    explicit KcRetriever(const KcGraph& graph);

    /// Seeds = target KCs; hops ignore edge direction.
    /// Throws DomainError if none of the target KCs is in the graph.
    Subgraph retrieve(const std::vector<std::string>& target_kcs, std::size_t hops,
                      std::size_t budget = kUnlimited) const;

    Subgraph full(const std::vector<std::string>& target_kcs, std::size_t budget = kUnlimited) const;

    const KcGraph& graph() const { return graph_; }

private:
    std::vector<std::size_t> seeds_for(const std::vector<std::string>& target_kcs,
                                       std::vector<std::string>& unknown) const;
    Subgraph induce(std::vector<std::size_t> order, std::vector<std::size_t> hops, std::size_t seed_count,
                    std::vector<std::string> unknown) const;

    const KcGraph& graph_;
};

Subgraph retrieve_sq_subgraph(const SqGraph& g, const PredictionInstance& inst, std::size_t hops,
                              std::size_t budget = kUnlimited);
Subgraph retrieve_kc_subgraph(const KcGraph& g, const std::vector<std::string>& target_kcs, std::size_t hops,
                              std::size_t budget = kUnlimited);

/// Cache line: instance key -> node and edge lists.
std::string subgraph_to_line(const std::string& key, const Subgraph& sub);
std::pair<std::string, Subgraph> subgraph_from_line(const std::string& line);
std::string instance_key(const PredictionInstance& inst, std::size_t hops, std::size_t kc_hops,
                         const std::string& graph_version);

}  // namespace magekt::retrieval
