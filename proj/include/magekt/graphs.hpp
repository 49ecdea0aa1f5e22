#pragma once

#include "magekt/core.hpp"
#include "magekt/irt.hpp"

#include <istream>
#include <optional>
#include <string>
#include <vector>

namespace magekt::graphs {

struct GraphBuildConfig {
    /// Unset means "standard deviation of the attribute" (1.0 if that is 0).
    std::optional<double> sigma_q;
    std::optional<double> sigma_s;
    std::size_t topk_q = 20;
    std::size_t topk_s = 20;

    void validate() const;
};

/// exp(-|x - y| / sigma). Values that would underflow to 0 are returned as
/// the smallest subnormal so the weight stays in (0, 1].
double similarity_weight(double x, double y, double sigma);

/// Population standard deviation; 1.0 for constant or empty input.
double default_sigma(const std::vector<double>& values);

/// For each index, its `k` nearest other indices by |v_i - v_j| (ties go to
/// the smaller index), as sorted (a < b) unordered pairs, union over nodes.
std::vector<std::pair<std::size_t, std::size_t>> topk_neighbor_pairs(const std::vector<double>& values,
                                                                     std::size_t k);

/// One response edge per interaction, plus top-k similarity edges among
/// questions (by difficulty) and students (by ability).
SqGraph build_sq_graph(const InteractionLog& log, const irt::IrtParams& params,
                       const GraphBuildConfig& cfg = {});

struct KcBuildResult {
    KcGraph graph;
    /// Human-readable notes on decisions that did not become edges.
    std::vector<std::string> dropped;
};

/// Assembles a KC graph that satisfies every axiom: per unordered pair the
/// highest-confidence decision wins (a tie between different relations
/// yields no edge), symmetric relations are stored in both directions, and
/// acyclic relation types are added by descending confidence, skipping any
/// edge that would close a cycle.
KcBuildResult build_kc_graph(std::vector<ConceptProfile> nodes,
                             const std::vector<RelationDecision>& decisions);

struct AxiomViolation {
    std::string rule;
    std::string detail;
};

std::vector<AxiomViolation> validate_kc_axioms(const KcGraph& graph);

/// True if adding src->dst to the `type` edges of `edges` closes a cycle.
bool would_close_cycle(std::size_t node_count, const std::vector<KcEdge>& edges, RelationType type,
                       std::size_t src, std::size_t dst);

std::vector<std::string> kc_graph_to_lines(const KcGraph& graph);
KcGraph kc_graph_from_lines(std::istream& in);
std::vector<std::string> sq_graph_to_lines(const SqGraph& graph);
SqGraph sq_graph_from_lines(std::istream& in);

/// Content hash of the serialized graph, used to tie downstream artifacts to
/// the graph version they were built from.
std::string graph_version(const std::vector<std::string>& lines);

}  // namespace magekt::graphs
