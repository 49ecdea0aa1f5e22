#include <doctest/doctest.h>

#include "magekt/graphs.hpp"
#include "magekt/random.hpp"
#include "magekt/synth.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

using namespace magekt;
using namespace magekt::graphs;

namespace {

std::vector<ConceptProfile> profiles(std::initializer_list<const char*> ids) {
    std::vector<ConceptProfile> out;
    for (auto id : ids) out.push_back({id, id, std::string("def ") + id, "cat", false});
    return out;
}

RelationDecision decide(const char* a, const char* b, RelationType t, double conf) {
    RelationDecision d;
    d.kc_a = a;
    d.kc_b = b;
    d.final_type = t;
    d.confidence = conf;
    return d;
}

std::vector<std::pair<std::size_t, std::size_t>> brute_topk(const std::vector<double>& v, std::size_t k) {
    std::set<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::vector<std::pair<double, std::size_t>> c;
        for (std::size_t j = 0; j < v.size(); ++j) {
            if (j != i) c.emplace_back(std::abs(v[i] - v[j]), j);
        }
        std::sort(c.begin(), c.end());
        for (std::size_t t = 0; t < std::min(k, c.size()); ++t) {
            pairs.emplace(std::min(i, c[t].second), std::max(i, c[t].second));
        }
    }
    return {pairs.begin(), pairs.end()};
}

irt::IrtParams params_for(const InteractionLog& log, std::vector<double> theta, std::vector<double> b) {
    irt::IrtParams p;
    auto s = log.students();
    auto q = log.questions();
    for (std::size_t i = 0; i < s.size(); ++i) p.theta[s[i]] = theta[i];
    for (std::size_t i = 0; i < q.size(); ++i) p.b[q[i]] = b[i];
    return p;
}

}  // namespace

TEST_CASE("similarity_weight closed forms") {
    CHECK(similarity_weight(0.3, 0.3, 2.0) == 1.0);
    CHECK(similarity_weight(1.0, 3.0, 2.0) == doctest::Approx(0.36787944117144233).epsilon(1e-15));
    CHECK(similarity_weight(0.0, 1e6, 1e-3) > 0.0);
    CHECK_THROWS_AS(similarity_weight(0.0, 1.0, 0.0), DomainError);
    CHECK_THROWS_AS(similarity_weight(0.0, 1.0, -1.0), DomainError);
}

TEST_CASE("similarity_weight is symmetric and scale consistent") {
    Rng rng(99);
    for (int i = 0; i < 2000; ++i) {
        const double x = rng.uniform(-5, 5), y = rng.uniform(-5, 5), s = rng.uniform(0.1, 3.0);
        CHECK(similarity_weight(x, y, s) == similarity_weight(y, x, s));
        // Powers of two scale exactly, so the identity is bitwise.
        CHECK(similarity_weight(4.0 * x, 4.0 * y, 4.0 * s) == similarity_weight(x, y, s));
        const double c = rng.uniform(0.5, 4.0);
        CHECK(similarity_weight(c * x, c * y, c * s) == doctest::Approx(similarity_weight(x, y, s)).epsilon(1e-12));
    }
}

TEST_CASE("top-k neighbours match brute force including ties") {
    Rng rng(5);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t n = 1 + rng.below(25);
        std::vector<double> v(n);
        for (auto& x : v) x = static_cast<double>(rng.below(6)) * 0.5;  // plenty of ties
        const std::size_t k = 1 + rng.below(5);
        CHECK(topk_neighbor_pairs(v, k) == brute_topk(v, k));
    }
}

TEST_CASE("build_sq_graph small cases") {
    SUBCASE("equal difficulties give a weight-1 edge") {
        const InteractionLog log({{"s", "q1", {"k"}, 1, 0}, {"s", "q2", {"k"}, 0, 1}});
        const auto g = build_sq_graph(log, params_for(log, {0.0}, {0.5, 0.5}));
        REQUIRE(g.qq_edges.size() == 1);
        CHECK(g.qq_edges[0].weight == 1.0);
        CHECK(g.qs_edges.size() == log.size());
    }
    SUBCASE("nearest neighbour with topk = 1") {
        const InteractionLog log({{"s", "q0", {"k"}, 1, 0}, {"s", "q1", {"k"}, 0, 1}, {"s", "q5", {"k"}, 0, 2}});
        GraphBuildConfig cfg;
        cfg.sigma_q = 1.0;
        cfg.topk_q = 1;
        const auto g = build_sq_graph(log, params_for(log, {0.0}, {0.0, 1.0, 5.0}), cfg);
        // q0 <-> q1 (mutual nearest), q5 -> q1 (its nearest); q0 never links to q5.
        REQUIRE(g.qq_edges.size() == 2);
        CHECK(g.qq_edges[0].a == 0);
        CHECK(g.qq_edges[0].b == 1);
        CHECK(g.qq_edges[0].weight == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
        CHECK(g.qq_edges[1].a == 1);
        CHECK(g.qq_edges[1].b == 2);
    }
    SUBCASE("missing parameters are an error") {
        const InteractionLog log({{"s", "q1", {"k"}, 1, 0}});
        irt::IrtParams p;
        p.theta["s"] = 0.0;
        CHECK_THROWS_AS(build_sq_graph(log, p), DomainError);
    }
}

TEST_CASE("build_sq_graph is deterministic and round-trips bit-exactly") {
    const auto planted = synth::planted_rasch(40, 25, 77);
    const auto p = irt::fit_rasch(planted.log);
    GraphBuildConfig cfg;
    cfg.topk_q = 3;
    cfg.topk_s = 4;
    const auto g1 = build_sq_graph(planted.log, p, cfg);
    const auto g2 = build_sq_graph(planted.log, p, cfg);
    CHECK(g1 == g2);
    for (const auto& e : g1.qq_edges) {
        CHECK(e.weight > 0.0);
        CHECK(e.weight <= 1.0);
        CHECK(e.a < e.b);
    }
    const auto lines = sq_graph_to_lines(g1);
    std::stringstream ss;
    for (auto& l : lines) ss << l << '\n';
    const auto back = sq_graph_from_lines(ss);
    CHECK(back == g1);
    CHECK(graph_version(sq_graph_to_lines(back)) == graph_version(lines));
}

TEST_CASE("build_kc_graph basic relations") {
    SUBCASE("one directed prerequisite") {
        const auto r = build_kc_graph(profiles({"A", "B"}), {decide("A", "B", RelationType::PredecessorSuccessor, 0.9)});
        REQUIRE(r.graph.edges().size() == 1);
        CHECK(r.graph.edges()[0].src == 0);
        CHECK(r.graph.edges()[0].dst == 1);
    }
    SUBCASE("equivalence is stored both ways") {
        const auto r = build_kc_graph(profiles({"A", "B"}), {decide("A", "B", RelationType::Equivalence, 0.9)});
        REQUIRE(r.graph.edges().size() == 2);
        CHECK(validate_kc_axioms(r.graph).empty());
    }
    SUBCASE("a prerequisite 3-cycle loses its weakest edge") {
        const auto r = build_kc_graph(profiles({"A", "B", "C"}),
                                      {decide("A", "B", RelationType::PredecessorSuccessor, 0.9),
                                       decide("B", "C", RelationType::PredecessorSuccessor, 0.8),
                                       decide("C", "A", RelationType::PredecessorSuccessor, 0.7)});
        REQUIRE(r.graph.edges().size() == 2);
        REQUIRE(r.dropped.size() == 1);
        for (const auto& e : r.graph.edges()) CHECK_FALSE((e.src == 2 && e.dst == 0));
        CHECK(validate_kc_axioms(r.graph).empty());
    }
    SUBCASE("highest confidence wins; ties between types give no edge") {
        auto r = build_kc_graph(profiles({"A", "B"}), {decide("A", "B", RelationType::Sibling, 0.6),
                                                        decide("B", "A", RelationType::PredecessorSuccessor, 0.8)});
        REQUIRE(r.graph.edges().size() == 1);
        CHECK(r.graph.edges()[0].type == RelationType::PredecessorSuccessor);
        CHECK(r.graph.edges()[0].src == 1);
        r = build_kc_graph(profiles({"A", "B"}), {decide("A", "B", RelationType::Sibling, 0.8),
                                                   decide("A", "B", RelationType::Association, 0.8)});
        CHECK(r.graph.edges().empty());
    }
    SUBCASE("unknown KC is an error") {
        CHECK_THROWS_AS(build_kc_graph(profiles({"A"}), {decide("A", "Z", RelationType::Sibling, 0.5)}), DomainError);
    }
}

TEST_CASE("validate_kc_axioms reports each violation kind") {
    const auto nodes = profiles({"A", "B", "C", "D"});
    SUBCASE("valid mixed graph") {
        const KcGraph g(nodes, {{0, 1, RelationType::PredecessorSuccessor, 0.9, ""},
                                {1, 2, RelationType::Containment, 0.8, ""},
                                {2, 3, RelationType::Sibling, 0.7, ""},
                                {3, 2, RelationType::Sibling, 0.7, ""},
                                {0, 3, RelationType::Association, 0.6, ""},
                                {3, 0, RelationType::Association, 0.6, ""}});
        CHECK(validate_kc_axioms(g).empty());
    }
    SUBCASE("mutual containment") {
        const KcGraph g(nodes, {{0, 1, RelationType::Containment, 0.9, ""}, {1, 0, RelationType::Containment, 0.9, ""}});
        const auto v = validate_kc_axioms(g);
        REQUIRE(v.size() == 1);
        CHECK(v[0].rule == "containment cycle");
    }
    SUBCASE("prerequisite plus equivalence on one pair") {
        const KcGraph g(nodes, {{0, 1, RelationType::PredecessorSuccessor, 0.9, ""},
                                {0, 1, RelationType::Equivalence, 0.9, ""},
                                {1, 0, RelationType::Equivalence, 0.9, ""}});
        const auto v = validate_kc_axioms(g);
        REQUIRE(v.size() == 1);
        CHECK(v[0].rule == "multiple relation types");
    }
    SUBCASE("one-directional sibling") {
        const KcGraph g(nodes, {{0, 1, RelationType::Sibling, 0.9, ""}});
        const auto v = validate_kc_axioms(g);
        REQUIRE(v.size() == 1);
        CHECK(v[0].rule == "asymmetric Sibling");
    }
    SUBCASE("prerequisite 3-cycle") {
        const KcGraph g(nodes, {{0, 1, RelationType::PredecessorSuccessor, 0.9, ""},
                                {1, 2, RelationType::PredecessorSuccessor, 0.9, ""},
                                {2, 0, RelationType::PredecessorSuccessor, 0.9, ""}});
        const auto v = validate_kc_axioms(g);
        REQUIRE(v.size() == 1);
        CHECK(v[0].rule == "predecessor cycle");
    }
}

TEST_CASE("random decisions always assemble into an axiom-clean graph") {
    Rng rng(123);
    const std::vector<std::string> ids{"a", "b", "c", "d", "e", "f"};
    std::vector<ConceptProfile> nodes;
    for (auto& id : ids) nodes.push_back({id, id, id, "c", false});
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<RelationDecision> ds;
        for (int i = 0; i < 15; ++i) {
            const auto a = rng.below(ids.size()), b = rng.below(ids.size());
            RelationDecision d;
            d.kc_a = ids[a];
            d.kc_b = ids[b];
            d.final_type = static_cast<RelationType>(rng.below(6));
            d.confidence = static_cast<double>(rng.below(5)) / 4.0;
            ds.push_back(d);
        }
        const auto r = build_kc_graph(nodes, ds);
        CHECK(validate_kc_axioms(r.graph).empty());
        std::stringstream ss;
        for (auto& l : kc_graph_to_lines(r.graph)) ss << l << '\n';
        CHECK(kc_graph_from_lines(ss) == r.graph);
    }
}
