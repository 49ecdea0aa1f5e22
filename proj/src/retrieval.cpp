#include "magekt/retrieval.hpp"

#include "magekt/jsonl.hpp"

#include <algorithm>
#include <map>
#include <unordered_map>
#include <unordered_set>

namespace magekt::retrieval {

namespace {

constexpr std::size_t kNotFound = static_cast<std::size_t>(-1);

// Multi-source BFS by layers. Within a layer nodes are ordered by the best
// weight of an edge reaching them from the previous layer, then by id.
template <typename Neighbors>
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> layered_bfs(std::size_t node_count,
                                                                          const std::vector<std::size_t>& seeds,
                                                                          std::size_t hops, std::size_t budget,
                                                                          Neighbors&& neighbors) {
    std::vector<std::size_t> hop(node_count, kNotFound);
    std::vector<std::size_t> order, order_hops;
    for (auto s : seeds) {
        if (order.size() >= budget) break;
        if (hop[s] != kNotFound) continue;
        hop[s] = 0;
        order.push_back(s);
        order_hops.push_back(0);
    }
    std::vector<std::size_t> frontier = order;
    for (std::size_t h = 1; h <= hops && !frontier.empty() && order.size() < budget; ++h) {
        std::map<std::size_t, double> best;
        for (auto u : frontier) {
            neighbors(u, [&](std::size_t v, double w) {
                if (hop[v] != kNotFound) return;
                auto [it, inserted] = best.emplace(v, w);
                if (!inserted) it->second = std::max(it->second, w);
            });
        }
        std::vector<std::pair<double, std::size_t>> layer;
        layer.reserve(best.size());
        for (auto [v, w] : best) layer.emplace_back(-w, v);
        std::sort(layer.begin(), layer.end());
        frontier.clear();
        for (auto [negw, v] : layer) {
            if (order.size() >= budget) break;
            hop[v] = h;
            order.push_back(v);
            order_hops.push_back(h);
            frontier.push_back(v);
        }
    }
    return {order, order_hops};
}

}  // namespace

SqRetriever::SqRetriever(const SqGraph& graph) : graph_(graph) {
    const std::size_t ns = graph.students.size();
    const std::size_t n = ns + graph.questions.size();
    std::vector<std::unordered_map<std::size_t, double>> arcs(n);
    auto link = [&](std::size_t a, std::size_t b, double w) {
        auto& ab = arcs[a][b];
        ab = std::max(ab, w);
        auto& ba = arcs[b][a];
        ba = std::max(ba, w);
    };
    for (const auto& e : graph.qs_edges) link(ns + e.question, e.student, 1.0);
    for (const auto& e : graph.qq_edges) link(ns + e.a, ns + e.b, e.weight);
    for (const auto& e : graph.ss_edges) link(e.a, e.b, e.weight);
    adj_.resize(n);
    for (std::size_t u = 0; u < n; ++u) {
        for (auto [v, w] : arcs[u]) adj_[u].push_back({v, w});
        std::sort(adj_[u].begin(), adj_[u].end(), [](const Arc& a, const Arc& b) { return a.to < b.to; });
    }
}

std::vector<std::size_t> SqRetriever::seeds_for(const PredictionInstance& inst,
                                                std::vector<std::string>& unknown) const {
    const std::size_t ns = graph_.students.size();
    std::vector<std::size_t> seeds;
    if (auto s = graph_.students.find(inst.student_id)) {
        seeds.push_back(*s);
    } else {
        unknown.push_back(inst.student_id);
    }
    // Most recent history first so a tight budget keeps the freshest context.
    std::unordered_set<std::size_t> seen;
    for (auto it = inst.history.rbegin(); it != inst.history.rend(); ++it) {
        if (auto q = graph_.questions.find(it->first)) {
            if (seen.insert(*q).second) seeds.push_back(ns + *q);
        } else if (std::find(unknown.begin(), unknown.end(), it->first) == unknown.end()) {
            unknown.push_back(it->first);
        }
    }
    if (seeds.empty()) throw DomainError("retrieve_sq_subgraph: no seed found in graph");
    return seeds;
}

Subgraph SqRetriever::induce(std::vector<std::size_t> order, std::vector<std::size_t> hops,
                             std::size_t seed_count, std::vector<std::string> unknown) const {
    const std::size_t ns = graph_.students.size();
    Subgraph sub;
    sub.unknown_seeds = std::move(unknown);
    std::unordered_map<std::size_t, std::size_t> pos;
    for (std::size_t i = 0; i < order.size(); ++i) {
        const auto g = order[i];
        pos.emplace(g, i);
        sub.nodes.push_back(g < ns ? SubNode{NodeKind::Student, g, hops[i]}
                                   : SubNode{NodeKind::Question, g - ns, hops[i]});
        if (i < seed_count) sub.seeds.push_back(i);
    }
    auto find = [&](std::size_t g) {
        auto it = pos.find(g);
        return it == pos.end() ? kNotFound : it->second;
    };
    for (std::size_t e = 0; e < graph_.qs_edges.size(); ++e) {
        const auto& edge = graph_.qs_edges[e];
        const auto u = find(ns + edge.question), v = find(edge.student);
        if (u != kNotFound && v != kNotFound) sub.edges.push_back({u, v, EdgeKind::Response, 1.0, edge.label, RelationType::None, e});
    }
    for (std::size_t e = 0; e < graph_.qq_edges.size(); ++e) {
        const auto& edge = graph_.qq_edges[e];
        const auto u = find(ns + edge.a), v = find(ns + edge.b);
        if (u != kNotFound && v != kNotFound) sub.edges.push_back({u, v, EdgeKind::QuestionSimilarity, edge.weight, 0, RelationType::None, e});
    }
    for (std::size_t e = 0; e < graph_.ss_edges.size(); ++e) {
        const auto& edge = graph_.ss_edges[e];
        const auto u = find(edge.a), v = find(edge.b);
        if (u != kNotFound && v != kNotFound) sub.edges.push_back({u, v, EdgeKind::StudentSimilarity, edge.weight, 0, RelationType::None, e});
    }
    return sub;
}

Subgraph SqRetriever::retrieve(const PredictionInstance& inst, std::size_t hops, std::size_t budget) const {
    std::vector<std::string> unknown;
    auto seeds = seeds_for(inst, unknown);
    const std::size_t seed_count = std::min(seeds.size(), budget);
    auto [order, order_hops] = layered_bfs(adj_.size(), seeds, hops, budget, [&](std::size_t u, auto&& visit) {
        for (const auto& a : adj_[u]) visit(a.to, a.weight);
    });
    return induce(std::move(order), std::move(order_hops), seed_count, std::move(unknown));
}

Subgraph SqRetriever::full(const PredictionInstance& inst, std::size_t budget) const {
    std::vector<std::string> unknown;
    auto seeds = seeds_for(inst, unknown);
    std::vector<char> taken(adj_.size(), 0);
    std::vector<std::size_t> order;
    for (auto s : seeds) {
        if (order.size() < budget && !taken[s]) {
            taken[s] = 1;
            order.push_back(s);
        }
    }
    const std::size_t seed_count = order.size();
    for (std::size_t g = 0; g < adj_.size() && order.size() < budget; ++g) {
        if (!taken[g]) order.push_back(g);
    }
    std::vector<std::size_t> hops(order.size(), 0);
    return induce(std::move(order), std::move(hops), seed_count, std::move(unknown));
}

KcRetriever::KcRetriever(const KcGraph& graph) : graph_(graph) {}

std::vector<std::size_t> KcRetriever::seeds_for(const std::vector<std::string>& target_kcs,
                                                std::vector<std::string>& unknown) const {
    std::vector<std::size_t> seeds;
    for (const auto& k : target_kcs) {
        if (auto i = graph_.interner().find(k)) {
            if (std::find(seeds.begin(), seeds.end(), *i) == seeds.end()) seeds.push_back(*i);
        } else {
            unknown.push_back(k);
        }
    }
    if (seeds.empty()) throw DomainError("retrieve_kc_subgraph: no target KC found in graph");
    return seeds;
}

Subgraph KcRetriever::induce(std::vector<std::size_t> order, std::vector<std::size_t> hops,
                             std::size_t seed_count, std::vector<std::string> unknown) const {
    Subgraph sub;
    sub.unknown_seeds = std::move(unknown);
    std::unordered_map<std::size_t, std::size_t> pos;
    for (std::size_t i = 0; i < order.size(); ++i) {
        pos.emplace(order[i], i);
        sub.nodes.push_back({NodeKind::Concept, order[i], hops[i]});
        if (i < seed_count) sub.seeds.push_back(i);
    }
    const auto& edges = graph_.edges();
    for (std::size_t e = 0; e < edges.size(); ++e) {
        auto u = pos.find(edges[e].src), v = pos.find(edges[e].dst);
        if (u != pos.end() && v != pos.end()) {
            sub.edges.push_back({u->second, v->second, EdgeKind::Concept, edges[e].confidence, 0, edges[e].type, e});
        }
    }
    return sub;
}

Subgraph KcRetriever::retrieve(const std::vector<std::string>& target_kcs, std::size_t hops,
                               std::size_t budget) const {
    std::vector<std::string> unknown;
    auto seeds = seeds_for(target_kcs, unknown);
    const std::size_t seed_count = std::min(seeds.size(), budget);
    const auto& edges = graph_.edges();
    const auto& incident = graph_.incident();
    auto [order, order_hops] =
        layered_bfs(graph_.node_count(), seeds, hops, budget, [&](std::size_t u, auto&& visit) {
            for (auto e : incident[u]) {
                const auto& edge = edges[e];
                visit(edge.src == u ? edge.dst : edge.src, edge.confidence);
            }
        });
    return induce(std::move(order), std::move(order_hops), seed_count, std::move(unknown));
}

Subgraph KcRetriever::full(const std::vector<std::string>& target_kcs, std::size_t budget) const {
    std::vector<std::string> unknown;
    auto seeds = seeds_for(target_kcs, unknown);
    std::vector<char> taken(graph_.node_count(), 0);
    std::vector<std::size_t> order;
    for (auto s : seeds) {
        if (order.size() < budget) {
            taken[s] = 1;
            order.push_back(s);
        }
    }
    const std::size_t seed_count = order.size();
    for (std::size_t g = 0; g < graph_.node_count() && order.size() < budget; ++g) {
        if (!taken[g]) order.push_back(g);
    }
    std::vector<std::size_t> hops(order.size(), 0);
    return induce(std::move(order), std::move(hops), seed_count, std::move(unknown));
}

Subgraph retrieve_sq_subgraph(const SqGraph& g, const PredictionInstance& inst, std::size_t hops,
                              std::size_t budget) {
    return SqRetriever(g).retrieve(inst, hops, budget);
}

Subgraph retrieve_kc_subgraph(const KcGraph& g, const std::vector<std::string>& target_kcs, std::size_t hops,
                              std::size_t budget) {
    return KcRetriever(g).retrieve(target_kcs, hops, budget);
}

namespace {

const char* kind_name(NodeKind k) {
    switch (k) {
        case NodeKind::Student: return "s";
        case NodeKind::Question: return "q";
        case NodeKind::Concept: return "k";
    }
    return "?";
}

NodeKind kind_from(const std::string& s) {
    if (s == "s") return NodeKind::Student;
    if (s == "q") return NodeKind::Question;
    if (s == "k") return NodeKind::Concept;
    throw DomainError("bad node kind in cache: " + s);
}

}  // namespace

std::string subgraph_to_line(const std::string& key, const Subgraph& sub) {
    nlohmann::json nodes = nlohmann::json::array(), edges = nlohmann::json::array();
    for (const auto& n : sub.nodes) nodes.push_back({kind_name(n.kind), n.index, n.hop});
    for (const auto& e : sub.edges) {
        edges.push_back({e.u, e.v, static_cast<int>(e.kind), e.parent_edge});
    }
    nlohmann::json weights = nlohmann::json::array();
    std::vector<double> w;
    for (const auto& e : sub.edges) w.push_back(e.weight);
    std::vector<std::string> labels;
    for (const auto& e : sub.edges) {
        labels.push_back(e.kind == EdgeKind::Concept ? std::string(to_string(e.relation)) : std::to_string(e.label));
    }
    return jsonl::LineWriter()
        .field("key", key)
        .raw("nodes", nodes.dump())
        .raw("edges", edges.dump())
        .field("weights", w)
        .field("labels", labels)
        .field("seeds", sub.seeds.size())
        .field("unknown", sub.unknown_seeds)
        .str();
}

std::pair<std::string, Subgraph> subgraph_from_line(const std::string& line) {
    const auto j = nlohmann::json::parse(line);
    Subgraph sub;
    for (const auto& n : j.at("nodes")) {
        sub.nodes.push_back({kind_from(n.at(0).get<std::string>()), n.at(1).get<std::size_t>(), n.at(2).get<std::size_t>()});
    }
    const auto weights = j.at("weights").get<std::vector<double>>();
    const auto labels = j.at("labels").get<std::vector<std::string>>();
    std::size_t i = 0;
    for (const auto& e : j.at("edges")) {
        SubEdge edge;
        edge.u = e.at(0).get<std::size_t>();
        edge.v = e.at(1).get<std::size_t>();
        edge.kind = static_cast<EdgeKind>(e.at(2).get<int>());
        edge.parent_edge = e.at(3).get<std::size_t>();
        edge.weight = weights.at(i);
        if (edge.kind == EdgeKind::Concept) {
            edge.relation = relation_from_string(labels.at(i));
        } else {
            edge.label = std::stoi(labels.at(i));
        }
        sub.edges.push_back(edge);
        ++i;
    }
    const auto n_seeds = j.at("seeds").get<std::size_t>();
    for (std::size_t s = 0; s < n_seeds; ++s) sub.seeds.push_back(s);
    sub.unknown_seeds = j.at("unknown").get<std::vector<std::string>>();
    return {j.at("key").get<std::string>(), std::move(sub)};
}

std::string instance_key(const PredictionInstance& inst, std::size_t hops, std::size_t kc_hops,
                         const std::string& graph_version) {
    std::string text = inst.student_id + "|" + inst.target_question + "|" + std::to_string(inst.history.size()) + "|" +
                       std::to_string(hops) + "|" + std::to_string(kc_hops) + "|" + graph_version;
    for (const auto& [q, r] : inst.history) text += "|" + q + ":" + std::to_string(r);
    return jsonl::hex64(jsonl::fnv1a(text));
}

}  // namespace magekt::retrieval
