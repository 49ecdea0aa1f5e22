#include "magekt/graphs.hpp"

#include "magekt/jsonl.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <set>

namespace magekt::graphs {

void GraphBuildConfig::validate() const {
    if (sigma_q && !(*sigma_q > 0.0)) throw DomainError("sigma_q must be positive");
    if (sigma_s && !(*sigma_s > 0.0)) throw DomainError("sigma_s must be positive");
    if (topk_q < 1 || topk_s < 1) throw DomainError("topk must be at least 1");
}

double similarity_weight(double x, double y, double sigma) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw DomainError("similarity_weight: sigma must be positive");
    if (!std::isfinite(x) || !std::isfinite(y)) throw DomainError("similarity_weight: non-finite input");
    const double w = std::exp(-std::abs(x - y) / sigma);
    return std::max(w, std::numeric_limits<double>::denorm_min());
}

double default_sigma(const std::vector<double>& values) {
    if (values.empty()) return 1.0;
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(values.size());
    const double sd = std::sqrt(var);
    return sd > 0.0 ? sd : 1.0;
}

std::vector<std::pair<std::size_t, std::size_t>> topk_neighbor_pairs(const std::vector<double>& values,
                                                                     std::size_t k) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return values[a] != values[b] ? values[a] < values[b] : a < b;
    });

    std::set<std::pair<std::size_t, std::size_t>> pairs;
    std::vector<std::pair<double, std::size_t>> cand;
    for (std::size_t pos = 0; pos < n; ++pos) {
        const std::size_t i = order[pos];
        const double xi = values[i];
        cand.clear();
        std::ptrdiff_t left = static_cast<std::ptrdiff_t>(pos) - 1;
        std::size_t right = pos + 1;
        auto dist_left = [&] {
            return left >= 0 ? std::abs(xi - values[order[static_cast<std::size_t>(left)]])
                             : std::numeric_limits<double>::infinity();
        };
        auto dist_right = [&] {
            return right < n ? std::abs(xi - values[order[right]]) : std::numeric_limits<double>::infinity();
        };
        // Walk outward; keep going past k while the next candidate ties the
        // current boundary distance so tie-breaking sees every contender.
        while (true) {
            const double dl = dist_left(), dr = dist_right();
            const double next = std::min(dl, dr);
            if (std::isinf(next)) break;
            if (cand.size() >= k && next > cand.back().first) break;
            if (dl <= dr) {
                cand.emplace_back(dl, order[static_cast<std::size_t>(left)]);
                --left;
            } else {
                cand.emplace_back(dr, order[right]);
                ++right;
            }
        }
        std::sort(cand.begin(), cand.end());
        for (std::size_t c = 0; c < std::min(k, cand.size()); ++c) {
            const std::size_t j = cand[c].second;
            pairs.emplace(std::min(i, j), std::max(i, j));
        }
    }
    return {pairs.begin(), pairs.end()};
}

SqGraph build_sq_graph(const InteractionLog& log, const irt::IrtParams& params,
                       const GraphBuildConfig& cfg) {
    cfg.validate();
    SqGraph g;
    g.students = Interner(log.students());
    g.questions = Interner(log.questions());
    for (const auto& s : g.students.ids()) {
        auto it = params.theta.find(s);
        if (it == params.theta.end()) throw DomainError("missing ability for student " + s);
        g.theta.push_back(it->second);
    }
    for (const auto& q : g.questions.ids()) {
        auto it = params.b.find(q);
        if (it == params.b.end()) throw DomainError("missing difficulty for question " + q);
        g.difficulty.push_back(it->second);
    }
    g.qs_edges.reserve(log.size());
    for (const auto& r : log.records()) {
        g.qs_edges.push_back({g.questions.at(r.question_id), g.students.at(r.student_id), r.correct});
    }

    const double sigma_q = cfg.sigma_q.value_or(default_sigma(g.difficulty));
    const double sigma_s = cfg.sigma_s.value_or(default_sigma(g.theta));
    for (auto [a, b] : topk_neighbor_pairs(g.difficulty, cfg.topk_q)) {
        g.qq_edges.push_back({a, b, similarity_weight(g.difficulty[a], g.difficulty[b], sigma_q)});
    }
    for (auto [a, b] : topk_neighbor_pairs(g.theta, cfg.topk_s)) {
        g.ss_edges.push_back({a, b, similarity_weight(g.theta[a], g.theta[b], sigma_s)});
    }
    return g;
}

bool would_close_cycle(std::size_t node_count, const std::vector<KcEdge>& edges, RelationType type,
                       std::size_t src, std::size_t dst) {
    if (src == dst) return true;
    std::vector<std::vector<std::size_t>> out(node_count);
    for (const auto& e : edges) {
        if (e.type == type) out[e.src].push_back(e.dst);
    }
    // Is src reachable from dst?
    std::vector<char> seen(node_count, 0);
    std::vector<std::size_t> stack{dst};
    seen[dst] = 1;
    while (!stack.empty()) {
        const auto u = stack.back();
        stack.pop_back();
        if (u == src) return true;
        for (auto v : out[u]) {
            if (!seen[v]) {
                seen[v] = 1;
                stack.push_back(v);
            }
        }
    }
    return false;
}

namespace {

std::string audit_text(const RelationDecision& d) {
    nlohmann::json j = {{"provenance", std::string(to_string(d.provenance))},
                        {"doubtful", d.doubtful},
                        {"trail", d.audit}};
    return j.dump();
}

}  // namespace

KcBuildResult build_kc_graph(std::vector<ConceptProfile> nodes,
                             const std::vector<RelationDecision>& decisions) {
    std::sort(nodes.begin(), nodes.end(), [](const auto& a, const auto& b) { return a.kc_id < b.kc_id; });
    std::vector<std::string> ids;
    for (const auto& n : nodes) ids.push_back(n.kc_id);
    const Interner interner(ids);

    KcBuildResult result;
    // Unordered pair -> indices of decisions on it.
    std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> by_pair;
    for (std::size_t i = 0; i < decisions.size(); ++i) {
        const auto& d = decisions[i];
        const auto a = interner.find(d.kc_a);
        const auto b = interner.find(d.kc_b);
        if (!a) throw DomainError("decision references unknown KC " + d.kc_a);
        if (!b) throw DomainError("decision references unknown KC " + d.kc_b);
        if (*a == *b) {
            result.dropped.push_back("self-relation on " + d.kc_a + " ignored");
            continue;
        }
        by_pair[{std::min(*a, *b), std::max(*a, *b)}].push_back(i);
    }

    struct Pending {
        std::size_t src, dst;
        RelationType type;
        double confidence;
        std::string evidence;
    };
    std::vector<Pending> pending;
    for (const auto& [pair, idx] : by_pair) {
        double best = -1.0;
        for (auto i : idx) {
            if (decisions[i].final_type != RelationType::None) best = std::max(best, decisions[i].confidence);
        }
        if (best < 0.0) continue;
        std::optional<std::size_t> winner;
        bool conflict = false;
        for (auto i : idx) {
            const auto& d = decisions[i];
            if (d.final_type == RelationType::None || d.confidence != best) continue;
            if (!winner) {
                winner = i;
                continue;
            }
            const auto& w = decisions[*winner];
            const bool same_type = w.final_type == d.final_type;
            const bool same_dir = is_symmetric(d.final_type) || (w.kc_a == d.kc_a && w.kc_b == d.kc_b);
            if (!same_type || !same_dir) conflict = true;
        }
        const auto& w = decisions[*winner];
        if (conflict) {
            result.dropped.push_back("tied conflicting decisions on " + w.kc_a + "/" + w.kc_b);
            continue;
        }
        pending.push_back({interner.at(w.kc_a), interner.at(w.kc_b), w.final_type,
                           std::clamp(w.confidence, 0.0, 1.0), audit_text(w)});
    }

    std::stable_sort(pending.begin(), pending.end(), [](const Pending& a, const Pending& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        return std::tie(a.src, a.dst) < std::tie(b.src, b.dst);
    });

    std::vector<KcEdge> edges;
    for (auto& p : pending) {
        if (is_acyclic_type(p.type) && would_close_cycle(nodes.size(), edges, p.type, p.src, p.dst)) {
            result.dropped.push_back(std::string(to_string(p.type)) + " " + ids[p.src] + "->" + ids[p.dst] +
                                     " would close a cycle");
            continue;
        }
        edges.push_back({p.src, p.dst, p.type, p.confidence, p.evidence});
        if (is_symmetric(p.type)) edges.push_back({p.dst, p.src, p.type, p.confidence, p.evidence});
    }
    std::sort(edges.begin(), edges.end(), [](const KcEdge& a, const KcEdge& b) {
        return std::tie(a.src, a.dst, a.type) < std::tie(b.src, b.dst, b.type);
    });
    result.graph = KcGraph(std::move(nodes), std::move(edges));
    return result;
}

namespace {

// Tarjan SCC over the edges of one type; returns components that contain a
// cycle (size > 1 or a self-loop).
std::vector<std::vector<std::size_t>> cyclic_components(const KcGraph& g, RelationType type) {
    const std::size_t n = g.node_count();
    std::vector<std::vector<std::size_t>> out(n);
    std::vector<char> self_loop(n, 0);
    for (const auto& e : g.edges()) {
        if (e.type != type) continue;
        out[e.src].push_back(e.dst);
        if (e.src == e.dst) self_loop[e.src] = 1;
    }
    std::vector<int> index(n, -1), low(n, 0);
    std::vector<char> on_stack(n, 0);
    std::vector<std::size_t> stack;
    std::vector<std::vector<std::size_t>> result;
    int counter = 0;
    std::function<void(std::size_t)> strong = [&](std::size_t v) {
        index[v] = low[v] = counter++;
        stack.push_back(v);
        on_stack[v] = 1;
        for (auto w : out[v]) {
            if (index[w] < 0) {
                strong(w);
                low[v] = std::min(low[v], low[w]);
            } else if (on_stack[w]) {
                low[v] = std::min(low[v], index[w]);
            }
        }
        if (low[v] == index[v]) {
            std::vector<std::size_t> comp;
            std::size_t w;
            do {
                w = stack.back();
                stack.pop_back();
                on_stack[w] = 0;
                comp.push_back(w);
            } while (w != v);
            if (comp.size() > 1 || self_loop[v]) {
                std::sort(comp.begin(), comp.end());
                result.push_back(std::move(comp));
            }
        }
    };
    for (std::size_t v = 0; v < n; ++v) {
        if (index[v] < 0) strong(v);
    }
    std::sort(result.begin(), result.end());
    return result;
}

}  // namespace

std::vector<AxiomViolation> validate_kc_axioms(const KcGraph& graph) {
    std::vector<AxiomViolation> out;
    const auto& ids = graph.interner().ids();
    auto name_list = [&](const std::vector<std::size_t>& comp) {
        std::string s;
        for (auto v : comp) s += (s.empty() ? "" : ",") + ids[v];
        return s;
    };
    for (auto type : {RelationType::PredecessorSuccessor, RelationType::Containment}) {
        for (const auto& comp : cyclic_components(graph, type)) {
            out.push_back({type == RelationType::PredecessorSuccessor ? "predecessor cycle" : "containment cycle",
                           name_list(comp)});
        }
    }

    std::set<std::tuple<std::size_t, std::size_t, RelationType>> directed;
    for (const auto& e : graph.edges()) directed.emplace(e.src, e.dst, e.type);

    std::set<std::pair<std::size_t, std::size_t>> reported_asym;
    std::map<std::pair<std::size_t, std::size_t>, std::set<RelationType>> pair_types;
    for (const auto& e : graph.edges()) {
        const auto key = std::make_pair(std::min(e.src, e.dst), std::max(e.src, e.dst));
        if (e.type == RelationType::None) {
            out.push_back({"none-typed edge", ids[e.src] + "," + ids[e.dst]});
            continue;
        }
        if (!(e.confidence >= 0.0 && e.confidence <= 1.0)) {
            out.push_back({"confidence range", ids[e.src] + "," + ids[e.dst]});
        }
        pair_types[key].insert(e.type);
        if (is_symmetric(e.type) && !directed.count({e.dst, e.src, e.type}) && reported_asym.insert(key).second) {
            out.push_back({"asymmetric " + std::string(to_string(e.type)), ids[e.src] + "," + ids[e.dst]});
        }
    }
    for (const auto& [key, types] : pair_types) {
        if (types.size() > 1) {
            std::string names;
            for (auto t : types) names += (names.empty() ? "" : "+") + std::string(to_string(t));
            out.push_back({"multiple relation types", ids[key.first] + "," + ids[key.second] + ": " + names});
        }
    }
    return out;
}

std::vector<std::string> kc_graph_to_lines(const KcGraph& graph) {
    std::vector<std::string> out;
    for (const auto& n : graph.nodes()) {
        out.push_back(jsonl::LineWriter()
                          .field("kind", "node")
                          .field("id", n.kc_id)
                          .field("name", n.name)
                          .field("definition", n.definition)
                          .field("category", n.category)
                          .field("degraded", n.degraded)
                          .str());
    }
    const auto& ids = graph.interner().ids();
    for (const auto& e : graph.edges()) {
        out.push_back(jsonl::LineWriter()
                          .field("kind", "edge")
                          .field("src", ids[e.src])
                          .field("dst", ids[e.dst])
                          .field("type", to_string(e.type))
                          .field("confidence", e.confidence)
                          .field("evidence", e.evidence)
                          .str());
    }
    return out;
}

KcGraph kc_graph_from_lines(std::istream& in) {
    std::vector<ConceptProfile> nodes;
    std::vector<nlohmann::json> edge_rows;
    for (const auto& j : jsonl::read_lines(in)) {
        const auto kind = j.value("kind", std::string{});
        if (kind == "node") {
            nodes.push_back({j.at("id").get<std::string>(), j.value("name", std::string{}),
                             j.value("definition", std::string{}), j.value("category", std::string{}),
                             j.value("degraded", false)});
        } else if (kind == "edge") {
            edge_rows.push_back(j);
        }
    }
    std::vector<std::string> ids;
    for (const auto& n : nodes) ids.push_back(n.kc_id);
    const Interner interner(ids);
    std::vector<KcEdge> edges;
    for (const auto& j : edge_rows) {
        edges.push_back({interner.at(j.at("src").get<std::string>()), interner.at(j.at("dst").get<std::string>()),
                         relation_from_string(j.at("type").get<std::string>()), j.at("confidence").get<double>(),
                         j.value("evidence", std::string{})});
    }
    return KcGraph(std::move(nodes), std::move(edges));
}

std::vector<std::string> sq_graph_to_lines(const SqGraph& g) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < g.students.size(); ++i) {
        out.push_back(jsonl::LineWriter().field("kind", "student").field("id", g.students.id(i)).field("theta", g.theta[i]).str());
    }
    for (std::size_t i = 0; i < g.questions.size(); ++i) {
        out.push_back(jsonl::LineWriter().field("kind", "question").field("id", g.questions.id(i)).field("b", g.difficulty[i]).str());
    }
    for (const auto& e : g.qs_edges) {
        out.push_back(jsonl::LineWriter()
                          .field("kind", "qs")
                          .field("question", g.questions.id(e.question))
                          .field("student", g.students.id(e.student))
                          .field("label", e.label)
                          .str());
    }
    for (const auto& e : g.qq_edges) {
        out.push_back(jsonl::LineWriter()
                          .field("kind", "qq")
                          .field("src", g.questions.id(e.a))
                          .field("dst", g.questions.id(e.b))
                          .field("weight", e.weight)
                          .str());
    }
    for (const auto& e : g.ss_edges) {
        out.push_back(jsonl::LineWriter()
                          .field("kind", "ss")
                          .field("src", g.students.id(e.a))
                          .field("dst", g.students.id(e.b))
                          .field("weight", e.weight)
                          .str());
    }
    return out;
}

SqGraph sq_graph_from_lines(std::istream& in) {
    std::vector<std::string> sid, qid;
    SqGraph g;
    const auto rows = jsonl::read_lines(in);
    for (const auto& j : rows) {
        const auto kind = j.value("kind", std::string{});
        if (kind == "student") {
            sid.push_back(j.at("id").get<std::string>());
            g.theta.push_back(j.at("theta").get<double>());
        } else if (kind == "question") {
            qid.push_back(j.at("id").get<std::string>());
            g.difficulty.push_back(j.at("b").get<double>());
        }
    }
    g.students = Interner(sid);
    g.questions = Interner(qid);
    for (const auto& j : rows) {
        const auto kind = j.value("kind", std::string{});
        if (kind == "qs") {
            const int label = j.at("label").get<int>();
            if (label != 0 && label != 1) throw DomainError("qs edge label must be 0 or 1");
            g.qs_edges.push_back({g.questions.at(j.at("question").get<std::string>()),
                                  g.students.at(j.at("student").get<std::string>()), label});
        } else if (kind == "qq" || kind == "ss") {
            const auto& names = kind == "qq" ? g.questions : g.students;
            const double w = j.at("weight").get<double>();
            if (!(w > 0.0 && w <= 1.0)) throw DomainError("similarity weight outside (0, 1]");
            std::size_t a = names.at(j.at("src").get<std::string>());
            std::size_t b = names.at(j.at("dst").get<std::string>());
            if (a > b) std::swap(a, b);
            (kind == "qq" ? g.qq_edges : g.ss_edges).push_back({a, b, w});
        }
    }
    return g;
}

std::string graph_version(const std::vector<std::string>& lines) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& l : lines) {
        h = jsonl::fnv1a(l, h);
        h = jsonl::fnv1a("\n", h);
    }
    return jsonl::hex64(h);
}

}  // namespace magekt::graphs
