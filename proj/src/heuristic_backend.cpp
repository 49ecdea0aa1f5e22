#include "magekt/heuristic_backend.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

namespace magekt::agents {

using nlohmann::json;

namespace {

int bucket(double x) { return static_cast<int>(std::lround(5.0 * std::clamp(x, 0.0, 1.0))); }

bool strict_subset(const std::set<std::string>& small, const std::set<std::string>& big) {
    return small.size() < big.size() && std::includes(big.begin(), big.end(), small.begin(), small.end());
}

ConceptProfile profile_from(const json& j) {
    ConceptProfile p;
    p.kc_id = j.at("kc_id").get<std::string>();
    p.name = j.value("name", std::string());
    p.definition = j.value("definition", std::string());
    p.category = j.value("category", std::string());
    return p;
}

std::string fixed2(double x) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(2);
    os << x;
    return os.str();
}

Facet persona_facet(Persona p) {
    switch (p) {
        case Persona::Teaching: return Facet::Order;
        case Persona::Structure: return Facet::Semantic;
        case Persona::Behavior: return Facet::Behavior;
    }
    return Facet::Behavior;
}

}  // namespace

Facet facet_of(const std::string& criterion) {
    static const std::map<std::string, Facet> table{
        {"PredecessorDependency", Facet::Order},   {"AnswerOrderSequence", Facet::Order},
        {"OrderIndependence", Facet::Order},       {"PartWholeStructure", Facet::Semantic},
        {"DefinitionInclusion", Facet::Semantic},  {"SemanticIdentity", Facet::Semantic},
        {"TerminologyMatch", Facet::Semantic},     {"SharedParent", Facet::Semantic},
        {"ParallelScope", Facet::Semantic},        {"CorrectnessDependency", Facet::Behavior},
        {"BehavioralAgreement", Facet::Behavior},  {"Independence", Facet::Behavior},
        {"CoOccurrence", Facet::Behavior},         {"PerformanceCorrelation", Facet::Behavior},
    };
    const auto it = table.find(criterion);
    if (it == table.end()) throw DomainError("unknown criterion " + criterion);
    return it->second;
}

std::string standardize_name(const std::string& name) {
    std::string out;
    bool space = false;
    for (char c : name) {
        const auto u = static_cast<unsigned char>(c);
        if (std::isspace(u) || c == '_') {
            space = !out.empty();
            continue;
        }
        if (space) out.push_back(' ');
        space = false;
        out.push_back(static_cast<char>(std::tolower(u)));
    }
    return out;
}

std::string heuristic_category(const std::string& name) {
    static const std::vector<std::pair<std::vector<std::string>, std::string>> table{
        {{"fraction", "fractions", "decimal", "decimals", "percent", "percentage"}, "arithmetic"},
        {{"equation", "equations", "inequality", "inequalities", "polynomial", "polynomials", "linear",
          "variable", "variables"},
         "algebra"},
        {{"triangle", "triangles", "angle", "angles", "circle", "circles", "polygon", "polygons", "geometry"},
         "geometry"},
        {{"probability", "statistics", "mean", "median"}, "statistics"},
        {{"derivative", "derivatives", "integral", "integrals", "limit", "limits", "calculus"}, "calculus"},
        {{"sequence", "sequences", "series", "recursion"}, "discrete"},
    };
    std::vector<std::string> words;
    {
        std::istringstream is(standardize_name(name));
        for (std::string w; is >> w;) {
            std::string clean;
            for (char c : w) {
                if (std::isalnum(static_cast<unsigned char>(c))) clean.push_back(c);
            }
            if (!clean.empty()) words.push_back(clean);
        }
    }
    for (const auto& w : words) {
        for (const auto& [keys, category] : table) {
            if (std::find(keys.begin(), keys.end(), w) != keys.end()) return category;
        }
    }
    const auto t = tokens(name);
    for (const auto& w : words) {
        if (t.count(w)) return w;
    }
    return "general";
}

TypedRelation heuristic_relation(const ConceptProfile& a, const ConceptProfile& b, const PairEvidence& ev,
                                 const HeuristicConfig& cfg) {
    const double overlap = ev.name_overlap;
    if (overlap >= cfg.equivalence_overlap) return {RelationType::Equivalence, a.kc_id, b.kc_id};
    const auto na = tokens(a.name);
    const auto nb = tokens(b.name);
    if (overlap >= cfg.containment_overlap) {
        // The broader concept carries fewer name tokens.
        if (strict_subset(na, nb)) return {RelationType::Containment, a.kc_id, b.kc_id};
        if (strict_subset(nb, na)) return {RelationType::Containment, b.kc_id, a.kc_id};
    }
    if (ev.precedence_prob >= cfg.precedence && ev.dependence >= cfg.dependence) {
        return {RelationType::PredecessorSuccessor, a.kc_id, b.kc_id};
    }
    if (ev.reverse_precedence_prob >= cfg.precedence && ev.reverse_dependence >= cfg.dependence) {
        return {RelationType::PredecessorSuccessor, b.kc_id, a.kc_id};
    }
    const auto ca = standardize_name(a.category);
    const bool shared = !ca.empty() && ca == standardize_name(b.category);
    if (shared && overlap >= cfg.sibling_overlap && overlap < cfg.equivalence_overlap &&
        std::max(ev.precedence_prob, ev.reverse_precedence_prob) < cfg.precedence) {
        return {RelationType::Sibling, a.kc_id, b.kc_id};
    }
    if (ev.cooccurrence >= cfg.association_cooccurrence) return {RelationType::Association, a.kc_id, b.kc_id};
    return {RelationType::None, a.kc_id, b.kc_id};
}

std::map<std::string, int> heuristic_scores(const TypedRelation& r, const ConceptProfile& a_in,
                                            const ConceptProfile& b_in, const PairEvidence& ev_in,
                                            const HeuristicConfig& cfg) {
    const bool flip = r.src == b_in.kc_id && r.dst == a_in.kc_id;
    const auto& a = flip ? b_in : a_in;
    const auto& b = flip ? a_in : b_in;
    const auto ev = flip ? ev_in.reversed() : ev_in;
    const auto na = tokens(a.name);
    const auto nb = tokens(b.name);
    const double max_dep = std::max(std::abs(ev.dependence), std::abs(ev.reverse_dependence));
    const double order_gap = std::abs(ev.precedence_prob - ev.reverse_precedence_prob);
    // Independence criteria need co-attempts; without them there is no evidence either way.
    const bool seen = ev.cooccurrence > 0;
    std::map<std::string, int> s;
    switch (r.type) {
        case RelationType::PredecessorSuccessor:
            s["PredecessorDependency"] = bucket((ev.precedence_prob - ev.reverse_precedence_prob) / 0.6);
            s["CorrectnessDependency"] = bucket(ev.dependence / 0.3);
            s["AnswerOrderSequence"] = bucket(ev.precedence_prob);
            break;
        case RelationType::Containment:
            s["PartWholeStructure"] = strict_subset(na, nb) ? 5 : 0;
            s["DefinitionInclusion"] = bucket(ev.name_overlap);
            s["OrderIndependence"] = seen ? bucket(1.0 - order_gap) : 0;
            break;
        case RelationType::Equivalence:
            s["SemanticIdentity"] = bucket(ev.name_overlap);
            s["TerminologyMatch"] = bucket(jaccard(na, nb));
            s["BehavioralAgreement"] = bucket(std::max(ev.dependence, ev.reverse_dependence) / 0.3);
            break;
        case RelationType::Sibling: {
            const auto ca = standardize_name(a.category);
            s["SharedParent"] = !ca.empty() && ca == standardize_name(b.category) ? 5 : 0;
            s["ParallelScope"] = std::includes(na.begin(), na.end(), nb.begin(), nb.end()) ||
                                         std::includes(nb.begin(), nb.end(), na.begin(), na.end())
                                     ? 0
                                     : 5;
            s["Independence"] = seen ? bucket(1.0 - max_dep / 0.3) : 0;
            break;
        }
        case RelationType::Association:
            s["CoOccurrence"] = bucket(static_cast<double>(ev.cooccurrence) /
                                       (2.0 * static_cast<double>(std::max<std::size_t>(cfg.association_cooccurrence, 1))));
            s["PerformanceCorrelation"] = bucket(max_dep / 0.3);
            s["OrderIndependence"] = seen ? bucket(1.0 - order_gap) : 0;
            break;
        case RelationType::None:
            throw DomainError("relation type None has no scoring criteria");
    }
    return s;
}

double persona_score(Persona persona, const std::map<std::string, int>& scores) {
    const Facet own = persona_facet(persona);
    double total = 0.0, weight = 0.0;
    for (const auto& [name, v] : scores) {
        const double w = facet_of(name) == own ? 2.0 : 1.0;
        total += w * v;
        weight += w;
    }
    return weight > 0.0 ? total / weight : 0.0;
}

std::vector<TypedRelation> candidate_relations(const std::string& a, const std::string& b) {
    return {{RelationType::PredecessorSuccessor, a, b},
            {RelationType::PredecessorSuccessor, b, a},
            {RelationType::Containment, a, b},
            {RelationType::Containment, b, a},
            {RelationType::Equivalence, a, b},
            {RelationType::Sibling, a, b},
            {RelationType::Association, a, b}};
}

json HeuristicBackend::respond(const AgentRole& role, TaskKind task, const json& payload) {
    switch (task) {
        case TaskKind::CompleteConcept: {
            const auto name = standardize_name(payload.at("name").get<std::string>());
            if (name.empty()) return json::object();
            const auto category = heuristic_category(name);
            auto title = name;
            title[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(title[0])));
            return {{"name", name},
                    {"definition", title + " covers the skills of " + name + " within " + category + "."},
                    {"category", category}};
        }
        case TaskKind::ProposeRelation: {
            const auto a = profile_from(payload.at("a"));
            const auto b = profile_from(payload.at("b"));
            const auto ev = evidence_from_json(payload.at("evidence"));
            const auto r = heuristic_relation(a, b, ev, cfg_);
            json out = to_json(r);
            out["justification"] = "rule-based: overlap " + fixed2(ev.name_overlap) + ", precedence " +
                                   fixed2(ev.precedence_prob) + "/" + fixed2(ev.reverse_precedence_prob) +
                                   ", dependence " + fixed2(ev.dependence) + "/" + fixed2(ev.reverse_dependence) +
                                   ", co-attempts " + std::to_string(ev.cooccurrence);
            out["evidence_excerpts"] = to_json(ev).dump();
            return out;
        }
        case TaskKind::ScoreRelation: {
            const auto a = profile_from(payload.at("a"));
            const auto b = profile_from(payload.at("b"));
            const auto ev = evidence_from_json(payload.at("evidence"));
            const auto r = relation_from_json(payload.at("relation"), a.kc_id, b.kc_id);
            json scores = json::object(), explanations = json::object();
            for (const auto& [k, v] : heuristic_scores(r, a, b, ev, cfg_)) {
                scores[k] = v;
                explanations[k] = "bucketed statistic";
            }
            return {{"scores", scores}, {"explanations", explanations}};
        }
        case TaskKind::Arbitrate: {
            json out = payload.at("proposal").at("relation");
            out["rationale"] = "proposal confirmed; mean score " + fixed2(payload.at("mean_score").get<double>());
            return out;
        }
        case TaskKind::Vote:
            return vote(role.persona, payload);
    }
    throw DomainError("heuristic backend: unsupported task");
}

json HeuristicBackend::vote(Persona persona, const json& payload) const {
    const auto a = profile_from(payload.at("a"));
    const auto b = profile_from(payload.at("b"));
    const auto ev = evidence_from_json(payload.at("evidence"));
    std::vector<TypedRelation> excluded;
    if (payload.contains("excluded")) {
        for (const auto& e : payload["excluded"]) excluded.push_back(relation_from_json(e, a.kc_id, b.kc_id));
    }
    const auto is_excluded = [&](const TypedRelation& r) {
        return std::find(excluded.begin(), excluded.end(), r) != excluded.end();
    };

    // Candidates in tie-break order: the current decision first.
    std::vector<TypedRelation> order;
    if (payload.contains("decision")) {
        const auto cur = relation_from_json(payload["decision"].at("relation"), a.kc_id, b.kc_id);
        if (cur.type != RelationType::None) order.push_back(cur);
    }
    for (const auto& r : candidate_relations(a.kc_id, b.kc_id)) {
        if (std::find(order.begin(), order.end(), r) == order.end()) order.push_back(r);
    }
    std::vector<std::pair<TypedRelation, double>> scored;
    for (const auto& r : order) {
        if (!is_excluded(r)) scored.push_back({r, persona_score(persona, heuristic_scores(r, a, b, ev, cfg_))});
    }
    const TypedRelation none{RelationType::None, a.kc_id, b.kc_id};
    TypedRelation pick = none;
    double best = -1.0;
    for (const auto& [r, s] : scored) {
        if (s > best) {
            best = s;
            pick = r;
        }
    }
    if (best < cfg_.vote_floor) pick = none;
    std::string why = "best weighted score " + fixed2(std::max(best, 0.0));

    const auto& peers = payload.value("peers", json::array());
    if (peers.size() >= 2) {
        const auto first = relation_from_json(peers[0].at("relation"), a.kc_id, b.kc_id);
        bool agree = !is_excluded(first);
        for (const auto& p : peers) agree = agree && relation_from_json(p.at("relation"), a.kc_id, b.kc_id) == first;
        if (agree && !(first == pick)) {
            double own = cfg_.vote_floor;
            if (first.type != RelationType::None) {
                own = persona_score(persona, heuristic_scores(first, a, b, ev, cfg_));
            }
            if (own >= best - cfg_.revision_margin) {
                pick = first;
                why += "; adopted the peers' shared view (own score " + fixed2(own) + ")";
            }
        }
    }
    json out = to_json(pick);
    out["rationale"] = std::string(to_string(persona)) + " view: " + why;
    return out;
}

}  // namespace magekt::agents
