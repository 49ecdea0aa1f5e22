#include "magekt/agents.hpp"

#include "magekt/graphs.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>
#include <tuple>

namespace magekt::agents {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Evidence

PairEvidence PairEvidence::reversed() const {
    PairEvidence r = *this;
    std::swap(r.precedence_prob, r.reverse_precedence_prob);
    std::swap(r.dependence, r.reverse_dependence);
    return r;
}

json to_json(const PairEvidence& ev) {
    return {{"cooccurrence", ev.cooccurrence},
            {"precedence_prob", ev.precedence_prob},
            {"reverse_precedence_prob", ev.reverse_precedence_prob},
            {"dependence", ev.dependence},
            {"reverse_dependence", ev.reverse_dependence},
            {"name_overlap", ev.name_overlap}};
}

PairEvidence evidence_from_json(const json& j) {
    PairEvidence ev;
    ev.cooccurrence = j.at("cooccurrence").get<std::size_t>();
    ev.precedence_prob = j.at("precedence_prob").get<double>();
    ev.reverse_precedence_prob = j.at("reverse_precedence_prob").get<double>();
    ev.dependence = j.at("dependence").get<double>();
    ev.reverse_dependence = j.at("reverse_dependence").get<double>();
    ev.name_overlap = j.at("name_overlap").get<double>();
    return ev;
}

std::set<std::string> tokens(const std::string& text) {
    static const std::set<std::string> stop{"a",    "an",     "the",    "of",      "and",    "or",
                                            "in",   "on",     "to",     "for",     "with",   "within",
                                            "covers", "skills", "concept", "is",   "by"};
    std::set<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty() && !stop.count(cur)) out.insert(cur);
        cur.clear();
    };
    for (char c : text) {
        const auto u = static_cast<unsigned char>(c);
        if (std::isalnum(u)) {
            cur.push_back(static_cast<char>(std::tolower(u)));
        } else {
            flush();
        }
    }
    flush();
    return out;
}

std::set<std::string> profile_tokens(const ConceptProfile& p) {
    auto out = tokens(p.name);
    for (const auto& t : tokens(p.definition)) out.insert(t);
    for (const auto& t : tokens(p.category)) out.insert(t);
    return out;
}

double jaccard(const std::set<std::string>& a, const std::set<std::string>& b) {
    if (a.empty() && b.empty()) return 0.0;
    std::size_t common = 0;
    for (const auto& t : a) common += b.count(t);
    return static_cast<double>(common) / static_cast<double>(a.size() + b.size() - common);
}

EvidenceIndex::EvidenceIndex(const InteractionLog& log) {
    const auto& records = log.records();
    for (const auto& [sid, idx] : log.student_sequences()) {
        const std::size_t s = students_.size();
        std::vector<Step> steps;
        std::map<std::string, double> first;
        steps.reserve(idx.size());
        for (auto i : idx) {
            const auto& r = records[i];
            steps.push_back({r.kc_ids, r.correct, r.timestamp});
            for (const auto& k : r.kc_ids) first.emplace(k, r.timestamp);
        }
        for (const auto& [k, t] : first) students_of_[k].push_back(s);
        students_.push_back(std::move(steps));
        first_seen_.push_back(std::move(first));
    }
}

namespace {

bool mentions(const std::vector<std::string>& kcs, const std::string& k) {
    return std::find(kcs.begin(), kcs.end(), k) != kcs.end();
}

struct DependenceTally {
    double n[2] = {0.0, 0.0};
    double correct[2] = {0.0, 0.0};

    double value() const {
        if (n[0] == 0.0 || n[1] == 0.0) return 0.0;
        return correct[1] / n[1] - correct[0] / n[0];
    }
};

// Every attempt on `b` preceded (strictly earlier in time) by an attempt on
// `a` is grouped by the correctness of the latest such attempt.
template <typename Step>
void accumulate_dependence(const std::vector<Step>& steps, const std::string& a, const std::string& b,
                           DependenceTally& tally) {
    std::optional<int> committed;
    std::optional<int> group_latest;
    double group_time = std::numeric_limits<double>::quiet_NaN();
    for (const auto& st : steps) {
        if (!(st.time == group_time)) {
            if (group_latest) committed = group_latest;
            group_latest.reset();
            group_time = st.time;
        }
        if (committed && mentions(st.kcs, b)) {
            tally.n[*committed] += 1.0;
            tally.correct[*committed] += st.correct;
        }
        if (mentions(st.kcs, a)) group_latest = st.correct != 0 ? 1 : 0;
    }
}

}  // namespace

PairEvidence EvidenceIndex::compute(const ConceptProfile& a, const ConceptProfile& b) const {
    if (a.kc_id == b.kc_id) throw DomainError("pair evidence needs two distinct KCs, got " + a.kc_id + " twice");
    PairEvidence ev;
    ev.name_overlap = jaccard(profile_tokens(a), profile_tokens(b));
    const auto ia = students_of_.find(a.kc_id);
    const auto ib = students_of_.find(b.kc_id);
    if (ia == students_of_.end() || ib == students_of_.end()) return ev;
    std::vector<std::size_t> both;
    std::set_intersection(ia->second.begin(), ia->second.end(), ib->second.begin(), ib->second.end(),
                          std::back_inserter(both));
    ev.cooccurrence = both.size();
    if (both.empty()) return ev;
    std::size_t ab = 0, ba = 0;
    DependenceTally fwd, rev;
    for (auto s : both) {
        const double ta = first_seen_[s].at(a.kc_id);
        const double tb = first_seen_[s].at(b.kc_id);
        ab += ta < tb;
        ba += tb < ta;
        accumulate_dependence(students_[s], a.kc_id, b.kc_id, fwd);
        accumulate_dependence(students_[s], b.kc_id, a.kc_id, rev);
    }
    const auto n = static_cast<double>(both.size());
    ev.precedence_prob = static_cast<double>(ab) / n;
    ev.reverse_precedence_prob = static_cast<double>(ba) / n;
    ev.dependence = fwd.value();
    ev.reverse_dependence = rev.value();
    return ev;
}

PairEvidence EvidenceIndex::pair(const ConceptProfile& a, const ConceptProfile& b) const {
    if (a.kc_id == b.kc_id) throw DomainError("pair evidence needs two distinct KCs, got " + a.kc_id + " twice");
    for (const auto* p : {&a, &b}) {
        if (!has_kc(p->kc_id)) throw DomainError("unknown KC " + p->kc_id + " (absent from the log)");
    }
    return compute(a, b);
}

PairEvidence EvidenceIndex::pair_or_empty(const ConceptProfile& a, const ConceptProfile& b) const {
    return compute(a, b);
}

std::map<std::pair<std::string, std::string>, std::size_t> EvidenceIndex::cooccurrence_counts() const {
    std::map<std::pair<std::string, std::string>, std::size_t> out;
    for (const auto& first : first_seen_) {
        for (auto i = first.begin(); i != first.end(); ++i) {
            for (auto j = std::next(i); j != first.end(); ++j) ++out[{i->first, j->first}];
        }
    }
    return out;
}

PairEvidence compute_pair_evidence(const InteractionLog& log, const ConceptProfile& a, const ConceptProfile& b) {
    return EvidenceIndex(log).pair(a, b);
}

// ---------------------------------------------------------------------------
// Backend protocol

std::string_view to_string(Persona p) {
    switch (p) {
        case Persona::Teaching: return "teaching";
        case Persona::Structure: return "structure";
        case Persona::Behavior: return "behavior";
    }
    return "?";
}

std::string AgentRole::name() const {
    switch (role) {
        case Role::Semantic: return "semantic";
        case Role::Scoring: return "scoring";
        case Role::Arbiter: return "arbiter";
        case Role::Persona: return "persona:" + std::string(to_string(persona));
    }
    return "?";
}

std::string_view to_string(TaskKind t) {
    switch (t) {
        case TaskKind::CompleteConcept: return "complete_concept";
        case TaskKind::ProposeRelation: return "propose_relation";
        case TaskKind::ScoreRelation: return "score_relation";
        case TaskKind::Arbitrate: return "arbitrate";
        case TaskKind::Vote: return "vote";
    }
    return "?";
}

const std::vector<std::string>& criteria_for(RelationType type) {
    static const std::vector<std::string> ps{"PredecessorDependency", "CorrectnessDependency",
                                             "AnswerOrderSequence"};
    static const std::vector<std::string> containment{"PartWholeStructure", "DefinitionInclusion",
                                                      "OrderIndependence"};
    static const std::vector<std::string> equivalence{"SemanticIdentity", "TerminologyMatch",
                                                      "BehavioralAgreement"};
    static const std::vector<std::string> sibling{"SharedParent", "ParallelScope", "Independence"};
    static const std::vector<std::string> association{"CoOccurrence", "PerformanceCorrelation",
                                                      "OrderIndependence"};
    switch (type) {
        case RelationType::PredecessorSuccessor: return ps;
        case RelationType::Containment: return containment;
        case RelationType::Equivalence: return equivalence;
        case RelationType::Sibling: return sibling;
        case RelationType::Association: return association;
        case RelationType::None: break;
    }
    throw DomainError("relation type None has no scoring criteria");
}

namespace {

const json& require(const json& obj, const char* key, json::value_t type, const char* what) {
    const auto it = obj.find(key);
    if (it == obj.end()) throw SchemaError(std::string(what) + ": missing field '" + key + "'");
    const bool ok = type == json::value_t::string ? it->is_string()
                    : type == json::value_t::object ? it->is_object()
                                                    : it->type() == type;
    if (!ok) throw SchemaError(std::string(what) + ": field '" + key + "' has the wrong type");
    return *it;
}

std::string require_text(const json& obj, const char* key, const char* what) {
    auto s = require(obj, key, json::value_t::string, what).get<std::string>();
    if (s.find_first_not_of(" \t\r\n") == std::string::npos) {
        throw SchemaError(std::string(what) + ": field '" + key + "' is empty");
    }
    return s;
}

std::pair<std::string, std::string> payload_pair(const json& payload) {
    return {payload.at("a").at("kc_id").get<std::string>(), payload.at("b").at("kc_id").get<std::string>()};
}

// Canonical orientation: symmetric types follow the pair order (a, b).
TypedRelation canonical(TypedRelation r, const std::string& a, const std::string& b) {
    if (r.type == RelationType::None || is_symmetric(r.type)) {
        r.src = a;
        r.dst = b;
    }
    return r;
}

}  // namespace

json to_json(const TypedRelation& r) {
    return {{"type", std::string(to_string(r.type))}, {"src", r.src}, {"dst", r.dst}};
}

TypedRelation relation_from_json(const json& j, const std::string& a, const std::string& b) {
    if (!j.is_object()) throw SchemaError("relation: expected an object");
    TypedRelation r;
    try {
        r.type = relation_from_string(require(j, "type", json::value_t::string, "relation").get<std::string>());
    } catch (const SchemaError&) {
        throw;
    } catch (const DomainError& e) {
        throw SchemaError(std::string("relation: ") + e.what());
    }
    if (r.type == RelationType::None) return canonical(r, a, b);
    r.src = require(j, "src", json::value_t::string, "relation").get<std::string>();
    r.dst = require(j, "dst", json::value_t::string, "relation").get<std::string>();
    const bool forward = r.src == a && r.dst == b;
    const bool backward = r.src == b && r.dst == a;
    if (!forward && !backward) {
        throw SchemaError("relation: src/dst must be the pair " + a + ", " + b + " (got " + r.src + ", " + r.dst +
                          ")");
    }
    return canonical(r, a, b);
}

void validate_response(TaskKind task, const json& payload, const json& response) {
    const auto what = std::string(to_string(task));
    if (!response.is_object()) throw SchemaError(what + ": response is not an object");
    switch (task) {
        case TaskKind::CompleteConcept:
            for (const char* k : {"name", "definition", "category"}) require_text(response, k, what.c_str());
            return;
        case TaskKind::ProposeRelation: {
            const auto [a, b] = payload_pair(payload);
            relation_from_json(response, a, b);
            require(response, "justification", json::value_t::string, what.c_str());
            if (response.contains("evidence_excerpts") && !response["evidence_excerpts"].is_string()) {
                throw SchemaError(what + ": field 'evidence_excerpts' has the wrong type");
            }
            return;
        }
        case TaskKind::ScoreRelation: {
            const auto& scores = require(response, "scores", json::value_t::object, what.c_str());
            const auto& criteria = payload.at("criteria");
            if (scores.size() != criteria.size()) {
                throw SchemaError(what + ": expected exactly " + std::to_string(criteria.size()) + " criteria");
            }
            for (const auto& c : criteria) {
                const auto name = c.get<std::string>();
                const auto it = scores.find(name);
                if (it == scores.end()) throw SchemaError(what + ": criterion " + name + " not scored");
                if (!it->is_number_integer()) throw SchemaError(what + ": score for " + name + " is not an integer");
                const auto v = it->get<long long>();
                if (v < 0 || v > 5) {
                    throw SchemaError(what + ": score for " + name + " is " + std::to_string(v) +
                                      ", outside 0..5");
                }
            }
            if (response.contains("explanations")) {
                const auto& ex = response["explanations"];
                if (!ex.is_object()) throw SchemaError(what + ": field 'explanations' has the wrong type");
                for (const auto& [k, v] : ex.items()) {
                    if (!v.is_string()) throw SchemaError(what + ": explanation for " + k + " is not text");
                }
            }
            return;
        }
        case TaskKind::Arbitrate:
        case TaskKind::Vote: {
            const auto [a, b] = payload_pair(payload);
            const auto r = relation_from_json(response, a, b);
            require(response, "rationale", json::value_t::string, what.c_str());
            if (task == TaskKind::Vote && payload.contains("excluded")) {
                for (const auto& e : payload["excluded"]) {
                    if (relation_from_json(e, a, b) == r) {
                        throw SchemaError(what + ": " + std::string(to_string(r.type)) + " " + r.src + "->" + r.dst +
                                          " was excluded");
                    }
                }
            }
            return;
        }
    }
}

json ask(AgentBackend& backend, const AgentRole& role, TaskKind task, json payload, int retries) {
    std::string last;
    for (int attempt = 0; attempt <= std::max(0, retries); ++attempt) {
        try {
            auto response = backend.respond(role, task, payload);
            validate_response(task, payload, response);
            return response;
        } catch (const SchemaError& e) {
            last = e.what();
            payload["repair"] = "The previous reply was rejected: " + last +
                                ". Reply with one JSON object that matches the schema exactly.";
        }
    }
    throw SchemaError(role.name() + " gave no valid " + std::string(to_string(task)) + " reply after " +
                      std::to_string(std::max(0, retries) + 1) + " attempts; last error: " + last);
}

// ---------------------------------------------------------------------------
// Steps

namespace {

json profile_json(const ConceptProfile& p) {
    return {{"kc_id", p.kc_id}, {"name", p.name}, {"definition", p.definition}, {"category", p.category}};
}

bool blank(const std::string& s) { return s.find_first_not_of(" \t\r\n") == std::string::npos; }

json scores_json(const ScoreVector& s) {
    json j = json::object();
    for (const auto& [k, v] : s.scores) j[k] = v;
    return j;
}

std::string relation_text(const TypedRelation& r) {
    if (r.type == RelationType::None) return "None";
    return std::string(to_string(r.type)) + " " + r.src + "->" + r.dst;
}

}  // namespace

double ScoreVector::mean() const {
    if (scores.empty()) return 0.0;
    double total = 0.0;
    for (const auto& [k, v] : scores) total += v;
    return total / static_cast<double>(scores.size());
}

ConceptProfile complete_concept(const ConceptProfile& kc, AgentBackend& backend, int retries) {
    if (blank(kc.name)) throw DomainError("KC " + kc.kc_id + " has no name");
    if (!blank(kc.definition) && !blank(kc.category)) return kc;
    ConceptProfile out = kc;
    try {
        const auto r = ask(backend, {Role::Semantic}, TaskKind::CompleteConcept,
                           {{"kc_id", kc.kc_id}, {"name", kc.name}}, retries);
        out.name = r["name"].get<std::string>();
        out.definition = r["definition"].get<std::string>();
        out.category = r["category"].get<std::string>();
        out.degraded = false;
    } catch (const SchemaError&) {
        out.definition = kc.name;
        out.degraded = true;
    } catch (const BackendError&) {
        out.definition = kc.name;
        out.degraded = true;
    }
    return out;
}

RelationProposal propose_relation(const ConceptProfile& a, const ConceptProfile& b, const PairEvidence& ev,
                                  AgentBackend& backend, int retries) {
    RelationProposal p;
    p.a = a;
    p.b = b;
    p.relation = {RelationType::None, a.kc_id, b.kc_id};
    const json payload{{"a", profile_json(a)}, {"b", profile_json(b)}, {"evidence", to_json(ev)}};
    try {
        const auto r = ask(backend, {Role::Semantic}, TaskKind::ProposeRelation, payload, retries);
        p.relation = relation_from_json(r, a.kc_id, b.kc_id);
        p.justification = r["justification"].get<std::string>();
        p.evidence_excerpts = r.value("evidence_excerpts", std::string());
        p.audit = r.dump();
    } catch (const DomainError& e) {
        if (!dynamic_cast<const SchemaError*>(&e) && !dynamic_cast<const BackendError*>(&e)) throw;
        p.doubtful = true;
        p.failed = true;
        p.audit = std::string("error: ") + e.what();
    }
    return p;
}

ScoreVector score_relation(const RelationProposal& proposal, const PairEvidence& ev, AgentBackend& backend,
                           int retries) {
    const auto& criteria = criteria_for(proposal.relation.type);
    ScoreVector s;
    const json payload{{"a", profile_json(proposal.a)},
                       {"b", profile_json(proposal.b)},
                       {"relation", to_json(proposal.relation)},
                       {"justification", proposal.justification},
                       {"evidence", to_json(ev)},
                       {"criteria", criteria}};
    try {
        const auto r = ask(backend, {Role::Scoring}, TaskKind::ScoreRelation, payload, retries);
        for (const auto& c : criteria) {
            s.scores[c] = r["scores"][c].get<int>();
            if (r.contains("explanations") && r["explanations"].contains(c)) {
                s.explanations[c] = r["explanations"][c].get<std::string>();
            }
        }
        s.audit = r.dump();
    } catch (const DomainError& e) {
        if (!dynamic_cast<const SchemaError*>(&e) && !dynamic_cast<const BackendError*>(&e)) throw;
        for (const auto& c : criteria) s.scores[c] = 0;
        s.doubtful = true;
        s.audit = std::string("error: ") + e.what();
    }
    return s;
}

RelationDecision arbitrate(const RelationProposal& proposal, const ScoreVector& scores, const PairEvidence& ev,
                           AgentBackend& backend, const ArbitrationContext& ctx, int retries) {
    const auto& a = proposal.a.kc_id;
    const auto& b = proposal.b.kc_id;
    const double mean = scores.mean();
    RelationDecision d;
    d.confidence = std::clamp(mean / 5.0, 0.0, 1.0);
    d.provenance = DecisionStep::Arbitration;
    d.audit = {"proposal: " + proposal.audit, "scores: " + scores.audit};
    json accepted = json::array();
    for (const auto& r : ctx.accepted) {
        if (r.src == a || r.src == b || r.dst == a || r.dst == b) accepted.push_back(to_json(r));
    }
    const json payload{{"a", profile_json(proposal.a)},
                       {"b", profile_json(proposal.b)},
                       {"evidence", to_json(ev)},
                       {"proposal", {{"relation", to_json(proposal.relation)}, {"justification", proposal.justification}}},
                       {"scores", scores_json(scores)},
                       {"mean_score", mean},
                       {"doubt_threshold", ctx.doubt_threshold},
                       {"accepted_nearby", accepted}};
    TypedRelation final = proposal.relation;
    bool overridden = false;
    bool failed = false;
    try {
        const auto r = ask(backend, {Role::Arbiter}, TaskKind::Arbitrate, payload, retries);
        final = relation_from_json(r, a, b);
        overridden = !(final == proposal.relation);
        d.audit.push_back("arbitration: " + r.dump());
    } catch (const DomainError& e) {
        if (!dynamic_cast<const SchemaError*>(&e) && !dynamic_cast<const BackendError*>(&e)) throw;
        failed = true;
        d.audit.push_back(std::string("arbitration error: ") + e.what());
    }
    d.kc_a = final.src;
    d.kc_b = final.dst;
    d.final_type = final.type;
    const bool conflict = violates_axioms(final, ctx.accepted);
    if (conflict) d.audit.push_back("axiom conflict: " + relation_text(final));
    d.doubtful = mean < ctx.doubt_threshold || overridden || conflict || failed || proposal.failed ||
                 proposal.doubtful || scores.doubtful;
    return d;
}

bool violates_axioms(const TypedRelation& r, const std::vector<TypedRelation>& accepted) {
    if (r.type == RelationType::None) return false;
    for (const auto& e : accepted) {
        if (e.type == RelationType::None) continue;
        const bool same_pair = (e.src == r.src && e.dst == r.dst) || (e.src == r.dst && e.dst == r.src);
        if (!same_pair) continue;
        if (e.type != r.type) return true;
        if (!is_symmetric(r.type) && e.src != r.src) return true;
    }
    if (!is_acyclic_type(r.type)) return false;
    // Cycle iff r.src is reachable from r.dst along accepted edges of r's type.
    std::map<std::string, std::vector<std::string>> out;
    for (const auto& e : accepted) {
        if (e.type == r.type) out[e.src].push_back(e.dst);
    }
    std::set<std::string> seen{r.dst};
    std::vector<std::string> stack{r.dst};
    while (!stack.empty()) {
        const auto cur = stack.back();
        stack.pop_back();
        if (cur == r.src) return true;
        for (const auto& n : out[cur]) {
            if (seen.insert(n).second) stack.push_back(n);
        }
    }
    return false;
}

std::pair<TypedRelation, double> tally(const std::vector<Vote>& votes, const std::string& a, const std::string& b) {
    const TypedRelation none{RelationType::None, a, b};
    if (votes.empty()) return {none, 0.0};
    std::vector<std::pair<TypedRelation, std::size_t>> counts;
    for (const auto& v : votes) {
        const auto r = canonical(v.relation, a, b);
        auto it = std::find_if(counts.begin(), counts.end(), [&](const auto& c) { return c.first == r; });
        if (it == counts.end()) {
            counts.push_back({r, 1});
        } else {
            ++it->second;
        }
    }
    for (const auto& [r, n] : counts) {
        if (2 * n > votes.size()) return {r, static_cast<double>(n) / static_cast<double>(votes.size())};
    }
    return {none, 0.0};
}

namespace {

json vote_json(const Vote& v) {
    return {{"persona", std::string(to_string(v.persona))}, {"relation", to_json(v.relation)}, {"rationale", v.rationale}};
}

}  // namespace

std::vector<RelationDecision> cross_correct(const std::vector<DoubtfulCase>& doubtful, AgentBackend& backend,
                                            std::vector<TypedRelation> accepted, int retries) {
    std::vector<RelationDecision> out;
    out.reserve(doubtful.size());
    for (const auto& c : doubtful) {
        const auto& a = c.proposal.a.kc_id;
        const auto& b = c.proposal.b.kc_id;
        RelationDecision d = c.decision;
        const TypedRelation current = canonical({c.decision.final_type, c.decision.kc_a, c.decision.kc_b}, a, b);
        json base{{"a", profile_json(c.proposal.a)},
                  {"b", profile_json(c.proposal.b)},
                  {"evidence", to_json(c.evidence)},
                  {"proposal", {{"relation", to_json(c.proposal.relation)}, {"justification", c.proposal.justification}}},
                  {"scores", scores_json(c.scores)},
                  {"decision", {{"relation", to_json(current)}, {"confidence", c.decision.confidence}}}};

        auto run_round = [&](int round, const std::vector<Vote>& previous, const json& excluded) {
            std::vector<Vote> votes;
            for (auto persona : kPersonas) {
                json payload = base;
                payload["round"] = round;
                payload["peers"] = json::array();
                for (const auto& v : previous) {
                    if (v.persona != persona) payload["peers"].push_back(vote_json(v));
                }
                if (!excluded.empty()) payload["excluded"] = excluded;
                const AgentRole role{Role::Persona, persona};
                try {
                    const auto r = ask(backend, role, TaskKind::Vote, payload, retries);
                    Vote v{persona, relation_from_json(r, a, b), r["rationale"].get<std::string>()};
                    d.audit.push_back("vote round " + std::to_string(round) + " " + role.name() + ": " + r.dump());
                    votes.push_back(std::move(v));
                } catch (const DomainError& e) {
                    if (!dynamic_cast<const SchemaError*>(&e) && !dynamic_cast<const BackendError*>(&e)) throw;
                    d.audit.push_back("vote round " + std::to_string(round) + " " + role.name() +
                                      " abstained: " + e.what());
                }
            }
            return votes;
        };

        const auto round1 = run_round(1, {}, json::array());
        auto round2 = run_round(2, round1, json::array());
        auto [winner, share] = tally(round2, a, b);
        if (violates_axioms(winner, accepted)) {
            d.audit.push_back("axiom conflict: " + relation_text(winner) + "; re-voting without it");
            const auto revote = run_round(3, round2, json::array({to_json(winner)}));
            std::tie(winner, share) = tally(revote, a, b);
            if (violates_axioms(winner, accepted)) {
                d.audit.push_back("axiom conflict persists: " + relation_text(winner));
                winner = {RelationType::None, a, b};
                share = 0.0;
            }
        }
        d.audit.push_back("tally: " + relation_text(winner) + " share " + std::to_string(share));
        d.kc_a = winner.src;
        d.kc_b = winner.dst;
        d.final_type = winner.type;
        d.confidence = share;
        d.provenance = DecisionStep::CrossCorrection;
        d.doubtful = false;
        if (winner.type != RelationType::None) accepted.push_back(winner);
        out.push_back(std::move(d));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Orchestration

namespace {

// Runs job(i) for i in [0, n) on at most `workers` threads; the first
// exception thrown by any job is rethrown after all threads finish.
template <typename Job>
void parallel_for(std::size_t n, std::size_t workers, Job job) {
    workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) job(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) {
        threads.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    job(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                    next = n;
                }
            }
        });
    }
    for (auto& t : threads) t.join();
    if (error) std::rethrow_exception(error);
}

struct PairWork {
    std::size_t a = 0, b = 0;
    PairEvidence evidence;
    RelationProposal proposal;
    ScoreVector scores;
};

}  // namespace

ExtractionResult extract_relations(const std::vector<ConceptProfile>& kcs, const InteractionLog& log,
                                   AgentBackend& backend, const PipelineConfig& cfg) {
    if (kcs.empty()) throw DomainError("extract_relations: empty KC set");
    std::set<std::string> ids;
    for (const auto& k : kcs) {
        if (!ids.insert(k.kc_id).second) throw DomainError("extract_relations: duplicate KC " + k.kc_id);
    }
    ExtractionResult result;
    auto& profiles = result.profiles;
    profiles = kcs;
    std::sort(profiles.begin(), profiles.end(), [](const auto& x, const auto& y) { return x.kc_id < y.kc_id; });
    if (cfg.completion) {
        parallel_for(profiles.size(), cfg.max_in_flight,
                     [&](std::size_t i) { profiles[i] = complete_concept(profiles[i], backend, cfg.retries); });
    } else {
        for (auto& p : profiles) {
            if (blank(p.name)) throw DomainError("KC " + p.kc_id + " has no name");
            if (blank(p.definition)) p.definition = p.name;
        }
    }

    const EvidenceIndex index(log);
    std::vector<PairWork> work;
    for (std::size_t i = 0; i < profiles.size(); ++i) {
        for (std::size_t j = i + 1; j < profiles.size(); ++j) {
            auto ev = index.pair_or_empty(profiles[i], profiles[j]);
            if (ev.cooccurrence >= cfg.min_cooccurrence || ev.name_overlap >= cfg.min_name_overlap) {
                work.push_back({i, j, ev, {}, {}});
            }
        }
    }
    result.candidate_pairs = work.size();

    parallel_for(work.size(), cfg.max_in_flight, [&](std::size_t i) {
        auto& w = work[i];
        w.proposal = propose_relation(profiles[w.a], profiles[w.b], w.evidence, backend, cfg.retries);
        if (w.proposal.relation.type != RelationType::None) {
            w.scores = score_relation(w.proposal, w.evidence, backend, cfg.retries);
        }
    });
    if (!work.empty() && std::all_of(work.begin(), work.end(), [](const auto& w) { return w.proposal.failed; })) {
        throw BackendError("every relation proposal failed; first error: " + work.front().proposal.audit);
    }

    // Arbitration is sequential so that axiom checks see earlier acceptances;
    // strongest proposals go first.
    std::vector<std::size_t> order(work.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return work[x].scores.mean() > work[y].scores.mean(); });

    std::vector<RelationDecision> decisions(work.size());
    std::vector<std::size_t> doubtful_idx;
    ArbitrationContext ctx;
    ctx.doubt_threshold = cfg.doubt_threshold;
    for (auto i : order) {
        auto& w = work[i];
        auto& d = decisions[i];
        if (w.proposal.relation.type == RelationType::None && !w.proposal.failed) {
            d.kc_a = profiles[w.a].kc_id;
            d.kc_b = profiles[w.b].kc_id;
            d.final_type = RelationType::None;
            d.audit = {"proposal: " + w.proposal.audit};
            continue;
        }
        if (w.proposal.failed) {
            d.kc_a = profiles[w.a].kc_id;
            d.kc_b = profiles[w.b].kc_id;
            d.doubtful = true;
            d.audit = {"proposal: " + w.proposal.audit};
        } else {
            d = arbitrate(w.proposal, w.scores, w.evidence, backend, ctx, cfg.retries);
        }
        if (d.doubtful) {
            doubtful_idx.push_back(i);
        } else if (d.final_type != RelationType::None) {
            ctx.accepted.push_back(canonical({d.final_type, d.kc_a, d.kc_b}, profiles[w.a].kc_id, profiles[w.b].kc_id));
        }
    }

    if (cfg.cross_correction && !doubtful_idx.empty()) {
        std::vector<DoubtfulCase> cases;
        for (auto i : doubtful_idx) cases.push_back({decisions[i], work[i].proposal, work[i].scores, work[i].evidence});
        auto corrected = cross_correct(cases, backend, ctx.accepted, cfg.retries);
        for (std::size_t k = 0; k < doubtful_idx.size(); ++k) decisions[doubtful_idx[k]] = std::move(corrected[k]);
    }

    auto built = graphs::build_kc_graph(profiles, decisions);
    result.graph = std::move(built.graph);
    result.dropped = std::move(built.dropped);
    result.decisions = std::move(decisions);
    return result;
}

std::string decision_to_line(const RelationDecision& d) {
    const json j{{"kc_a", d.kc_a},
                 {"kc_b", d.kc_b},
                 {"type", std::string(to_string(d.final_type))},
                 {"confidence", d.confidence},
                 {"provenance", std::string(to_string(d.provenance))},
                 {"doubtful", d.doubtful},
                 {"audit", d.audit}};
    return j.dump();
}

RelationDecision decision_from_json(const json& j) {
    RelationDecision d;
    d.kc_a = j.at("kc_a").get<std::string>();
    d.kc_b = j.at("kc_b").get<std::string>();
    d.final_type = relation_from_string(j.at("type").get<std::string>());
    d.confidence = j.at("confidence").get<double>();
    const auto prov = j.at("provenance").get<std::string>();
    if (prov == to_string(DecisionStep::Arbitration)) {
        d.provenance = DecisionStep::Arbitration;
    } else if (prov == to_string(DecisionStep::CrossCorrection)) {
        d.provenance = DecisionStep::CrossCorrection;
    } else {
        throw DomainError("unknown decision provenance: " + prov);
    }
    d.doubtful = j.at("doubtful").get<bool>();
    d.audit = j.at("audit").get<std::vector<std::string>>();
    return d;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

using RelKey = std::tuple<RelationType, std::string, std::string>;

RelKey key_of(const TypedRelation& r) {
    if (is_symmetric(r.type)) return {r.type, std::min(r.src, r.dst), std::max(r.src, r.dst)};
    return {r.type, r.src, r.dst};
}

std::pair<std::string, std::string> unordered(const TypedRelation& r) {
    return {std::min(r.src, r.dst), std::max(r.src, r.dst)};
}

}  // namespace

std::vector<TypedRelation> graph_relations(const KcGraph& g) {
    std::set<RelKey> seen;
    std::vector<TypedRelation> out;
    for (const auto& e : g.edges()) {
        TypedRelation r{e.type, g.nodes()[e.src].kc_id, g.nodes()[e.dst].kc_id};
        const auto k = key_of(r);
        if (!seen.insert(k).second) continue;
        out.push_back({std::get<0>(k), std::get<1>(k), std::get<2>(k)});
    }
    return out;
}

RelationScores evaluate_relations(const KcGraph& predicted, const std::vector<TypedRelation>& gold) {
    if (gold.empty()) throw DomainError("evaluate_relations: empty gold set");
    std::set<RelKey> g, p;
    std::set<std::pair<std::string, std::string>> gold_pairs, pred_pairs;
    for (const auto& r : gold) {
        if (r.type == RelationType::None) throw DomainError("gold relation " + r.src + "/" + r.dst + " has type None");
        g.insert(key_of(r));
        gold_pairs.insert(unordered(r));
    }
    for (const auto& r : graph_relations(predicted)) {
        p.insert(key_of(r));
        pred_pairs.insert(unordered(r));
    }
    std::size_t covered = 0;
    for (const auto& pr : gold_pairs) covered += pred_pairs.count(pr);
    std::size_t common = 0;
    for (const auto& k : g) common += p.count(k);
    RelationScores s;
    s.pred = 100.0 * static_cast<double>(covered) / static_cast<double>(gold_pairs.size());
    s.corr = 100.0 * static_cast<double>(common) / static_cast<double>(g.size());
    s.jacc = 100.0 * static_cast<double>(common) / static_cast<double>(g.size() + p.size() - common);
    return s;
}

std::vector<TypedRelation> read_gold_relations(std::istream& in) {
    std::vector<TypedRelation> out;
    std::string line;
    std::size_t lineno = 0;
    bool first = true;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto start = line.find_first_not_of(" \t");
        if (start == std::string::npos || line[start] == '#') continue;
        const char delim = line.find('\t') != std::string::npos ? '\t' : ',';
        std::vector<std::string> fields;
        std::stringstream ss(line);
        for (std::string f; std::getline(ss, f, delim);) {
            const auto b = f.find_first_not_of(" \t");
            const auto e = f.find_last_not_of(" \t");
            fields.push_back(b == std::string::npos ? std::string() : f.substr(b, e - b + 1));
        }
        const bool header = first && fields.size() >= 3 && fields[2] == "type";
        first = false;
        if (header) continue;
        if (fields.size() != 3) {
            throw DomainError("gold relations line " + std::to_string(lineno) + ": expected src,dst,type");
        }
        TypedRelation r{relation_from_string(fields[2]), fields[0], fields[1]};
        if (r.type == RelationType::None || r.src.empty() || r.dst.empty() || r.src == r.dst) {
            throw DomainError("gold relations line " + std::to_string(lineno) + ": not a typed pair of two KCs");
        }
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<std::string> gold_to_lines(const std::vector<TypedRelation>& gold) {
    std::vector<std::string> out{"src,dst,type"};
    for (const auto& r : gold) out.push_back(r.src + "," + r.dst + "," + std::string(to_string(r.type)));
    return out;
}

}  // namespace magekt::agents
