#include <doctest/doctest.h>

#include "magekt/agents.hpp"
#include "magekt/chat_backend.hpp"
#include "magekt/graphs.hpp"
#include "magekt/heuristic_backend.hpp"
#include "magekt/random.hpp"
#include "magekt/synth.hpp"

#include <httplib.h>

#include <atomic>
#include <cstdlib>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <thread>

using namespace magekt;
using namespace magekt::agents;
using nlohmann::json;

namespace {

using Responder = std::function<json(const AgentRole&, TaskKind, const json&)>;

// Backend driven by a test-supplied function; counts calls.
class FnBackend : public AgentBackend {
public:
    explicit FnBackend(Responder fn) : fn_(std::move(fn)) {}
    json respond(const AgentRole& role, TaskKind task, const json& payload) override {
        ++calls;
        return fn_(role, task, payload);
    }
    std::atomic<int> calls{0};

private:
    Responder fn_;
};

ConceptProfile kc(const std::string& id, const std::string& name = "", const std::string& def = "",
                  const std::string& cat = "") {
    return {id, name.empty() ? id : name, def, cat, false};
}

Interaction rec(const std::string& s, const std::string& k, int y, double t) {
    return {s, "q_" + k, {k}, y, t};
}

json rel(RelationType t, const std::string& src, const std::string& dst) {
    return to_json(TypedRelation{t, src, dst});
}

json vote_reply(RelationType t, const std::string& src, const std::string& dst) {
    auto j = rel(t, src, dst);
    j["rationale"] = "scripted";
    return j;
}

// Independent dependence oracle: quadratic scan for the latest strictly
// earlier attempt on `a` before every attempt on `b`.
double dependence_oracle(const InteractionLog& log, const std::string& a, const std::string& b) {
    double n[2] = {0, 0}, c[2] = {0, 0};
    const auto& r = log.records();
    for (const auto& [sid, idx] : log.student_sequences()) {
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto& cur = r[idx[i]];
            if (cur.kc_ids[0] != b) continue;
            int g = -1;
            // Sequences are time-sorted, so the last qualifying A wins.
            for (std::size_t j = 0; j < idx.size(); ++j) {
                const auto& prev = r[idx[j]];
                if (prev.kc_ids[0] == a && prev.timestamp < cur.timestamp) g = prev.correct;
            }
            if (g < 0) continue;
            n[g] += 1;
            c[g] += cur.correct;
        }
    }
    if (n[0] == 0 || n[1] == 0) return 0.0;
    return c[1] / n[1] - c[0] / n[0];
}

InteractionLog random_log(std::uint64_t seed, std::size_t students, std::size_t kcs, std::size_t len) {
    Rng rng(seed);
    std::vector<Interaction> out;
    for (std::size_t s = 0; s < students; ++s) {
        double t = 0;
        for (std::size_t i = 0; i < len; ++i) {
            // Coarse clock so that equal timestamps occur.
            t += static_cast<double>(rng.below(2));
            out.push_back(rec("s" + std::to_string(s), "k" + std::to_string(rng.below(kcs)),
                              rng.bernoulli(0.5) ? 1 : 0, t));
        }
    }
    return InteractionLog(std::move(out));
}

ScoreVector scores_of(std::initializer_list<int> values) {
    ScoreVector s;
    int i = 0;
    for (int v : values) s.scores["c" + std::to_string(i++)] = v;
    return s;
}

RelationProposal proposal_of(const std::string& a, const std::string& b, TypedRelation r) {
    RelationProposal p;
    p.a = kc(a);
    p.b = kc(b);
    p.relation = std::move(r);
    p.audit = "{}";
    return p;
}

// Arbiter that echoes the proposal.
json echo_arbiter(const json& payload) {
    json out = payload.at("proposal").at("relation");
    out["rationale"] = "ok";
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tokens and evidence

TEST_CASE("tokens drop stop words and punctuation") {
    CHECK(tokens("Rules of Probability!") == std::set<std::string>{"rules", "probability"});
    CHECK(tokens("") .empty());
    CHECK(jaccard({"a", "b"}, {"b", "c"}) == doctest::Approx(1.0 / 3.0));
    CHECK(jaccard({}, {}) == 0.0);
}

TEST_CASE("pair evidence without co-attempts is empty") {
    const InteractionLog log({rec("s1", "A", 1, 0), rec("s2", "B", 0, 0)});
    const auto ev = compute_pair_evidence(log, kc("A", "alpha"), kc("B", "beta"));
    CHECK(ev.cooccurrence == 0);
    CHECK(ev.precedence_prob == 0.0);
    CHECK(ev.dependence == 0.0);
    CHECK(ev.name_overlap == 0.0);
}

TEST_CASE("pair evidence rejects identical and unknown KCs") {
    const InteractionLog log({rec("s1", "A", 1, 0), rec("s1", "B", 0, 1)});
    CHECK_THROWS_AS(compute_pair_evidence(log, kc("A"), kc("A")), DomainError);
    CHECK_THROWS_AS(compute_pair_evidence(log, kc("A"), kc("Z")), DomainError);
    const EvidenceIndex index(log);
    CHECK(index.pair_or_empty(kc("A"), kc("Z")).cooccurrence == 0);
}

TEST_CASE("precedence from three students who all meet A first") {
    std::vector<Interaction> r;
    for (int s = 0; s < 3; ++s) {
        const auto sid = "s" + std::to_string(s);
        r.push_back(rec(sid, "A", 1, 0));
        r.push_back(rec(sid, "B", 1, 1 + s));
        r.push_back(rec(sid, "A", 0, 5));
    }
    const InteractionLog log(r);
    // Brute-force: count students whose first A time is below their first B time.
    std::map<std::string, std::pair<double, double>> first;
    for (const auto& x : r) {
        auto& f = first.try_emplace(x.student_id, 1e300, 1e300).first->second;
        auto& slot = x.kc_ids[0] == "A" ? f.first : f.second;
        slot = std::min(slot, x.timestamp);
    }
    double ab = 0;
    for (const auto& [s, f] : first) ab += f.first < f.second;
    const auto ev = compute_pair_evidence(log, kc("A"), kc("B"));
    CHECK(ev.cooccurrence == 3);
    CHECK(ev.precedence_prob == ab / 3.0);
    CHECK(ev.precedence_prob == 1.0);
    CHECK(ev.reverse_precedence_prob == 0.0);
}

TEST_CASE("simultaneous first attempts count in neither direction") {
    const InteractionLog log({rec("s1", "A", 1, 2), rec("s1", "B", 1, 2)});
    const auto ev = compute_pair_evidence(log, kc("A"), kc("B"));
    CHECK(ev.precedence_prob == 0.0);
    CHECK(ev.reverse_precedence_prob == 0.0);
}

TEST_CASE("dependence matches a quadratic oracle and its sign flips on mirrored logs") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto log = random_log(seed, 12, 3, 25);
        const EvidenceIndex index(log);
        for (const char* a : {"k0", "k1", "k2"}) {
            for (const char* b : {"k0", "k1", "k2"}) {
                if (std::string(a) == b || !index.has_kc(a) || !index.has_kc(b)) continue;
                const auto ev = index.pair(kc(a), kc(b));
                CHECK(ev.dependence == doctest::Approx(dependence_oracle(log, a, b)).epsilon(1e-12));
                CHECK(ev.reverse_dependence == doctest::Approx(dependence_oracle(log, b, a)).epsilon(1e-12));
                CHECK(ev.precedence_prob + ev.reverse_precedence_prob <= 1.0 + 1e-15);
                CHECK(ev.dependence >= -1.0);
                CHECK(ev.dependence <= 1.0);
            }
        }
        // Flip the correctness of every A attempt: the dependence of B on A
        // changes sign exactly.
        std::vector<Interaction> mirrored = log.records();
        for (auto& x : mirrored) {
            if (x.kc_ids[0] == "k0") x.correct = 1 - x.correct;
        }
        const auto ev = compute_pair_evidence(log, kc("k0"), kc("k1"));
        const auto mev = compute_pair_evidence(InteractionLog(mirrored), kc("k0"), kc("k1"));
        CHECK(mev.dependence == doctest::Approx(-ev.dependence).epsilon(1e-12));
    }
}

TEST_CASE("reversed evidence swaps the directional fields") {
    const auto log = random_log(3, 10, 2, 20);
    const EvidenceIndex index(log);
    const auto ab = index.pair(kc("k0"), kc("k1"));
    const auto ba = index.pair(kc("k1"), kc("k0"));
    CHECK(ab.reversed() == ba);
    CHECK(evidence_from_json(to_json(ab)) == ab);
}

TEST_CASE("co-occurrence counts agree with pair evidence") {
    const auto log = random_log(9, 15, 4, 6);
    const EvidenceIndex index(log);
    for (const auto& [pair, n] : index.cooccurrence_counts()) {
        CHECK(index.pair(kc(pair.first), kc(pair.second)).cooccurrence == n);
    }
}

// ---------------------------------------------------------------------------
// Schema validation and retries

TEST_CASE("response validation") {
    const json pair{{"a", {{"kc_id", "A"}}}, {"b", {{"kc_id", "B"}}}};
    CHECK_NOTHROW(validate_response(TaskKind::CompleteConcept, {},
                                    {{"name", "x"}, {"definition", "d"}, {"category", "c"}}));
    CHECK_THROWS_AS(validate_response(TaskKind::CompleteConcept, {}, {{"name", "x"}, {"definition", " "},
                                                                      {"category", "c"}}),
                    SchemaError);
    CHECK_THROWS_AS(validate_response(TaskKind::CompleteConcept, {}, json::array()), SchemaError);

    json ok = vote_reply(RelationType::PredecessorSuccessor, "B", "A");
    ok["justification"] = "j";
    CHECK_NOTHROW(validate_response(TaskKind::ProposeRelation, pair, ok));
    json stranger = ok;
    stranger["src"] = "C";
    CHECK_THROWS_AS(validate_response(TaskKind::ProposeRelation, pair, stranger), SchemaError);
    json badtype = ok;
    badtype["type"] = "Cousin";
    CHECK_THROWS_AS(validate_response(TaskKind::ProposeRelation, pair, badtype), SchemaError);
    CHECK_NOTHROW(validate_response(TaskKind::Vote, pair, {{"type", "None"}, {"rationale", ""}}));

    json spay = pair;
    spay["criteria"] = criteria_for(RelationType::Sibling);
    json scores{{"SharedParent", 5}, {"ParallelScope", 0}, {"Independence", 3}};
    CHECK_NOTHROW(validate_response(TaskKind::ScoreRelation, spay, {{"scores", scores}}));
    scores["Independence"] = 7;
    CHECK_THROWS_AS(validate_response(TaskKind::ScoreRelation, spay, {{"scores", scores}}), SchemaError);
    scores["Independence"] = 2.5;
    CHECK_THROWS_AS(validate_response(TaskKind::ScoreRelation, spay, {{"scores", scores}}), SchemaError);
    scores.erase("Independence");
    CHECK_THROWS_AS(validate_response(TaskKind::ScoreRelation, spay, {{"scores", scores}}), SchemaError);

    json vpay = pair;
    vpay["excluded"] = json::array({rel(RelationType::Sibling, "A", "B")});
    CHECK_THROWS_AS(validate_response(TaskKind::Vote, vpay, vote_reply(RelationType::Sibling, "B", "A")),
                    SchemaError);
    CHECK_NOTHROW(validate_response(TaskKind::Vote, vpay, vote_reply(RelationType::Association, "B", "A")));
}

TEST_CASE("ask re-asks with a repair note, then gives up") {
    int calls = 0;
    std::vector<bool> saw_repair;
    FnBackend flaky([&](const AgentRole&, TaskKind, const json& p) -> json {
        saw_repair.push_back(p.contains("repair"));
        if (++calls < 3) return {{"name", "x"}};
        return {{"name", "x"}, {"definition", "d"}, {"category", "c"}};
    });
    const auto r = ask(flaky, {}, TaskKind::CompleteConcept, {{"name", "x"}}, 3);
    CHECK(r["definition"] == "d");
    CHECK(saw_repair == std::vector<bool>{false, true, true});

    FnBackend never([](const AgentRole&, TaskKind, const json&) -> json { return json::object(); });
    CHECK_THROWS_AS(ask(never, {}, TaskKind::CompleteConcept, {{"name", "x"}}, 3), SchemaError);
    CHECK(never.calls == 4);
}

// ---------------------------------------------------------------------------
// Step 1

TEST_CASE("concept completion with the heuristic backend") {
    HeuristicBackend be;
    const auto p = complete_concept({"k1", "Linear  Equations", "", "", false}, be);
    CHECK(p.name == "linear equations");
    CHECK(p.definition.find("linear equations") != std::string::npos);
    CHECK(p.category == heuristic_category("linear equations"));
    CHECK(p.category == "algebra");
    CHECK_FALSE(p.degraded);
    CHECK(heuristic_category("Estimation") == "estimation");
    CHECK(heuristic_category("the") == "general");

    SUBCASE("already profiled is unchanged") {
        const ConceptProfile done{"k2", "Angles", "Measuring turns.", "geometry", false};
        FnBackend untouched([](const AgentRole&, TaskKind, const json&) -> json { throw std::logic_error("called"); });
        CHECK(complete_concept(done, untouched) == done);
        CHECK(complete_concept(p, be) == p);
    }
    SUBCASE("empty name is rejected") {
        CHECK_THROWS_AS(complete_concept({"k3", "  ", "", "", false}, be), DomainError);
    }
    SUBCASE("failing backend degrades to the name") {
        FnBackend broken([](const AgentRole&, TaskKind, const json&) -> json { return {{"oops", 1}}; });
        const auto d = complete_concept({"k4", "Ratios", "", "", false}, broken, 2);
        CHECK(d.definition == "Ratios");
        CHECK(d.degraded);
        CHECK(broken.calls == 3);
        FnBackend down([](const AgentRole&, TaskKind, const json&) -> json { throw BackendError("offline"); });
        CHECK(complete_concept({"k4", "Ratios", "", "", false}, down).degraded);
    }
}

// ---------------------------------------------------------------------------
// Step 2

TEST_CASE("heuristic proposal rules") {
    HeuristicBackend be;
    const auto a = kc("A", "fraction rules");
    const auto b = kc("B", "rules of fraction");
    PairEvidence ev;

    SUBCASE("high overlap gives Equivalence") {
        ev.name_overlap = 0.8;
        CHECK(propose_relation(a, b, ev, be).relation.type == RelationType::Equivalence);
        ev.name_overlap = 0.79;
        CHECK(heuristic_relation(a, b, ev).type != RelationType::Equivalence);
    }
    SUBCASE("precedence with dependence gives PredecessorSuccessor in the observed direction") {
        const auto x = kc("X", "alpha");
        const auto y = kc("Y", "beta");
        ev.precedence_prob = 0.7;
        ev.dependence = 0.15;
        auto p = propose_relation(x, y, ev, be);
        CHECK(p.relation == TypedRelation{RelationType::PredecessorSuccessor, "X", "Y"});
        p = propose_relation(y, x, ev.reversed(), be);
        CHECK(p.relation == TypedRelation{RelationType::PredecessorSuccessor, "X", "Y"});
        ev.dependence = 0.14;
        CHECK(heuristic_relation(x, y, ev).type == RelationType::None);
    }
    SUBCASE("nested names give Containment with the broader KC as source") {
        const auto broad = kc("P", "probability");
        const auto part = kc("Q", "probability trees");
        ev.name_overlap = 0.5;
        CHECK(heuristic_relation(part, broad, ev) == TypedRelation{RelationType::Containment, "P", "Q"});
        ev.name_overlap = 0.49;
        CHECK(heuristic_relation(part, broad, ev).type != RelationType::Containment);
    }
    SUBCASE("shared category without order gives Sibling") {
        const auto x = kc("X", "fraction graphs", "", "arithmetic");
        const auto y = kc("Y", "fraction tables", "", "arithmetic");
        ev.name_overlap = 0.5;
        ev.precedence_prob = 0.69;
        CHECK(heuristic_relation(x, y, ev).type == RelationType::Sibling);
        ev.precedence_prob = 0.7;
        CHECK(heuristic_relation(x, y, ev).type != RelationType::Sibling);
    }
    SUBCASE("co-occurrence alone gives Association") {
        ev.cooccurrence = 3;
        CHECK(heuristic_relation(kc("X", "alpha"), kc("Y", "beta"), ev).type == RelationType::Association);
    }
    SUBCASE("no evidence gives None") {
        ev.cooccurrence = 0;
        ev.name_overlap = 0.05;
        const auto p = propose_relation(kc("X", "alpha"), kc("Y", "beta"), ev, be);
        CHECK(p.relation.type == RelationType::None);
        CHECK_FALSE(p.doubtful);
    }
    SUBCASE("schema failure gives a doubtful None") {
        FnBackend junk([](const AgentRole&, TaskKind, const json&) -> json { return {{"type", "Bogus"}}; });
        const auto p = propose_relation(a, b, ev, junk, 1);
        CHECK(p.relation.type == RelationType::None);
        CHECK(p.doubtful);
        CHECK(p.failed);
        CHECK(junk.calls == 2);
    }
}

// ---------------------------------------------------------------------------
// Step 3

TEST_CASE("relation scoring") {
    HeuristicBackend be;
    PairEvidence ev;
    ev.cooccurrence = 10;
    ev.precedence_prob = 1.0;
    ev.dependence = 0.3;
    const auto p = proposal_of("A", "B", {RelationType::PredecessorSuccessor, "A", "B"});
    const auto s = score_relation(p, ev, be);
    CHECK(s.scores.size() == 3);
    for (const auto& c : {"PredecessorDependency", "CorrectnessDependency", "AnswerOrderSequence"}) {
        CHECK(s.scores.count(c) == 1);
    }
    // 5 * clamp(1.0, 0, 1) = 5.
    CHECK(s.scores.at("AnswerOrderSequence") == 5);
    CHECK(s.scores.at("PredecessorDependency") == 5);
    CHECK(s.scores.at("CorrectnessDependency") == 5);
    CHECK(s.mean() == 5.0);

    // The same relation seen from the other side scores identically.
    const auto flipped = proposal_of("B", "A", {RelationType::PredecessorSuccessor, "A", "B"});
    CHECK(score_relation(flipped, ev.reversed(), be).scores == s.scores);

    for (auto t : kAllRelationTypes) {
        if (t == RelationType::None) continue;
        const auto sv = score_relation(proposal_of("A", "B", {t, "A", "B"}), ev, be);
        CHECK(sv.scores.size() == criteria_for(t).size());
        for (const auto& [k, v] : sv.scores) {
            CHECK(v >= 0);
            CHECK(v <= 5);
        }
    }

    SUBCASE("bucketing rule") {
        for (double prec : {0.0, 0.09, 0.1, 0.31, 0.5, 0.69, 0.7, 0.95, 1.0}) {
            PairEvidence e;
            e.precedence_prob = prec;
            const auto sc = heuristic_scores({RelationType::PredecessorSuccessor, "A", "B"}, kc("A"), kc("B"), e);
            CHECK(sc.at("AnswerOrderSequence") == static_cast<int>(std::lround(5 * prec)));
        }
    }
    SUBCASE("out-of-range scores are retried, then zeroed") {
        FnBackend seven([](const AgentRole&, TaskKind, const json& payload) -> json {
            json s = json::object();
            for (const auto& c : payload["criteria"]) s[c.get<std::string>()] = 7;
            return {{"scores", s}};
        });
        const auto z = score_relation(p, ev, seven, 3);
        CHECK(seven.calls == 4);
        CHECK(z.doubtful);
        CHECK(z.scores.size() == 3);
        CHECK(z.mean() == 0.0);
    }
    SUBCASE("None proposals cannot be scored") {
        CHECK_THROWS_AS(score_relation(proposal_of("A", "B", {RelationType::None, "A", "B"}), ev, be), DomainError);
    }
}

// ---------------------------------------------------------------------------
// Step 4

TEST_CASE("arbitration") {
    HeuristicBackend be;
    const PairEvidence ev;
    const TypedRelation ab{RelationType::PredecessorSuccessor, "A", "B"};
    const auto p = proposal_of("A", "B", ab);

    SUBCASE("confident proposal is confirmed") {
        const auto s = scores_of({4, 4, 4, 4, 4, 4, 4, 5, 5, 5});
        const auto d = arbitrate(p, s, ev, be, {});
        CHECK(d.final_type == RelationType::PredecessorSuccessor);
        CHECK(d.kc_a == "A");
        CHECK(d.kc_b == "B");
        CHECK(d.confidence == doctest::Approx(4.3 / 5.0).epsilon(1e-12));
        CHECK(d.confidence == doctest::Approx(0.86).epsilon(1e-12));
        CHECK_FALSE(d.doubtful);
        CHECK(d.provenance == DecisionStep::Arbitration);
        CHECK(d.audit.size() == 3);
    }
    SUBCASE("low mean is doubtful") {
        const auto d = arbitrate(p, scores_of({1, 1, 1}), ev, be, {});
        CHECK(d.doubtful);
        CHECK(d.confidence == doctest::Approx(0.2));
        CHECK_FALSE(arbitrate(p, scores_of({3, 3, 3}), ev, be, {}).doubtful);
        CHECK(arbitrate(p, scores_of({3, 3, 2}), ev, be, {}).doubtful);
    }
    SUBCASE("closing a prerequisite cycle is doubtful") {
        ArbitrationContext ctx;
        ctx.accepted = {{RelationType::PredecessorSuccessor, "B", "C"}, {RelationType::PredecessorSuccessor, "C", "A"}};
        const auto d = arbitrate(p, scores_of({5, 5, 5}), ev, be, ctx);
        CHECK(d.doubtful);
    }
    SUBCASE("an overriding arbiter is doubtful") {
        FnBackend other([](const AgentRole&, TaskKind, const json&) -> json {
            return vote_reply(RelationType::Association, "A", "B");
        });
        const auto d = arbitrate(p, scores_of({5, 5, 5}), ev, other, {});
        CHECK(d.final_type == RelationType::Association);
        CHECK(d.doubtful);
    }
    SUBCASE("arbiter failure keeps the proposal, doubtful") {
        FnBackend junk([](const AgentRole&, TaskKind, const json&) -> json { return json::object(); });
        const auto d = arbitrate(p, scores_of({5, 5, 5}), ev, junk, {}, 1);
        CHECK(d.final_type == RelationType::PredecessorSuccessor);
        CHECK(d.doubtful);
    }
}

TEST_CASE("axiom checks") {
    using RT = RelationType;
    const std::vector<TypedRelation> acc{{RT::PredecessorSuccessor, "A", "B"},
                                         {RT::PredecessorSuccessor, "B", "C"},
                                         {RT::Sibling, "D", "E"}};
    CHECK(violates_axioms({RT::PredecessorSuccessor, "C", "A"}, acc));
    CHECK_FALSE(violates_axioms({RT::PredecessorSuccessor, "A", "C"}, acc));
    CHECK_FALSE(violates_axioms({RT::Containment, "C", "A"}, acc));
    CHECK(violates_axioms({RT::PredecessorSuccessor, "B", "A"}, acc));
    CHECK(violates_axioms({RT::Association, "A", "B"}, acc));
    CHECK_FALSE(violates_axioms({RT::Sibling, "E", "D"}, acc));
    CHECK(violates_axioms({RT::Equivalence, "E", "D"}, acc));
    CHECK_FALSE(violates_axioms({RT::None, "C", "A"}, acc));
}

// ---------------------------------------------------------------------------
// Step 5

TEST_CASE("vote tally") {
    using RT = RelationType;
    const auto v = [](RT t, const char* s = "A", const char* d = "B") {
        return Vote{Persona::Teaching, {t, s, d}, ""};
    };
    auto [r, share] = tally({v(RT::PredecessorSuccessor), v(RT::PredecessorSuccessor), v(RT::PredecessorSuccessor)},
                            "A", "B");
    CHECK(r.type == RT::PredecessorSuccessor);
    CHECK(share == 1.0);
    std::tie(r, share) = tally({v(RT::PredecessorSuccessor), v(RT::Association), v(RT::PredecessorSuccessor)}, "A", "B");
    CHECK(r.type == RT::PredecessorSuccessor);
    CHECK(share == doctest::Approx(2.0 / 3.0));
    std::tie(r, share) = tally({v(RT::PredecessorSuccessor), v(RT::Association), v(RT::Sibling)}, "A", "B");
    CHECK(r.type == RT::None);
    // Opposite orientations are different relations.
    std::tie(r, share) = tally({v(RT::PredecessorSuccessor), v(RT::PredecessorSuccessor, "B", "A")}, "A", "B");
    CHECK(r.type == RT::None);
    // Symmetric relations ignore orientation.
    std::tie(r, share) = tally({v(RT::Sibling), v(RT::Sibling, "B", "A")}, "A", "B");
    CHECK(r.type == RT::Sibling);
    CHECK(tally({}, "A", "B").first.type == RT::None);
}

namespace {

DoubtfulCase doubtful_case(const std::string& a, const std::string& b) {
    DoubtfulCase c;
    c.proposal = proposal_of(a, b, {RelationType::Containment, a, b});
    c.scores = scores_of({2, 2, 2});
    c.decision.kc_a = a;
    c.decision.kc_b = b;
    c.decision.final_type = RelationType::Containment;
    c.decision.confidence = 0.4;
    c.decision.doubtful = true;
    c.decision.audit = {"proposal: {}"};
    return c;
}

// Personas answer from a per-persona script; rounds after the first echo
// round 1 unless `later` overrides.
Responder scripted(std::map<Persona, json> first, std::map<Persona, json> later = {}) {
    return [first, later](const AgentRole& role, TaskKind task, const json& payload) -> json {
        REQUIRE(task == TaskKind::Vote);
        REQUIRE(role.role == Role::Persona);
        const auto& table = payload["round"].get<int>() > 1 && later.count(role.persona) ? later : first;
        return table.at(role.persona);
    };
}

}  // namespace

TEST_CASE("cross-correction") {
    using RT = RelationType;
    const auto P = vote_reply(RT::PredecessorSuccessor, "A", "B");
    const auto As = vote_reply(RT::Association, "A", "B");
    const auto S = vote_reply(RT::Sibling, "A", "B");
    const std::vector<DoubtfulCase> cases{doubtful_case("A", "B")};

    SUBCASE("unanimous") {
        FnBackend be(scripted({{Persona::Teaching, P}, {Persona::Structure, P}, {Persona::Behavior, P}}));
        const auto d = cross_correct(cases, be, {}).at(0);
        CHECK(d.final_type == RT::PredecessorSuccessor);
        CHECK(d.confidence == 1.0);
        CHECK(d.provenance == DecisionStep::CrossCorrection);
        CHECK(be.calls == 6);
        std::size_t votes = 0;
        for (const auto& line : d.audit) votes += line.rfind("vote round", 0) == 0;
        CHECK(votes == 6);
    }
    SUBCASE("two of three") {
        FnBackend be(scripted({{Persona::Teaching, P}, {Persona::Structure, As}, {Persona::Behavior, P}}));
        const auto d = cross_correct(cases, be, {}).at(0);
        CHECK(d.final_type == RT::PredecessorSuccessor);
        CHECK(d.confidence == doctest::Approx(2.0 / 3.0));
    }
    SUBCASE("no majority") {
        FnBackend be(scripted({{Persona::Teaching, P}, {Persona::Structure, As}, {Persona::Behavior, S}}));
        const auto d = cross_correct(cases, be, {}).at(0);
        CHECK(d.final_type == RT::None);
    }
    SUBCASE("round two decides") {
        FnBackend be(scripted({{Persona::Teaching, P}, {Persona::Structure, As}, {Persona::Behavior, S}},
                              {{Persona::Structure, P}, {Persona::Behavior, P}}));
        CHECK(cross_correct(cases, be, {}).at(0).confidence == 1.0);
    }
    SUBCASE("round two sees only peers") {
        std::mutex m;
        std::vector<std::size_t> peer_counts;
        FnBackend be([&](const AgentRole& role, TaskKind, const json& payload) -> json {
            std::lock_guard lock(m);
            if (payload["round"] == 2) {
                peer_counts.push_back(payload["peers"].size());
                for (const auto& p : payload["peers"]) CHECK(p["persona"] != std::string(to_string(role.persona)));
            } else {
                CHECK(payload["peers"].empty());
            }
            return P;
        });
        cross_correct(cases, be, {});
        CHECK(peer_counts == std::vector<std::size_t>{2, 2, 2});
    }
    SUBCASE("failing personas abstain") {
        FnBackend be([&](const AgentRole& role, TaskKind, const json&) -> json {
            if (role.persona == Persona::Behavior) throw BackendError("down");
            if (role.persona == Persona::Structure) return json::object();
            return P;
        });
        const auto d = cross_correct(cases, be, {}, 0).at(0);
        CHECK(d.final_type == RT::PredecessorSuccessor);
        CHECK(d.confidence == 1.0);
    }
    SUBCASE("no valid votes") {
        FnBackend be([](const AgentRole&, TaskKind, const json&) -> json { throw BackendError("down"); });
        const auto d = cross_correct(cases, be, {}).at(0);
        CHECK(d.final_type == RT::None);
        CHECK(d.confidence == 0.0);
    }
    SUBCASE("axiom violators are re-voted, then dropped") {
        const std::vector<TypedRelation> acc{{RT::PredecessorSuccessor, "B", "A"}};
        std::vector<json> excluded_seen;
        FnBackend be([&](const AgentRole&, TaskKind, const json& payload) -> json {
            if (payload.contains("excluded")) excluded_seen.push_back(payload["excluded"]);
            return payload.contains("excluded") ? As : P;
        });
        auto d = cross_correct(cases, be, acc).at(0);
        CHECK(excluded_seen.size() == 3);
        // Association also conflicts with the accepted prerequisite.
        CHECK(d.final_type == RT::None);

        FnBackend stubborn([&](const AgentRole&, TaskKind, const json&) -> json { return P; });
        d = cross_correct(cases, stubborn, acc, 0).at(0);
        CHECK(d.final_type == RT::None);
    }
    SUBCASE("earlier corrections constrain later ones") {
        const std::vector<DoubtfulCase> two{doubtful_case("A", "B"), doubtful_case("B", "A")};
        FnBackend be([&](const AgentRole&, TaskKind, const json& payload) -> json {
            const auto a = payload["a"]["kc_id"].get<std::string>();
            const auto b = payload["b"]["kc_id"].get<std::string>();
            if (payload.contains("excluded")) return vote_reply(RT::None, a, b);
            return vote_reply(RT::PredecessorSuccessor, a, b);
        });
        const auto out = cross_correct(two, be, {});
        CHECK(out[0].final_type == RT::PredecessorSuccessor);
        CHECK(out[1].final_type == RT::None);
    }
}

TEST_CASE("heuristic personas revise toward a shared peer view") {
    HeuristicBackend be;
    PairEvidence ev;
    ev.cooccurrence = 50;
    ev.precedence_prob = 1.0;
    ev.dependence = 0.3;
    json payload{{"a", {{"kc_id", "A"}, {"name", "fraction operations"}}},
                 {"b", {{"kc_id", "B"}, {"name", "fraction operations advanced techniques"}}},
                 {"evidence", to_json(ev)},
                 {"round", 1},
                 {"peers", json::array()}};
    const auto r1 = be.respond({Role::Persona, Persona::Teaching}, TaskKind::Vote, payload);
    CHECK(relation_from_json(r1, "A", "B") == TypedRelation{RelationType::PredecessorSuccessor, "A", "B"});
    // With weak evidence everything scores low and the persona votes None.
    payload["evidence"] = to_json(PairEvidence{});
    const auto r2 = be.respond({Role::Persona, Persona::Behavior}, TaskKind::Vote, payload);
    CHECK(relation_from_json(r2, "A", "B").type == RelationType::None);
    // Within the revision margin of its best score, a persona joins agreeing peers.
    payload["evidence"] = to_json(ev);
    payload["round"] = 2;
    const json peer{{"persona", "x"}, {"relation", rel(RelationType::Containment, "A", "B")}, {"rationale", ""}};
    payload["peers"] = json::array({peer, peer});
    const auto r3 = be.respond({Role::Persona, Persona::Teaching}, TaskKind::Vote, payload);
    CHECK(relation_from_json(r3, "A", "B").type == RelationType::PredecessorSuccessor);
    ev.precedence_prob = 0.5;
    ev.reverse_precedence_prob = 0.3;
    ev.dependence = 0.0;
    payload["evidence"] = to_json(ev);
    const auto r4 = be.respond({Role::Persona, Persona::Structure}, TaskKind::Vote, payload);
    CHECK(relation_from_json(r4, "A", "B").type == RelationType::Containment);
}

// ---------------------------------------------------------------------------
// Orchestration

TEST_CASE("two unrelated KCs give no edges") {
    const InteractionLog log({rec("s1", "A", 1, 0), rec("s2", "B", 0, 0)});
    HeuristicBackend be;
    const auto r = extract_relations({kc("A", "decimals"), kc("B", "circles")}, log, be);
    CHECK(r.graph.edges().empty());
    CHECK(r.candidate_pairs == 0);
    CHECK(r.graph.node_count() == 2);
    CHECK_THROWS_AS(extract_relations({}, log, be), DomainError);
    CHECK_THROWS_AS(extract_relations({kc("A"), kc("A")}, log, be), DomainError);
}

TEST_CASE("planted relation world") {
    synth::RelationWorldConfig cfg;
    cfg.seed = 11;
    const auto world = synth::planted_relations(cfg);
    CHECK(world.kcs.size() == 30);
    CHECK(world.gold.size() == 60);
    std::set<RelationType> types;
    for (const auto& g : world.gold) types.insert(g.type);
    CHECK(types.size() == 5);

    HeuristicBackend be;
    const auto r = extract_relations(world.kcs, world.log, be);
    CHECK(graphs::validate_kc_axioms(r.graph).empty());
    const auto s = evaluate_relations(r.graph, world.gold);
    CHECK(s.jacc >= 80.0);
    CHECK(s.corr >= 85.0);
    for (const auto& p : r.profiles) {
        CHECK_FALSE(p.definition.empty());
        CHECK_FALSE(p.category.empty());
    }

    SUBCASE("every decided edge carries its audit trail") {
        for (const auto& d : r.decisions) {
            if (d.final_type == RelationType::None) continue;
            REQUIRE(d.audit.size() >= 3);
            CHECK(d.audit[0].rfind("proposal: ", 0) == 0);
            CHECK(d.audit[1].rfind("scores: ", 0) == 0);
            CHECK(d.audit[2].rfind("arbitration", 0) == 0);
            if (d.provenance == DecisionStep::CrossCorrection) {
                std::size_t votes = 0;
                for (const auto& line : d.audit) votes += line.rfind("vote round", 0) == 0;
                CHECK(votes >= 6);
            }
        }
    }
    SUBCASE("reruns and thread counts do not change the result") {
        PipelineConfig serial;
        serial.max_in_flight = 1;
        const auto again = extract_relations(world.kcs, world.log, be, serial);
        CHECK(again.graph == r.graph);
        REQUIRE(again.decisions.size() == r.decisions.size());
        for (std::size_t i = 0; i < r.decisions.size(); ++i) {
            CHECK(decision_to_line(again.decisions[i]) == decision_to_line(r.decisions[i]));
        }
    }
    SUBCASE("ablations") {
        PipelineConfig no_completion;
        no_completion.completion = false;
        PipelineConfig no_cross;
        no_cross.cross_correction = false;
        const auto a = evaluate_relations(extract_relations(world.kcs, world.log, be, no_completion).graph, world.gold);
        const auto b = evaluate_relations(extract_relations(world.kcs, world.log, be, no_cross).graph, world.gold);
        CHECK(a.jacc < s.jacc);
        CHECK(b.corr < s.corr);
    }
}

TEST_CASE("pipeline failure handling") {
    const auto world = synth::planted_relations({20, 2, 2, 1});
    SUBCASE("every proposal failing raises") {
        FnBackend down([](const AgentRole&, TaskKind task, const json& p) -> json {
            if (task == TaskKind::CompleteConcept) {
                return {{"name", p["name"]}, {"definition", "d"}, {"category", "c"}};
            }
            throw BackendError("offline");
        });
        CHECK_THROWS_AS(extract_relations(world.kcs, world.log, down), BackendError);
    }
    SUBCASE("partial failures still produce an axiom-clean graph") {
        HeuristicBackend inner;
        std::atomic<int> n{0};
        FnBackend flaky([&](const AgentRole& role, TaskKind task, const json& p) -> json {
            if (task == TaskKind::ProposeRelation && n++ % 3 == 0) return json::object();
            return inner.respond(role, task, p);
        });
        PipelineConfig cfg;
        cfg.retries = 0;
        cfg.max_in_flight = 1;
        const auto r = extract_relations(world.kcs, world.log, flaky, cfg);
        CHECK(graphs::validate_kc_axioms(r.graph).empty());
        CHECK(r.graph.edges().size() > 0);
    }
}

TEST_CASE("decision lines round-trip") {
    RelationDecision d;
    d.kc_a = "A";
    d.kc_b = "B";
    d.final_type = RelationType::Containment;
    d.confidence = 0.1 + 0.2;
    d.provenance = DecisionStep::CrossCorrection;
    d.doubtful = true;
    d.audit = {"x", "y \"quoted\""};
    const auto back = decision_from_json(json::parse(decision_to_line(d)));
    CHECK(back.kc_a == d.kc_a);
    CHECK(back.final_type == d.final_type);
    CHECK(back.confidence == d.confidence);
    CHECK(back.provenance == d.provenance);
    CHECK(back.doubtful);
    CHECK(back.audit == d.audit);
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

KcGraph graph_of(const std::vector<std::string>& ids, const std::vector<TypedRelation>& rels) {
    std::vector<ConceptProfile> nodes;
    for (const auto& id : ids) nodes.push_back(kc(id));
    std::vector<RelationDecision> ds;
    for (const auto& r : rels) {
        RelationDecision d;
        d.kc_a = r.src;
        d.kc_b = r.dst;
        d.final_type = r.type;
        d.confidence = 0.9;
        ds.push_back(d);
    }
    return graphs::build_kc_graph(nodes, ds).graph;
}

}  // namespace

TEST_CASE("relation metrics") {
    using RT = RelationType;
    const std::vector<std::string> ids{"a", "b", "c", "d", "e"};
    const TypedRelation ab{RT::PredecessorSuccessor, "a", "b"}, bc{RT::Sibling, "b", "c"},
        cd{RT::Containment, "c", "d"}, de{RT::Association, "d", "e"};

    SUBCASE("identity") {
        const std::vector<TypedRelation> gold{ab, bc, cd, de};
        const auto s = evaluate_relations(graph_of(ids, gold), gold);
        CHECK(s.pred == 100.0);
        CHECK(s.corr == 100.0);
        CHECK(s.jacc == 100.0);
    }
    SUBCASE("subset of gold") {
        const auto s = evaluate_relations(graph_of(ids, {ab, bc}), {ab, bc, cd});
        CHECK(s.jacc == doctest::Approx(200.0 / 3.0));
        CHECK(s.corr == doctest::Approx(200.0 / 3.0));
        CHECK(s.pred == doctest::Approx(200.0 / 3.0));
    }
    SUBCASE("one type wrong out of four") {
        const TypedRelation wrong{RT::Equivalence, "d", "e"};
        const auto s = evaluate_relations(graph_of(ids, {ab, bc, cd, wrong}), {ab, bc, cd, de});
        CHECK(s.pred == 100.0);
        CHECK(s.corr == 75.0);
        CHECK(s.jacc == doctest::Approx(100.0 * 3.0 / 5.0));
    }
    SUBCASE("orientation matters for directed types only") {
        const auto s = evaluate_relations(graph_of(ids, {{RT::PredecessorSuccessor, "b", "a"}, {RT::Sibling, "c", "b"}}),
                                          {ab, bc});
        CHECK(s.pred == 100.0);
        CHECK(s.corr == 50.0);
    }
    SUBCASE("empty gold") { CHECK_THROWS_AS(evaluate_relations(graph_of(ids, {}), {}), DomainError); }
}

TEST_CASE("gold relation files") {
    std::istringstream in("# planted\nsrc,dst,type\na,b,PredecessorSuccessor\nc\td\tSibling\n\nb,c,prerequisite\n");
    const auto gold = read_gold_relations(in);
    REQUIRE(gold.size() == 3);
    CHECK(gold[0] == TypedRelation{RelationType::PredecessorSuccessor, "a", "b"});
    CHECK(gold[1] == TypedRelation{RelationType::Sibling, "c", "d"});
    CHECK(gold[2].type == RelationType::PredecessorSuccessor);
    std::ostringstream os;
    for (const auto& l : gold_to_lines(gold)) os << l << '\n';
    std::istringstream back(os.str());
    CHECK(read_gold_relations(back) == gold);

    std::istringstream bad("a,b\n");
    CHECK_THROWS_AS(read_gold_relations(bad), DomainError);
    std::istringstream none("a,b,None\n");
    CHECK_THROWS_AS(read_gold_relations(none), DomainError);
}

// ---------------------------------------------------------------------------
// Live backend plumbing

TEST_CASE("JSON extraction from chat replies") {
    CHECK(extract_json_object(R"({"a": 1})") == json{{"a", 1}});
    CHECK(extract_json_object("Sure!\n```json\n{\"a\": {\"b\": \"}\"}}\n```\nDone.") ==
          json{{"a", {{"b", "}"}}}});
    CHECK(extract_json_object("Answer: {\"x\": \"\\\"{\"} trailing }") == json{{"x", "\"{"}});
    CHECK_THROWS_AS(extract_json_object("no object here"), SchemaError);
    CHECK_THROWS_AS(extract_json_object("{\"a\": 1"), SchemaError);
    CHECK_THROWS_AS(extract_json_object("{a: 1}"), SchemaError);
}

TEST_CASE("prompt templates") {
    const auto prompts = PromptSet::load(PromptSet::default_dir());
    CHECK_FALSE(prompts.version().empty());
    for (auto task : {TaskKind::CompleteConcept, TaskKind::ProposeRelation, TaskKind::ScoreRelation,
                      TaskKind::Arbitrate, TaskKind::Vote}) {
        const auto text = prompts.user({Role::Persona, Persona::Behavior}, task, {{"name", "marker-xyz"}, {"repair", "fix-it"}});
        CHECK(text.find("marker-xyz") != std::string::npos);
        CHECK(text.find("fix-it") != std::string::npos);
        CHECK(text.find(response_schema(task)) != std::string::npos);
        CHECK(text.find("{{") == std::string::npos);
    }
    CHECK(prompts.system({Role::Persona, Persona::Teaching}).find("persona:teaching") != std::string::npos);

    const auto dir = std::filesystem::temp_directory_path() / "magekt_prompts_test";
    std::filesystem::create_directories(dir);
    for (const auto& e : std::filesystem::directory_iterator(PromptSet::default_dir())) {
        std::filesystem::copy_file(e.path(), dir / e.path().filename(),
                                   std::filesystem::copy_options::overwrite_existing);
    }
    std::ofstream(dir / "vote.txt") << "{{payload}} {{mystery}}";
    const auto broken = PromptSet::load(dir);
    CHECK_THROWS_AS(broken.user({}, TaskKind::Vote, json::object()), DomainError);
    std::filesystem::remove(dir / "arbitrate.txt");
    CHECK_THROWS_AS(PromptSet::load(dir), DomainError);
    std::filesystem::remove_all(dir);
}

namespace {

// Local chat-completions endpoint; `handler` returns (status, content).
class MockServer {
public:
    using Handler = std::function<std::pair<int, std::string>(const json& request)>;

    explicit MockServer(Handler handler) : handler_(std::move(handler)) {
        server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
            const auto body = json::parse(req.body);
            {
                std::lock_guard lock(m_);
                requests.push_back(body);
                auth.push_back(req.get_header_value("Authorization"));
            }
            auto [status, content] = handler_(body);
            res.status = status;
            if (status == 200) {
                const json reply{{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", content}}}}})}};
                res.set_content(reply.dump(), "application/json");
            } else {
                res.set_content(content, "text/plain");
            }
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~MockServer() {
        server_.stop();
        thread_.join();
    }
    std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }

    std::vector<json> requests;
    std::vector<std::string> auth;

private:
    Handler handler_;
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
    std::mutex m_;
};

ChatConfig chat_config(const MockServer& server) {
    ChatConfig cfg;
    cfg.endpoint = server.endpoint();
    cfg.model = "test-model";
    cfg.api_key_env = "MAGEKT_TEST_KEY";
    cfg.timeout_s = 5;
    return cfg;
}

}  // namespace

TEST_CASE("chat backend against a local endpoint") {
    const json concept_reply{{"name", "ratios"}, {"definition", "Comparing quantities."}, {"category", "arithmetic"}};

    SUBCASE("request format and fenced reply") {
        MockServer server([&](const json&) { return std::pair{200, "```json\n" + concept_reply.dump() + "\n```"}; });
        ::setenv("MAGEKT_TEST_KEY", "secret", 1);
        ChatBackend be(chat_config(server));
        ::unsetenv("MAGEKT_TEST_KEY");
        const auto p = complete_concept({"k", "Ratios", "", "", false}, be);
        CHECK(p.definition == "Comparing quantities.");
        REQUIRE(server.requests.size() == 1);
        const auto& req = server.requests[0];
        CHECK(req["model"] == "test-model");
        CHECK(req["temperature"] == 0.0);
        REQUIRE(req["messages"].size() == 2);
        CHECK(req["messages"][0]["role"] == "system");
        CHECK(req["messages"][1]["role"] == "user");
        CHECK(req["messages"][1]["content"].get<std::string>().find("Ratios") != std::string::npos);
        CHECK(server.auth[0] == "Bearer secret");
    }
    SUBCASE("429 and 5xx are retried with growing backoff") {
        int n = 0;
        MockServer server([&](const json&) {
            ++n;
            if (n == 1) return std::pair{429, std::string("slow down")};
            if (n == 2) return std::pair{503, std::string("busy")};
            return std::pair{200, concept_reply.dump()};
        });
        ChatBackend be(chat_config(server));
        std::vector<double> waits;
        be.set_sleeper([&](double s) { waits.push_back(s); });
        const auto r = be.respond({}, TaskKind::CompleteConcept, {{"name", "Ratios"}});
        CHECK(r == concept_reply);
        CHECK(waits == std::vector<double>{1.0, 2.0});
        CHECK(server.auth[0].empty());
    }
    SUBCASE("client errors are not retried") {
        MockServer server([&](const json&) { return std::pair{401, std::string("bad key")}; });
        ChatBackend be(chat_config(server));
        be.set_sleeper([](double) {});
        CHECK_THROWS_AS(be.respond({}, TaskKind::CompleteConcept, {{"name", "x"}}), BackendError);
        CHECK(server.requests.size() == 1);
    }
    SUBCASE("persistent outage exhausts the retries") {
        MockServer server([&](const json&) { return std::pair{500, std::string("down")}; });
        auto cfg = chat_config(server);
        cfg.max_retries = 2;
        ChatBackend be(cfg);
        be.set_sleeper([](double) {});
        CHECK_THROWS_AS(be.respond({}, TaskKind::CompleteConcept, {{"name", "x"}}), BackendError);
        CHECK(server.requests.size() == 3);
    }
    SUBCASE("prose replies trigger a schema repair round") {
        int n = 0;
        MockServer server([&](const json&) {
            return ++n == 1 ? std::pair{200, std::string("I think they are related.")}
                            : std::pair{200, concept_reply.dump()};
        });
        ChatBackend be(chat_config(server));
        const auto r = ask(be, {}, TaskKind::CompleteConcept, {{"name", "Ratios"}}, 3);
        CHECK(r == concept_reply);
        REQUIRE(server.requests.size() == 2);
        CHECK(server.requests[1]["messages"][1]["content"].get<std::string>().find("rejected") != std::string::npos);
    }
    SUBCASE("unreachable endpoint") {
        ChatConfig cfg;
        cfg.endpoint = "http://127.0.0.1:1/v1/chat/completions";
        cfg.max_retries = 1;
        cfg.timeout_s = 1;
        ChatBackend be(cfg);
        be.set_sleeper([](double) {});
        CHECK_THROWS_AS(be.respond({}, TaskKind::CompleteConcept, {{"name", "x"}}), BackendError);
    }
    SUBCASE("malformed endpoint") {
        ChatConfig cfg;
        cfg.endpoint = "not a url";
        CHECK_THROWS_AS(ChatBackend{cfg}, DomainError);
    }
}
