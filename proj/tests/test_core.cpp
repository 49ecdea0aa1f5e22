#include <doctest/doctest.h>

#include "magekt/core.hpp"
#include "magekt/ingest.hpp"
#include "magekt/random.hpp"

#include <sstream>

using namespace magekt;

namespace {

InteractionLog three_records() {
    return InteractionLog({
        {"s1", "q1", {"k1"}, 1, 1.0},
        {"s1", "q2", {"k1", "k2"}, 0, 2.0},
        {"s2", "q1", {"k1"}, 1, 1.5},
    });
}

}  // namespace

TEST_CASE("validate_log accepts a well-formed log") {
    CHECK(validate_log(three_records()).empty());
}

TEST_CASE("validate_log names the record with empty kc_ids") {
    auto records = three_records().records();
    records[1].kc_ids.clear();
    const auto v = validate_log(InteractionLog(records));
    REQUIRE(v.size() == 1);
    CHECK(v[0].record_index == 1);
    CHECK(v[0].rule == "kc_ids non-empty");
}

TEST_CASE("validate_log reports swapped timestamps once") {
    const InteractionLog log({
        {"s1", "q1", {"k1"}, 1, 5.0},
        {"s1", "q2", {"k1"}, 0, 3.0},
    });
    const auto v = validate_log(log);
    REQUIRE(v.size() == 1);
    CHECK(v[0].rule == "timestamp order");
    CHECK(v[0].record_index == 1);
}

TEST_CASE("validate_log flags non-binary correctness") {
    const InteractionLog log({{"s1", "q1", {"k1"}, 2, 0.0}});
    const auto v = validate_log(log);
    REQUIRE(v.size() == 1);
    CHECK(v[0].rule == "correct binary");
}

TEST_CASE("student_sequences sorts by time and keeps source order on ties") {
    const InteractionLog log({
        {"s1", "a", {"k"}, 1, 2.0},
        {"s1", "b", {"k"}, 1, 1.0},
        {"s1", "c", {"k"}, 1, 1.0},
    });
    const auto seq = log.student_sequences().at("s1");
    CHECK(seq == std::vector<std::size_t>{1, 2, 0});
}

TEST_CASE("any valid log round-trips through the line format") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Interaction> records;
        const int n = 1 + static_cast<int>(rng.below(30));
        for (int i = 0; i < n; ++i) {
            Interaction r;
            r.student_id = "s\"" + std::to_string(rng.below(5));
            r.question_id = "q," + std::to_string(rng.below(8));
            const int nk = 1 + static_cast<int>(rng.below(3));
            for (int k = 0; k < nk; ++k) r.kc_ids.push_back("k" + std::to_string(k * 3 + rng.below(3)));
            r.correct = static_cast<int>(rng.below(2));
            r.timestamp = rng.uniform(0.0, 1e9) / 7.0;
            records.push_back(r);
        }
        const InteractionLog log(records);
        std::stringstream ss;
        for (const auto& l : ingest::log_to_lines(log)) ss << l << '\n';
        CHECK(ingest::log_from_lines(ss) == log);
    }
}

TEST_CASE("relation names round-trip") {
    for (auto t : kAllRelationTypes) CHECK(relation_from_string(to_string(t)) == t);
    CHECK(relation_from_string("None") == RelationType::None);
    CHECK(relation_from_string("predecessor-successor") == RelationType::PredecessorSuccessor);
    CHECK_THROWS_AS(relation_from_string("cousin"), DomainError);
}

TEST_CASE("interner rejects duplicates and unknown ids") {
    CHECK_THROWS_AS(Interner({"a", "a"}), DomainError);
    const Interner in({"a", "b"});
    CHECK(in.at("b") == 1);
    CHECK_FALSE(in.find("c").has_value());
    CHECK_THROWS_AS(in.at("c"), DomainError);
}
