#include <doctest/doctest.h>

#include "magekt/ingest.hpp"
#include "magekt/random.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

using namespace magekt;
using namespace magekt::ingest;

namespace {

InteractionLog uniform_log(int students, int questions, int reps) {
    std::vector<Interaction> records;
    double t = 0;
    for (int s = 0; s < students; ++s) {
        for (int r = 0; r < reps; ++r) {
            for (int q = 0; q < questions; ++q) {
                records.push_back({"s" + std::to_string(s), "q" + std::to_string(q), {"k"}, (s + q) % 2, t++});
            }
        }
    }
    return InteractionLog(records);
}

std::vector<Interaction> repeat(const std::string& s, const std::string& q, int n) {
    return std::vector<Interaction>(static_cast<std::size_t>(n), Interaction{s, q, {"k"}, 1, 0.0});
}

// Largest sub-log (by record count) over all student/question subsets that
// meets both thresholds. The removal fixpoint is this maximal core.
InteractionLog brute_force_core(const InteractionLog& log, std::size_t min_s, std::size_t min_q) {
    const auto students = log.students();
    const auto questions = log.questions();
    std::size_t best = 0;
    std::vector<Interaction> best_records;
    for (unsigned smask = 0; smask < (1u << students.size()); ++smask) {
        for (unsigned qmask = 0; qmask < (1u << questions.size()); ++qmask) {
            std::vector<Interaction> kept;
            for (const auto& r : log.records()) {
                const auto si = std::find(students.begin(), students.end(), r.student_id) - students.begin();
                const auto qi = std::find(questions.begin(), questions.end(), r.question_id) - questions.begin();
                if ((smask >> si & 1u) && (qmask >> qi & 1u)) kept.push_back(r);
            }
            std::map<std::string, std::size_t> cs, cq;
            for (const auto& r : kept) {
                ++cs[r.student_id];
                ++cq[r.question_id];
            }
            bool ok = true;
            for (auto& [k, v] : cs) ok = ok && v >= min_s;
            for (auto& [k, v] : cq) ok = ok && v >= min_q;
            if (ok && kept.size() > best) {
                best = kept.size();
                best_records = kept;
            }
        }
    }
    return InteractionLog(best_records);
}

}  // namespace

TEST_CASE("parse_interaction_csv reads complete rows") {
    std::istringstream in(
        "student_id,question_id,kc_ids,correct,timestamp\n"
        "s1,q1,a,1,1\n"
        "s1,q2,a;b,0,2\n"
        "s2,q1,b,1,3\n"
        "s2,q3,\"c;d\",1,4\n"
        "s3,q2,a,0,5\n");
    const auto res = parse_interaction_csv(in, ColumnSchema{});
    CHECK(res.log.size() == 5);
    CHECK(res.dropped == 0);
    CHECK(res.log.records()[1].kc_ids == std::vector<std::string>{"a", "b"});
    CHECK(res.log.records()[3].kc_ids == std::vector<std::string>{"c", "d"});
}

TEST_CASE("parse_interaction_csv drops rows missing correctness") {
    std::istringstream in(
        "student_id,question_id,kc_ids,correct,timestamp\n"
        "s1,q1,a,1,1\n"
        "s1,q2,a,,2\n"
        "s2,q1,b,1,3\n"
        "s2,q3,c,NA,4\n"
        "s3,q2,a,0,5\n");
    const auto res = parse_interaction_csv(in, ColumnSchema{});
    CHECK(res.log.size() == 3);
    CHECK(res.dropped == 2);
    CHECK(res.dropped_rows[0].line == 3);
}

TEST_CASE("parse_interaction_csv honours a custom schema and KC delimiter") {
    std::istringstream in("user\titem\tskill\tok\n u1\ti1\tx|y|x\t1\n");
    ColumnSchema schema;
    schema.student = "user";
    schema.question = "item";
    schema.kcs = "skill";
    schema.correct = "ok";
    schema.timestamp = "";
    schema.field_delimiter = '\t';
    schema.kc_delimiter = '|';
    const auto res = parse_interaction_csv(in, schema);
    REQUIRE(res.log.size() == 1);
    CHECK(res.log.records()[0].kc_ids == std::vector<std::string>{"x", "y"});
    CHECK(res.log.records()[0].student_id == "u1");
}

TEST_CASE("parse_interaction_csv errors on a missing mapped column") {
    std::istringstream in("student_id,question_id,correct,timestamp\ns,q,1,1\n");
    CHECK_THROWS_WITH_AS(parse_interaction_csv(in, ColumnSchema{}), "header is missing mapped column 'kc_ids'",
                         std::runtime_error);
    std::istringstream empty("");
    CHECK_THROWS(parse_interaction_csv(empty, ColumnSchema{}));
}

TEST_CASE("parse_interaction_csv reads datetime timestamps") {
    std::istringstream in(
        "student_id,question_id,kc_ids,correct,timestamp\n"
        "s1,q1,a,1,2011-01-01 00:00:10\n"
        "s1,q2,a,1,2011-01-01T00:00:05\n");
    const auto res = parse_interaction_csv(in, ColumnSchema{});
    REQUIRE(res.log.size() == 2);
    CHECK(res.log.records()[0].timestamp - res.log.records()[1].timestamp == doctest::Approx(5.0));
}

TEST_CASE("filter_log leaves a log that already meets both thresholds") {
    const auto log = uniform_log(4, 5, 3);  // 15 attempts per student, 12 per question
    CHECK(filter_log(log) == log);
}

TEST_CASE("filter_log removes a light student") {
    auto records = uniform_log(12, 2, 5).records();  // each student 10, each question 60
    for (int i = 0; i < 3; ++i) records.push_back({"light", "q0", {"k"}, 1, 100.0 + i});
    const auto out = filter_log(InteractionLog(records));
    const auto students = out.students();
    CHECK(std::find(students.begin(), students.end(), "light") == students.end());
    CHECK(out.size() == 120);
}

TEST_CASE("filter_log cascades to the removal fixpoint") {
    std::vector<Interaction> records;
    for (auto& part : {repeat("A", "Q1", 5), repeat("A", "Q2", 5), repeat("A", "Q3", 5), repeat("B", "Q1", 5),
                       repeat("B", "Q2", 4), repeat("B", "Q3", 5), repeat("C", "Q2", 1)}) {
        records.insert(records.end(), part.begin(), part.end());
    }
    const InteractionLog log(records);
    const auto out = filter_log(log);
    const auto oracle = brute_force_core(log, 10, 10);
    CHECK(out.size() == oracle.size());
    CHECK(out.students() == oracle.students());
    CHECK(out.questions() == oracle.questions());
    CHECK(out.questions() == std::vector<std::string>{"Q1", "Q3"});
}

TEST_CASE("filter_log is idempotent and matches the brute-force core on random logs") {
    Rng rng(11);
    for (int trial = 0; trial < 25; ++trial) {
        std::vector<Interaction> records;
        const int n = 20 + static_cast<int>(rng.below(40));
        for (int i = 0; i < n; ++i) {
            records.push_back({"s" + std::to_string(rng.below(4)), "q" + std::to_string(rng.below(4)), {"k"}, 1, 0.0});
        }
        const InteractionLog log(records);
        const auto once = filter_log(log, 4, 4);
        CHECK(filter_log(once, 4, 4) == once);
        CHECK(once.size() == brute_force_core(log, 4, 4).size());
    }
}

TEST_CASE("split_students gives 8/1/1 for ten students") {
    const auto log = uniform_log(10, 3, 1);
    const auto s = split_students(log, SplitSpec{0.8, 0.1, 0.1, 42});
    CHECK(s.train.students().size() == 8);
    CHECK(s.val.students().size() == 1);
    CHECK(s.test.students().size() == 1);
    const auto again = split_students(log, SplitSpec{0.8, 0.1, 0.1, 42});
    CHECK(again.train == s.train);
    CHECK(again.val == s.val);
    CHECK(again.test == s.test);
}

TEST_CASE("split_students partitions the student set") {
    const auto log = uniform_log(100, 2, 1);
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto s = split_students(log, SplitSpec{0.8, 0.1, 0.1, seed});
        std::set<std::string> tr, va, te;
        for (auto& x : s.train.students()) tr.insert(x);
        for (auto& x : s.val.students()) va.insert(x);
        for (auto& x : s.test.students()) te.insert(x);
        for (auto& x : va) CHECK_FALSE(tr.count(x));
        for (auto& x : te) CHECK_FALSE(tr.count(x));
        for (auto& x : te) CHECK_FALSE(va.count(x));
        CHECK(tr.size() + va.size() + te.size() == 100);
        CHECK(tr.size() == 80);
        CHECK(s.train.size() + s.val.size() + s.test.size() == log.size());
    }
    CHECK(split_students(log, SplitSpec{0.8, 0.1, 0.1, 1}).train !=
          split_students(log, SplitSpec{0.8, 0.1, 0.1, 2}).train);
}

TEST_CASE("split_students rejects bad input") {
    CHECK_THROWS_AS(split_students(uniform_log(2, 1, 1), SplitSpec{}), DomainError);
    CHECK_THROWS_AS(split_students(uniform_log(5, 1, 1), SplitSpec{0.5, 0.1, 0.1, 0}), DomainError);
    CHECK_THROWS_AS(split_students(uniform_log(5, 1, 1), SplitSpec{1.0, 0.0, 0.0, 0}), DomainError);
}

TEST_CASE("window_sequences cuts non-overlapping windows") {
    auto sizes = [](std::size_t n) {
        std::vector<Interaction> records;
        for (std::size_t i = 0; i < n; ++i) {
            records.push_back({"s", "q" + std::to_string(i), {"k"}, static_cast<int>(i % 2), static_cast<double>(i)});
        }
        std::vector<std::size_t> out;
        for (const auto& w : window_sequences(InteractionLog(records), 100)) out.push_back(w.items.size());
        return out;
    };
    CHECK(sizes(100) == std::vector<std::size_t>{100});
    CHECK(sizes(250) == std::vector<std::size_t>{100, 100, 50});
    CHECK(sizes(101) == std::vector<std::size_t>{100});
    CHECK(sizes(1).empty());
    CHECK_THROWS_AS(window_sequences(InteractionLog(), 1), DomainError);
}

TEST_CASE("windows concatenate back to each student's sequence") {
    Rng rng(3);
    std::vector<Interaction> records;
    for (int i = 0; i < 500; ++i) {
        records.push_back({"s" + std::to_string(rng.below(6)), "q" + std::to_string(i), {"k"}, static_cast<int>(rng.below(2)),
                           static_cast<double>(rng.below(300))});
    }
    const InteractionLog log(records);
    const auto windows = window_sequences(log, 7);
    std::map<std::string, std::vector<std::string>> rebuilt;
    for (const auto& w : windows) {
        CHECK(w.items.size() >= 2);
        CHECK(w.items.size() <= 7);
        for (const auto& it : w.items) rebuilt[w.student_id].push_back(it.question_id);
    }
    for (const auto& [student, idx] : log.student_sequences()) {
        std::vector<std::string> expected;
        for (auto i : idx) expected.push_back(records[i].question_id);
        if (expected.size() % 7 == 1) expected.pop_back();
        CHECK(rebuilt[student] == expected);
    }
}

TEST_CASE("window lines round-trip") {
    const Window w{"s1", {{"q1", {"a", "b"}, 1}, {"q2", {"c"}, 0}}};
    std::stringstream ss;
    ss << window_to_line(w) << '\n';
    const auto back = windows_from_lines(ss);
    REQUIRE(back.size() == 1);
    CHECK(back[0] == w);
}
