#include "magekt/ingest.hpp"

#include "magekt/random.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <ctime>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace magekt::ingest {

namespace {

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

bool is_missing(const std::string& v) {
    if (v.empty()) return true;
    std::string lower;
    for (char c : v) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    return lower == "na" || lower == "nan" || lower == "null" || lower == "none";
}

std::optional<int> parse_correct(const std::string& v) {
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), value);
    if (ec != std::errc() || ptr != v.data() + v.size()) return std::nullopt;
    if (value == 0.0) return 0;
    if (value == 1.0) return 1;
    return std::nullopt;
}

// Plain numbers, or "YYYY-MM-DD[ T]HH:MM:SS[.fff]" read as UTC seconds.
std::optional<double> parse_timestamp(const std::string& v) {
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), value);
    if (ec == std::errc() && ptr == v.data() + v.size()) return value;

    std::tm tm{};
    double seconds = 0.0;
    char sep = 0;
    if (std::sscanf(v.c_str(), "%d-%d-%d%c%d:%d:%lf", &tm.tm_year, &tm.tm_mon, &tm.tm_mday, &sep,
                    &tm.tm_hour, &tm.tm_min, &seconds) == 7 &&
        (sep == ' ' || sep == 'T')) {
        tm.tm_year -= 1900;
        tm.tm_mon -= 1;
        tm.tm_sec = 0;
        const auto whole = timegm(&tm);
        return static_cast<double>(whole) + seconds;
    }
    return std::nullopt;
}

std::vector<std::string> split_kcs(const std::string& cell, char delimiter) {
    std::set<std::string> unique;
    std::string part;
    std::istringstream in(cell);
    while (std::getline(in, part, delimiter)) {
        auto t = trim(part);
        if (!t.empty()) unique.insert(std::move(t));
    }
    return {unique.begin(), unique.end()};
}

}  // namespace

std::vector<std::string> split_csv_line(const std::string& line, char delimiter) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == delimiter) {
            out.push_back(trim(cur));
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(trim(cur));
    return out;
}

ParseResult parse_interaction_csv(std::istream& source, const ColumnSchema& schema) {
    if (!source) throw std::runtime_error("interaction stream is not readable");
    std::string line;
    if (!std::getline(source, line)) throw std::runtime_error("interaction file has no header row");
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);

    const auto header = split_csv_line(line, schema.field_delimiter);
    auto column = [&](const std::string& name, bool required) -> std::optional<std::size_t> {
        if (name.empty() && !required) return std::nullopt;
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) {
            if (!required) return std::nullopt;
            throw std::runtime_error("header is missing mapped column '" + name + "'");
        }
        return static_cast<std::size_t>(it - header.begin());
    };
    const auto c_student = *column(schema.student, true);
    const auto c_question = *column(schema.question, true);
    const auto c_kcs = *column(schema.kcs, true);
    const auto c_correct = *column(schema.correct, true);
    const auto c_time = schema.timestamp.empty() ? std::nullopt : column(schema.timestamp, true);

    ParseResult result;
    std::vector<Interaction> records;
    std::size_t line_no = 1;
    while (std::getline(source, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto cells = split_csv_line(line, schema.field_delimiter);
        auto cell = [&](std::size_t c) -> std::string { return c < cells.size() ? cells[c] : ""; };
        auto drop = [&](std::string reason) {
            ++result.dropped;
            result.dropped_rows.push_back({line_no, std::move(reason)});
        };

        Interaction rec;
        rec.student_id = cell(c_student);
        rec.question_id = cell(c_question);
        const auto kc_cell = cell(c_kcs);
        const auto correct_cell = cell(c_correct);
        if (is_missing(rec.student_id)) { drop("missing student"); continue; }
        if (is_missing(rec.question_id)) { drop("missing question"); continue; }
        if (is_missing(kc_cell)) { drop("missing kc"); continue; }
        if (is_missing(correct_cell)) { drop("missing correctness"); continue; }
        rec.kc_ids = split_kcs(kc_cell, schema.kc_delimiter);
        if (rec.kc_ids.empty()) { drop("missing kc"); continue; }
        auto correct = parse_correct(correct_cell);
        if (!correct) { drop("correctness not binary: " + correct_cell); continue; }
        rec.correct = *correct;
        if (c_time) {
            const auto t = cell(*c_time);
            if (is_missing(t)) { drop("missing timestamp"); continue; }
            auto ts = parse_timestamp(t);
            if (!ts) { drop("unparseable timestamp: " + t); continue; }
            rec.timestamp = *ts;
        } else {
            rec.timestamp = static_cast<double>(records.size());
        }
        records.push_back(std::move(rec));
    }
    result.log = InteractionLog(std::move(records));
    return result;
}

InteractionLog filter_log(const InteractionLog& log, std::size_t min_student,
                          std::size_t min_question) {
    if (min_student < 1 || min_question < 1) {
        throw DomainError("filter thresholds must be at least 1");
    }
    std::vector<Interaction> current = log.records();
    while (true) {
        std::unordered_map<std::string, std::size_t> per_student;
        for (const auto& r : current) ++per_student[r.student_id];
        std::vector<Interaction> next;
        next.reserve(current.size());
        for (auto& r : current) {
            if (per_student[r.student_id] >= min_student) next.push_back(std::move(r));
        }
        std::unordered_map<std::string, std::size_t> per_question;
        for (const auto& r : next) ++per_question[r.question_id];
        const auto before = next.size();
        std::erase_if(next, [&](const Interaction& r) {
            return per_question[r.question_id] < min_question;
        });
        const bool questions_removed = next.size() != before;
        current = std::move(next);
        // Removing students never lowers another student's count, so only a
        // question removal can break the student threshold again.
        if (!questions_removed) break;
    }
    return InteractionLog(std::move(current));
}

void SplitSpec::validate() const {
    if (!(train_ratio > 0.0) || !(val_ratio > 0.0) || !(test_ratio > 0.0)) {
        throw DomainError("split ratios must be positive");
    }
    if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9) {
        throw DomainError("split ratios must sum to 1");
    }
}

Splits split_students(const InteractionLog& log, const SplitSpec& spec) {
    spec.validate();
    auto students = log.students();
    const std::size_t n = students.size();
    if (n < 3) throw DomainError("need at least 3 students to form 3 splits");

    Rng rng(hash_combine(spec.seed, 0x5b117ULL));
    rng.shuffle(students);

    auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.train_ratio));
    auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.val_ratio));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 2);
    n_val = std::clamp<std::size_t>(n_val, 1, n - n_train - 1);

    std::unordered_map<std::string, int> part;
    for (std::size_t i = 0; i < n; ++i) {
        part[students[i]] = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);
    }
    std::vector<Interaction> buckets[3];
    for (const auto& r : log.records()) buckets[part[r.student_id]].push_back(r);
    return {InteractionLog(std::move(buckets[0])), InteractionLog(std::move(buckets[1])),
            InteractionLog(std::move(buckets[2]))};
}

std::vector<Window> window_sequences(const InteractionLog& log, std::size_t length) {
    if (length < 2) throw DomainError("window length must be at least 2");
    std::vector<Window> out;
    const auto& records = log.records();
    for (const auto& [student, idx] : log.student_sequences()) {
        for (std::size_t start = 0; start < idx.size(); start += length) {
            const std::size_t end = std::min(idx.size(), start + length);
            if (end - start < 2) continue;
            Window w;
            w.student_id = student;
            w.items.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) {
                const auto& r = records[idx[i]];
                w.items.push_back({r.question_id, r.kc_ids, r.correct});
            }
            out.push_back(std::move(w));
        }
    }
    return out;
}

std::string interaction_to_line(const Interaction& r) {
    return jsonl::LineWriter()
        .field("student", r.student_id)
        .field("question", r.question_id)
        .field("kcs", r.kc_ids)
        .field("correct", r.correct)
        .field("timestamp", r.timestamp)
        .str();
}

Interaction interaction_from_json(const nlohmann::json& j) {
    Interaction r;
    r.student_id = j.at("student").get<std::string>();
    r.question_id = j.at("question").get<std::string>();
    r.kc_ids = j.at("kcs").get<std::vector<std::string>>();
    r.correct = j.at("correct").get<int>();
    r.timestamp = j.at("timestamp").get<double>();
    return r;
}

std::vector<std::string> log_to_lines(const InteractionLog& log) {
    std::vector<std::string> out;
    out.reserve(log.size());
    for (const auto& r : log.records()) out.push_back(interaction_to_line(r));
    return out;
}

InteractionLog log_from_lines(std::istream& in) {
    std::vector<Interaction> records;
    for (const auto& j : jsonl::read_lines(in)) {
        if (j.contains("meta")) continue;
        records.push_back(interaction_from_json(j));
    }
    return InteractionLog(std::move(records));
}

std::string window_to_line(const Window& window) {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& it : window.items) {
        items.push_back({{"question", it.question_id}, {"kcs", it.kc_ids}, {"correct", it.correct}});
    }
    return jsonl::LineWriter().field("student", window.student_id).raw("items", items.dump()).str();
}

Window window_from_json(const nlohmann::json& j) {
    Window w;
    w.student_id = j.at("student").get<std::string>();
    for (const auto& it : j.at("items")) {
        w.items.push_back({it.at("question").get<std::string>(),
                           it.at("kcs").get<std::vector<std::string>>(), it.at("correct").get<int>()});
    }
    return w;
}

std::vector<Window> windows_from_lines(std::istream& in) {
    std::vector<Window> out;
    for (const auto& j : jsonl::read_lines(in)) {
        if (j.contains("meta")) continue;
        out.push_back(window_from_json(j));
    }
    return out;
}

}  // namespace magekt::ingest
