#pragma once

#include "magekt/core.hpp"
#include "magekt/jsonl.hpp"

#include <cstdint>
#include <istream>
#include <string>
#include <vector>

namespace magekt::ingest {

/// Maps log fields onto CSV header names. An empty `timestamp` column means
/// row order is used as the timestamp.
struct ColumnSchema {
    std::string student = "student_id";
    std::string question = "question_id";
    std::string kcs = "kc_ids";
    std::string correct = "correct";
    std::string timestamp = "timestamp";
    char field_delimiter = ',';
    char kc_delimiter = ';';
};

struct DroppedRow {
    std::size_t line = 0;
    std::string reason;
};

struct ParseResult {
    InteractionLog log;
    std::size_t dropped = 0;
    std::vector<DroppedRow> dropped_rows;
};

/// Reads delimiter-separated text with a header row. Rows with a missing or
/// unparseable mapped field are dropped and counted.
/// Throws std::runtime_error when the stream is unreadable or the header
/// lacks a mapped column.
ParseResult parse_interaction_csv(std::istream& source, const ColumnSchema& schema);

/// Splits one CSV line honouring double quotes.
std::vector<std::string> split_csv_line(const std::string& line, char delimiter);

/// Alternately removes students with fewer than `min_student` attempts and
/// questions with fewer than `min_question` answers until neither rule
/// removes anything.
InteractionLog filter_log(const InteractionLog& log, std::size_t min_student = 10,
                          std::size_t min_question = 10);

struct SplitSpec {
    double train_ratio = 0.8;
    double val_ratio = 0.1;
    double test_ratio = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
};

struct Splits {
    InteractionLog train;
    InteractionLog val;
    InteractionLog test;
};

/// Shuffles the sorted student list with `spec.seed` and cuts it by ratio.
/// Every split receives at least one student.
Splits split_students(const InteractionLog& log, const SplitSpec& spec);

struct WindowItem {
    std::string question_id;
    std::vector<std::string> kc_ids;
    int correct = 0;

    bool operator==(const WindowItem&) const = default;
};

struct Window {
    std::string student_id;
    std::vector<WindowItem> items;

    bool operator==(const Window&) const = default;
};

/// Cuts each student's time-ordered sequence into consecutive chunks of
/// `length`; a trailing chunk shorter than 2 is dropped.
std::vector<Window> window_sequences(const InteractionLog& log, std::size_t length = 100);

// Line-delimited caches.
std::string interaction_to_line(const Interaction& record);
Interaction interaction_from_json(const nlohmann::json& j);
std::vector<std::string> log_to_lines(const InteractionLog& log);
InteractionLog log_from_lines(std::istream& in);

std::string window_to_line(const Window& window);
Window window_from_json(const nlohmann::json& j);
std::vector<Window> windows_from_lines(std::istream& in);

}  // namespace magekt::ingest
