#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace magekt::jsonl {

using nlohmann::json;

/// Decimal text with 17 significant digits (round-trips any finite double).
std::string format_double(double value);

/// Builds one JSON object line with fields in insertion order. Doubles are
/// written with 17 significant digits.
class LineWriter {
public:
    LineWriter& field(std::string_view key, std::string_view value);
    LineWriter& field(std::string_view key, const char* value) {
        return field(key, std::string_view(value));
    }
    LineWriter& field(std::string_view key, double value);
    LineWriter& field(std::string_view key, std::int64_t value);
    LineWriter& field(std::string_view key, int value) {
        return field(key, static_cast<std::int64_t>(value));
    }
    LineWriter& field(std::string_view key, std::size_t value) {
        return field(key, static_cast<std::int64_t>(value));
    }
    LineWriter& field(std::string_view key, bool value);
    LineWriter& field(std::string_view key, const std::vector<std::string>& values);
    LineWriter& field(std::string_view key, const std::vector<double>& values);
    /// Pre-serialized JSON value.
    LineWriter& raw(std::string_view key, std::string_view json_text);

    std::string str() const { return "{" + body_ + "}"; }

private:
    void key(std::string_view k);
    std::string body_;
};

/// Parses every non-blank line as JSON. Throws std::runtime_error naming the
/// line number on malformed input.
std::vector<json> read_lines(std::istream& in);
std::vector<json> read_file(const std::filesystem::path& path);

void write_file(const std::filesystem::path& path, const std::vector<std::string>& lines);

/// FNV-1a, used for config and artifact version hashes.
std::uint64_t fnv1a(std::string_view text, std::uint64_t seed = 1469598103934665603ULL);
std::string hex64(std::uint64_t value);

}  // namespace magekt::jsonl
