#include "magekt/jsonl.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace magekt::jsonl {

std::string format_double(double value) {
    if (!std::isfinite(value)) {
        throw std::runtime_error("cannot serialize non-finite value");
    }
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    return buf;
}

void LineWriter::key(std::string_view k) {
    if (!body_.empty()) body_ += ',';
    body_ += json(std::string(k)).dump();
    body_ += ':';
}

LineWriter& LineWriter::field(std::string_view k, std::string_view value) {
    key(k);
    body_ += json(std::string(value)).dump();
    return *this;
}

LineWriter& LineWriter::field(std::string_view k, double value) {
    key(k);
    body_ += format_double(value);
    return *this;
}

LineWriter& LineWriter::field(std::string_view k, std::int64_t value) {
    key(k);
    body_ += std::to_string(value);
    return *this;
}

LineWriter& LineWriter::field(std::string_view k, bool value) {
    key(k);
    body_ += value ? "true" : "false";
    return *this;
}

LineWriter& LineWriter::field(std::string_view k, const std::vector<std::string>& values) {
    key(k);
    body_ += json(values).dump();
    return *this;
}

LineWriter& LineWriter::field(std::string_view k, const std::vector<double>& values) {
    key(k);
    body_ += '[';
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) body_ += ',';
        body_ += format_double(values[i]);
    }
    body_ += ']';
    return *this;
}

LineWriter& LineWriter::raw(std::string_view k, std::string_view json_text) {
    key(k);
    body_ += json_text;
    return *this;
}

std::vector<json> read_lines(std::istream& in) {
    std::vector<json> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::parse_error& e) {
            throw std::runtime_error("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

std::vector<json> read_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return read_lines(in);
}

void write_file(const std::filesystem::path& path, const std::vector<std::string>& lines) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& l : lines) out << l << '\n';
}

std::uint64_t fnv1a(std::string_view text, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

}  // namespace magekt::jsonl
