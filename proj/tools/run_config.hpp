#pragma once

#include "magekt/agents.hpp"
#include "magekt/chat_backend.hpp"
#include "magekt/fusion/encode.hpp"
#include "magekt/fusion/model.hpp"
#include "magekt/graphs.hpp"
#include "magekt/ingest.hpp"
#include "magekt/irt.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace magekt::cli {

/// Error categories; each maps to its own exit code.
enum class ErrorKind { Config = 2, Input = 3, Prerequisite = 4, Stale = 5, Backend = 6 };

class CliError : public std::runtime_error {
public:
    CliError(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

std::string_view to_string(ErrorKind kind);

/// Everything a run needs, loaded from one flat JSON object. Relative paths
/// resolve against the config file's directory.
struct RunConfig {
    // Inputs.
    std::filesystem::path data;
    std::filesystem::path kc_names;
    std::filesystem::path gold_relations;
    ingest::ColumnSchema columns;

    // Ingest.
    std::size_t min_student_attempts = 10;
    std::size_t min_question_answers = 10;
    ingest::SplitSpec split;
    std::size_t window_length = 100;

    irt::IrtConfig irt;
    graphs::GraphBuildConfig graph;

    // Relation extraction.
    std::string backend = "heuristic";
    agents::ChatConfig chat;
    agents::PipelineConfig pipeline;

    fusion::RetrievalConfig retrieval;
    fusion::ModelConfig model;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::string variant = "full";
    std::vector<std::string> ablate_variants;

    std::filesystem::path output_dir = "out";
    char delimiter = ',';
    /// Worker threads for seed-parallel training (0 = hardware threads).
    std::size_t threads = 0;

    /// Resolved key/value view (defaults filled in); the hash is computed
    /// over this minus output_dir and threads.
    nlohmann::json resolved;
    std::string hash;
};

/// Documented key set with defaults, as a JSON object.
nlohmann::json default_config_json();

/// Throws CliError(Config) for unknown keys, wrong types or invalid values.
RunConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = ".");
RunConfig load_config(const std::filesystem::path& path);

/// Hash of the listed keys of `cfg.resolved` (stage-specific fingerprints).
std::string subset_hash(const RunConfig& cfg, const std::vector<std::string>& keys);

std::unique_ptr<agents::AgentBackend> make_backend(const RunConfig& cfg);

}  // namespace magekt::cli
