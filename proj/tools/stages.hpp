#pragma once

#include "run_config.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

namespace magekt::cli {

struct StageOptions {
    /// Recompute even when a stage's record says it is up to date.
    bool force = false;
    std::ostream* log = nullptr;
};

enum class StageStatus { Ran, UpToDate };

/// Each stage writes its outputs under cfg.output_dir plus a record in
/// stages/<name>.json holding a fingerprint of its inputs. A matching record
/// skips the stage; a mismatching one is an error unless forced.
StageStatus run_ingest(const RunConfig& cfg, const StageOptions& opt);
StageStatus run_fit_irt(const RunConfig& cfg, const StageOptions& opt);
StageStatus run_extract_kc(const RunConfig& cfg, const StageOptions& opt);
StageStatus run_build_graphs(const RunConfig& cfg, const StageOptions& opt);
StageStatus run_train(const RunConfig& cfg, const StageOptions& opt, const std::string& variant);
StageStatus run_eval(const RunConfig& cfg, const StageOptions& opt, const std::string& variant);
/// Brings the upstream stages up to date, then trains and evaluates each
/// configured variant and writes ablation.csv.
StageStatus run_ablate(const RunConfig& cfg, const StageOptions& opt);
/// Always recomputed (cheap). Empty paths fall back to the run's KC graph
/// and the configured gold file.
void run_relation_eval(const RunConfig& cfg, const StageOptions& opt, std::filesystem::path predicted = {},
                       std::filesystem::path gold = {});
/// ingest through eval for cfg.variant, then relation-eval when a gold
/// file is configured.
void run_all(const RunConfig& cfg, const StageOptions& opt);

struct DemoSpec {
    std::size_t students_per_unit = 40;
    std::uint64_t seed = 7;
};

/// Writes interactions.csv, kc_names.csv, gold_relations.csv and
/// config.json (a small model that trains in minutes) into `dir`.
void write_demo(const std::filesystem::path& dir, const DemoSpec& spec);

/// Reads a "kc_id,name" file with a header row.
std::map<std::string, std::string> read_kc_names(const std::filesystem::path& path);

/// JSONL artifact with a leading {"kind":"meta",...} record.
std::vector<std::string> read_artifact_body(const std::filesystem::path& path);
nlohmann::json read_artifact_meta(const std::filesystem::path& path);

}  // namespace magekt::cli
