#include "stages.hpp"

#include "magekt/fusion/train.hpp"
#include "magekt/jsonl.hpp"
#include "magekt/synth.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace magekt::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// File helpers

void note(const StageOptions& opt, const std::string& msg) {
    if (opt.log) *opt.log << msg << '\n';
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw CliError(ErrorKind::Input, "cannot read " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::string content_hash(const fs::path& p) { return jsonl::hex64(jsonl::fnv1a(slurp(p))); }

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    jsonl::write_file(p, lines);
}

json meta_of(const RunConfig& cfg, const std::string& what, std::uint64_t seed) {
    return {{"kind", "meta"}, {"artifact", what}, {"config_hash", cfg.hash}, {"seed", seed}};
}

void write_artifact(const fs::path& p, const json& meta, const std::vector<std::string>& body) {
    std::vector<std::string> lines{meta.dump()};
    lines.insert(lines.end(), body.begin(), body.end());
    write_lines(p, lines);
}

std::istringstream body_stream(const fs::path& p) {
    std::ostringstream os;
    for (const auto& l : read_artifact_body(p)) os << l << '\n';
    return std::istringstream(os.str());
}

std::string join(const std::vector<std::string>& fields, char d) {
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) out.push_back(d);
        out += fields[i];
    }
    return out;
}

// Every table ends with the config hash column.
void write_table(const fs::path& p, const RunConfig& cfg, std::vector<std::string> header,
                 const std::vector<std::vector<std::string>>& rows) {
    header.push_back("config_hash");
    std::vector<std::string> lines{join(header, cfg.delimiter)};
    for (auto r : rows) {
        r.push_back(cfg.hash);
        if (r.size() != header.size()) throw std::logic_error("table row width mismatch in " + p.string());
        lines.push_back(join(r, cfg.delimiter));
    }
    write_lines(p, lines);
}

struct PlotPoint {
    std::string series;
    json x;
    double y;
    std::uint64_t seed;
};

void write_plot(const fs::path& p, const RunConfig& cfg, const std::vector<PlotPoint>& points) {
    std::vector<std::string> lines;
    for (const auto& pt : points) {
        lines.push_back(json{{"series", pt.series}, {"x", pt.x}, {"y", pt.y}, {"config_hash", cfg.hash}, {"seed", pt.seed}}
                            .dump());
    }
    write_lines(p, lines);
}

std::string num(double v) { return jsonl::format_double(v); }
std::string num(std::size_t v) { return std::to_string(v); }

// ---------------------------------------------------------------------------
// Stage records

fs::path record_path(const RunConfig& cfg, const std::string& stage) {
    return cfg.output_dir / "stages" / (stage + ".json");
}

std::optional<json> load_record(const RunConfig& cfg, const std::string& stage) {
    const auto p = record_path(cfg, stage);
    if (!fs::exists(p)) return std::nullopt;
    try {
        return json::parse(slurp(p));
    } catch (const json::parse_error&) {
        throw CliError(ErrorKind::Stale, "stage record " + p.string() + " is corrupt; rerun with --force");
    }
}

json require_record(const RunConfig& cfg, const std::string& stage, const std::string& command) {
    auto r = load_record(cfg, stage);
    if (!r) {
        throw CliError(ErrorKind::Prerequisite, "missing outputs of stage '" + stage + "' in " +
                                                    cfg.output_dir.string() + "; run `magekt " + command + "` first");
    }
    return *r;
}

// True when the stage can be skipped.
bool up_to_date(const RunConfig& cfg, const StageOptions& opt, const std::string& stage, const std::string& key) {
    const auto rec = load_record(cfg, stage);
    if (!rec || opt.force) return false;
    if (rec->at("key") != key) {
        throw CliError(ErrorKind::Stale, "stage '" + stage + "' in " + cfg.output_dir.string() +
                                             " was produced from different inputs or settings; rerun with --force");
    }
    for (const auto& f : rec->value("outputs", json::array())) {
        if (!fs::exists(cfg.output_dir / f.get<std::string>())) return false;
    }
    note(opt, stage + ": up to date (use --force to recompute)");
    return true;
}

void save_record(const RunConfig& cfg, const std::string& stage, const std::string& key,
                 const std::vector<std::string>& outputs, json extra = json::object()) {
    extra["stage"] = stage;
    extra["key"] = key;
    extra["config_hash"] = cfg.hash;
    extra["outputs"] = outputs;
    write_lines(record_path(cfg, stage), {extra.dump(2)});
}

std::string chain_key(const std::vector<std::string>& parts) {
    return jsonl::hex64(jsonl::fnv1a(join(parts, '|')));
}

// ---------------------------------------------------------------------------
// Cached inputs

InteractionLog read_split(const RunConfig& cfg, const std::string& split) {
    auto in = body_stream(cfg.output_dir / "cache" / (split + ".jsonl"));
    return ingest::log_from_lines(in);
}

std::vector<ingest::Window> read_windows(const RunConfig& cfg, const std::string& split) {
    auto in = body_stream(cfg.output_dir / "cache" / ("windows_" + split + ".jsonl"));
    return ingest::windows_from_lines(in);
}

ConceptProfile profile_from(const json& j) {
    return {j.at("kc_id"), j.at("name"), j.at("definition"), j.at("category"), j.at("degraded")};
}

json profile_json(const ConceptProfile& p) {
    return {{"kc_id", p.kc_id}, {"name", p.name}, {"definition", p.definition}, {"category", p.category},
            {"degraded", p.degraded}};
}

fs::path checkpoint_path(const RunConfig& cfg, const std::string& variant, std::uint64_t seed) {
    return cfg.output_dir / "train" / variant / ("seed" + std::to_string(seed) + ".ckpt");
}

template <typename Job>
void run_parallel(std::size_t n, std::size_t threads, Job job) {
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = std::min(threads, n);
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex m;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    job(i);
                } catch (...) {
                    std::lock_guard lock(m);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

const std::vector<std::string> kIngestKeys{"data",          "col_student",          "col_question",
                                           "col_kcs",       "col_correct",          "col_timestamp",
                                           "field_delimiter", "kc_delimiter",       "min_student_attempts",
                                           "min_question_answers", "train_ratio",   "val_ratio",
                                           "test_ratio",    "split_seed",           "window_length"};
const std::vector<std::string> kIrtKeys{"irt_l2_prior", "irt_max_iters", "irt_tol"};
const std::vector<std::string> kAgentKeys{"kc_names",        "backend",          "chat_endpoint",   "chat_model",
                                          "prompt_dir",      "min_cooccurrence", "min_name_overlap",
                                          "doubt_threshold", "agent_retries",    "completion",
                                          "cross_correction"};
const std::vector<std::string> kGraphKeys{"sigma_q", "sigma_s", "topk_q", "topk_s"};
const std::vector<std::string> kTrainKeys{"sq_hops",   "kc_hops",     "budget",       "prefix_ability",
                                          "embed_dim", "attn_heads",  "attn_layers",  "gru_hidden",
                                          "ffn_mult",  "dropout",     "batch",        "max_epochs",
                                          "patience",  "lr",          "weight_decay", "eval_train",
                                          "seeds",     "irt_l2_prior"};


// Expected stage fingerprints, derived from the current config and input
// files so that a changed upstream setting is caught downstream as well.
std::string ingest_key(const RunConfig& cfg) {
    return chain_key({subset_hash(cfg, kIngestKeys), content_hash(cfg.data)});
}
std::string irt_key(const RunConfig& cfg) { return chain_key({ingest_key(cfg), subset_hash(cfg, kIrtKeys)}); }
std::string extract_key(const RunConfig& cfg) {
    std::vector<std::string> parts{ingest_key(cfg), subset_hash(cfg, kAgentKeys)};
    if (!cfg.kc_names.empty()) parts.push_back(content_hash(cfg.kc_names));
    return chain_key(parts);
}
std::string graphs_key(const RunConfig& cfg) {
    return chain_key({irt_key(cfg), extract_key(cfg), subset_hash(cfg, kGraphKeys)});
}
std::string train_key(const RunConfig& cfg, const std::string& variant) {
    return chain_key({graphs_key(cfg), variant, subset_hash(cfg, kTrainKeys)});
}
std::string eval_key(const RunConfig& cfg, const std::string& variant) {
    return chain_key({train_key(cfg, variant), "eval"});
}

json require_current(const RunConfig& cfg, const std::string& stage, const std::string& expected,
                     const std::string& command) {
    auto rec = require_record(cfg, stage, command);
    if (rec.at("key") != expected) {
        throw CliError(ErrorKind::Stale, "outputs of stage '" + stage + "' in " + cfg.output_dir.string() +
                                             " were produced with other inputs or settings; run `magekt " + command +
                                             " --force` first");
    }
    return rec;
}

struct Graphs {
    SqGraph sq;
    KcGraph kc;
    std::string sq_version;
    std::string kc_version;
};

Graphs load_graphs(const RunConfig& cfg) {
    const auto rec = require_current(cfg, "build-graphs", graphs_key(cfg), "build-graphs");
    Graphs g;
    const auto sq_lines = read_artifact_body(cfg.output_dir / "sq_graph.jsonl");
    const auto kc_lines = read_artifact_body(cfg.output_dir / "kc_graph.jsonl");
    g.sq_version = graphs::graph_version(sq_lines);
    g.kc_version = graphs::graph_version(kc_lines);
    if (g.sq_version != rec.at("sq_version") || g.kc_version != rec.at("kc_version")) {
        throw CliError(ErrorKind::Stale, "graph files in " + cfg.output_dir.string() +
                                             " differ from the versions recorded by build-graphs; rerun build-graphs "
                                             "with --force");
    }
    std::istringstream sq_in(join(sq_lines, '\n')), kc_in(join(kc_lines, '\n'));
    g.sq = graphs::sq_graph_from_lines(sq_in);
    g.kc = graphs::kc_graph_from_lines(kc_in);
    return g;
}

}  // namespace

std::vector<std::string> read_artifact_body(const fs::path& path) {
    std::istringstream in(slurp(path));
    std::vector<std::string> out;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (first) {
            first = false;
            if (line.find("\"kind\":\"meta\"") != std::string::npos) continue;
        }
        if (!line.empty()) out.push_back(line);
    }
    return out;
}

json read_artifact_meta(const fs::path& path) {
    std::istringstream in(slurp(path));
    std::string line;
    std::getline(in, line);
    auto j = json::parse(line);
    if (j.value("kind", "") != "meta") throw CliError(ErrorKind::Input, path.string() + " has no meta record");
    return j;
}

std::map<std::string, std::string> read_kc_names(const fs::path& path) {
    std::istringstream in(slurp(path));
    std::string line;
    if (!std::getline(in, line)) throw CliError(ErrorKind::Input, path.string() + " is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = ingest::split_csv_line(line, ',');
    const auto id_col = std::find(header.begin(), header.end(), "kc_id") - header.begin();
    const auto name_col = std::find(header.begin(), header.end(), "name") - header.begin();
    if (id_col == static_cast<long>(header.size()) || name_col == static_cast<long>(header.size())) {
        throw CliError(ErrorKind::Input, path.string() + ": header must contain the columns 'kc_id' and 'name'");
    }
    std::map<std::string, std::string> out;
    for (std::size_t n = 2; std::getline(in, line); ++n) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = ingest::split_csv_line(line, ',');
        if (f.size() != header.size()) {
            throw CliError(ErrorKind::Input, path.string() + " line " + std::to_string(n) + ": wrong field count");
        }
        out[f[static_cast<std::size_t>(id_col)]] = f[static_cast<std::size_t>(name_col)];
    }
    return out;
}

// ---------------------------------------------------------------------------

StageStatus run_ingest(const RunConfig& cfg, const StageOptions& opt) {
    if (cfg.data.empty()) throw CliError(ErrorKind::Config, "config key 'data' is not set");
    const auto key = ingest_key(cfg);
    if (up_to_date(cfg, opt, "ingest", key)) return StageStatus::UpToDate;

    std::ifstream in(cfg.data);
    ingest::ParseResult parsed;
    try {
        parsed = ingest::parse_interaction_csv(in, cfg.columns);
    } catch (const std::runtime_error& e) {
        throw CliError(ErrorKind::Input, cfg.data.string() + ": " + e.what());
    }
    const auto violations = validate_log(parsed.log);
    if (!violations.empty()) {
        std::string msg = cfg.data.string() + ": " + std::to_string(violations.size()) + " invalid records";
        for (std::size_t i = 0; i < std::min<std::size_t>(5, violations.size()); ++i) {
            msg += "; record " + std::to_string(violations[i].record_index) + " " + violations[i].rule + ": " +
                   violations[i].detail;
        }
        throw CliError(ErrorKind::Input, msg);
    }
    const auto filtered = ingest::filter_log(parsed.log, cfg.min_student_attempts, cfg.min_question_answers);
    if (filtered.empty()) throw CliError(ErrorKind::Input, "filtering removed every interaction");
    ingest::Splits splits;
    try {
        splits = ingest::split_students(filtered, cfg.split);
    } catch (const DomainError& e) {
        throw CliError(ErrorKind::Input, e.what());
    }

    const auto seed = cfg.split.seed;
    std::vector<std::vector<std::string>> rows{
        {"rows_read", num(parsed.log.size() + parsed.dropped)},
        {"rows_dropped", num(parsed.dropped)},
        {"students_before", num(parsed.log.students().size())},
        {"questions_before", num(parsed.log.questions().size())},
        {"kcs_before", num(parsed.log.kcs().size())},
        {"interactions_before", num(parsed.log.size())},
        {"students_after", num(filtered.students().size())},
        {"questions_after", num(filtered.questions().size())},
        {"kcs_after", num(filtered.kcs().size())},
        {"interactions_after", num(filtered.size())},
    };
    std::vector<std::string> outputs;
    for (const auto& [name, log] : {std::pair<std::string, const InteractionLog*>{"train", &splits.train},
                                    {"val", &splits.val},
                                    {"test", &splits.test}}) {
        const auto windows = ingest::window_sequences(*log, cfg.window_length);
        std::vector<std::string> wl;
        for (const auto& w : windows) wl.push_back(ingest::window_to_line(w));
        write_artifact(cfg.output_dir / "cache" / (name + ".jsonl"), meta_of(cfg, "log_" + name, seed),
                       ingest::log_to_lines(*log));
        write_artifact(cfg.output_dir / "cache" / ("windows_" + name + ".jsonl"),
                       meta_of(cfg, "windows_" + name, seed), wl);
        outputs.push_back("cache/" + name + ".jsonl");
        outputs.push_back("cache/windows_" + name + ".jsonl");
        rows.push_back({name + "_students", num(log->students().size())});
        rows.push_back({name + "_interactions", num(log->size())});
        rows.push_back({name + "_windows", num(windows.size())});
    }
    for (auto& r : rows) r.push_back(std::to_string(seed));
    write_table(cfg.output_dir / "ingest_summary.csv", cfg, {"metric", "value", "seed"}, rows);
    std::vector<std::vector<std::string>> dropped;
    for (const auto& d : parsed.dropped_rows) dropped.push_back({num(d.line), d.reason, std::to_string(seed)});
    write_table(cfg.output_dir / "ingest_dropped.csv", cfg, {"line", "reason", "seed"}, dropped);
    outputs.push_back("ingest_summary.csv");
    save_record(cfg, "ingest", key, outputs);
    note(opt, "ingest: " + std::to_string(filtered.size()) + " interactions kept of " +
                  std::to_string(parsed.log.size()) + "; " + std::to_string(splits.train.students().size()) + "/" +
                  std::to_string(splits.val.students().size()) + "/" + std::to_string(splits.test.students().size()) +
                  " students in train/val/test");
    return StageStatus::Ran;
}

StageStatus run_fit_irt(const RunConfig& cfg, const StageOptions& opt) {
    require_current(cfg, "ingest", ingest_key(cfg), "ingest");
    const auto key = irt_key(cfg);
    if (up_to_date(cfg, opt, "fit-irt", key)) return StageStatus::UpToDate;

    const auto train = read_split(cfg, "train");
    const auto params = irt::fit_rasch(train, cfg.irt);
    const auto& r = params.report;
    write_artifact(cfg.output_dir / "irt_params.jsonl", meta_of(cfg, "irt_params", cfg.split.seed),
                   irt::params_to_lines(params));
    const auto s = std::to_string(cfg.split.seed);
    write_table(cfg.output_dir / "irt_report.csv", cfg, {"metric", "value", "seed"},
                {{"students", num(params.theta.size()), s},
                 {"questions", num(params.b.size()), s},
                 {"iterations", std::to_string(r.iterations), s},
                 {"converged", r.converged ? "1" : "0", s},
                 {"final_nll", num(r.final_nll), s},
                 {"grad_inf_norm", num(r.grad_inf_norm), s}});
    std::vector<PlotPoint> pts;
    for (std::size_t i = 0; i < r.objective_trace.size(); ++i) {
        pts.push_back({"irt_objective", i, r.objective_trace[i], cfg.split.seed});
    }
    write_plot(cfg.output_dir / "plots" / "irt_objective.jsonl", cfg, pts);
    save_record(cfg, "fit-irt", key, {"irt_params.jsonl", "irt_report.csv"});
    note(opt, "fit-irt: " + std::to_string(r.iterations) + " iterations, gradient inf-norm " + num(r.grad_inf_norm) +
                  (r.converged ? "" : " (NOT converged)"));
    return StageStatus::Ran;
}

StageStatus run_extract_kc(const RunConfig& cfg, const StageOptions& opt) {
    require_current(cfg, "ingest", ingest_key(cfg), "ingest");
    const auto key = extract_key(cfg);
    if (up_to_date(cfg, opt, "extract-kc", key)) return StageStatus::UpToDate;

    const auto train = read_split(cfg, "train");
    std::set<std::string> ids;
    for (const char* split : {"train", "val", "test"}) {
        for (const auto& k : read_split(cfg, split).kcs()) ids.insert(k);
    }
    std::map<std::string, std::string> names;
    if (!cfg.kc_names.empty()) names = read_kc_names(cfg.kc_names);
    std::vector<ConceptProfile> kcs;
    std::size_t unnamed = 0;
    for (const auto& id : ids) {
        const auto it = names.find(id);
        unnamed += it == names.end();
        kcs.push_back({id, it == names.end() ? id : it->second, "", "", false});
    }
    if (unnamed > 0 && !cfg.kc_names.empty()) {
        note(opt, "extract-kc: " + std::to_string(unnamed) + " KCs have no entry in the names file; using ids");
    }

    const auto backend = make_backend(cfg);
    agents::ExtractionResult result;
    try {
        result = agents::extract_relations(kcs, train, *backend, cfg.pipeline);
    } catch (const agents::BackendError& e) {
        throw CliError(ErrorKind::Backend, e.what());
    }

    const auto seed = cfg.split.seed;
    std::vector<std::string> prof_lines, dec_lines;
    for (const auto& p : result.profiles) prof_lines.push_back(profile_json(p).dump());
    for (const auto& d : result.decisions) dec_lines.push_back(agents::decision_to_line(d));
    write_artifact(cfg.output_dir / "kc_profiles.jsonl", meta_of(cfg, "kc_profiles", seed), prof_lines);
    write_artifact(cfg.output_dir / "relation_decisions.jsonl", meta_of(cfg, "relation_decisions", seed), dec_lines);

    std::vector<std::vector<std::string>> rel_rows;
    std::map<RelationType, std::size_t> per_type;
    for (const auto& r : agents::graph_relations(result.graph)) {
        ++per_type[r.type];
        double conf = 0.0;
        for (const auto& e : result.graph.edges()) {
            if (result.graph.nodes()[e.src].kc_id == r.src && result.graph.nodes()[e.dst].kc_id == r.dst) {
                conf = e.confidence;
            }
        }
        rel_rows.push_back({r.src, r.dst, std::string(to_string(r.type)), num(conf), std::to_string(seed)});
    }
    write_table(cfg.output_dir / "kc_relations.csv", cfg, {"src", "dst", "type", "confidence", "seed"}, rel_rows);

    std::size_t corrected = 0, degraded = 0;
    for (const auto& d : result.decisions) corrected += d.provenance == DecisionStep::CrossCorrection;
    for (const auto& p : result.profiles) degraded += p.degraded;
    const auto s = std::to_string(seed);
    std::vector<std::vector<std::string>> rows{{"kcs", num(kcs.size()), s},
                                               {"candidate_pairs", num(result.candidate_pairs), s},
                                               {"cross_corrected", num(corrected), s},
                                               {"degraded_profiles", num(degraded), s},
                                               {"dropped_at_assembly", num(result.dropped.size()), s}};
    for (auto t : kAllRelationTypes) {
        if (t != RelationType::None) rows.push_back({"edges_" + std::string(to_string(t)), num(per_type[t]), s});
    }
    write_table(cfg.output_dir / "extract_summary.csv", cfg, {"metric", "value", "seed"}, rows);

    json extra = json::object();
    if (cfg.backend == "chat") extra["prompt_version"] = agents::PromptSet::load(cfg.chat.prompt_dir).version();
    save_record(cfg, "extract-kc", key, {"kc_profiles.jsonl", "relation_decisions.jsonl", "kc_relations.csv"}, extra);
    note(opt, "extract-kc: " + std::to_string(result.candidate_pairs) + " candidate pairs, " +
                  std::to_string(rel_rows.size()) + " relations");
    return StageStatus::Ran;
}

StageStatus run_build_graphs(const RunConfig& cfg, const StageOptions& opt) {
    require_current(cfg, "fit-irt", irt_key(cfg), "fit-irt");
    require_current(cfg, "extract-kc", extract_key(cfg), "extract-kc");
    const auto key = graphs_key(cfg);
    if (up_to_date(cfg, opt, "build-graphs", key)) return StageStatus::UpToDate;

    const auto train = read_split(cfg, "train");
    auto irt_in = body_stream(cfg.output_dir / "irt_params.jsonl");
    const auto params = irt::params_from_lines(irt_in);
    const auto sq = graphs::build_sq_graph(train, params, cfg.graph);

    std::vector<ConceptProfile> profiles;
    for (const auto& l : read_artifact_body(cfg.output_dir / "kc_profiles.jsonl")) {
        profiles.push_back(profile_from(json::parse(l)));
    }
    std::vector<RelationDecision> decisions;
    for (const auto& l : read_artifact_body(cfg.output_dir / "relation_decisions.jsonl")) {
        decisions.push_back(agents::decision_from_json(json::parse(l)));
    }
    const auto built = graphs::build_kc_graph(profiles, decisions);
    const auto violations = graphs::validate_kc_axioms(built.graph);
    if (!violations.empty()) throw std::logic_error("assembled KC graph breaks " + violations.front().rule);

    const auto sq_lines = graphs::sq_graph_to_lines(sq);
    const auto kc_lines = graphs::kc_graph_to_lines(built.graph);
    const auto sq_version = graphs::graph_version(sq_lines);
    const auto kc_version = graphs::graph_version(kc_lines);
    write_artifact(cfg.output_dir / "sq_graph.jsonl", meta_of(cfg, "sq_graph", cfg.split.seed), sq_lines);
    write_artifact(cfg.output_dir / "kc_graph.jsonl", meta_of(cfg, "kc_graph", cfg.split.seed), kc_lines);
    const auto s = std::to_string(cfg.split.seed);
    std::size_t sq_edges = sq.qs_edges.size() + sq.qq_edges.size() + sq.ss_edges.size();
    write_table(cfg.output_dir / "graph_summary.csv", cfg, {"graph", "nodes", "edges", "version", "seed"},
                {{"sq", num(sq.questions.size() + sq.students.size()), num(sq_edges), sq_version, s},
                 {"kc", num(built.graph.node_count()), num(built.graph.edges().size()), kc_version, s}});
    save_record(cfg, "build-graphs", key, {"sq_graph.jsonl", "kc_graph.jsonl"},
                {{"sq_version", sq_version}, {"kc_version", kc_version}});
    note(opt, "build-graphs: S-Q graph " + sq_version + ", KC graph " + kc_version);
    return StageStatus::Ran;
}

StageStatus run_train(const RunConfig& cfg, const StageOptions& opt, const std::string& variant_name) {
    const auto variant = fusion::variant_from_string(variant_name);
    const auto name = std::string(fusion::to_string(variant));
    require_current(cfg, "build-graphs", graphs_key(cfg), "build-graphs");
    const auto key = train_key(cfg, name);
    const auto stage = "train-" + name;
    if (up_to_date(cfg, opt, stage, key)) return StageStatus::UpToDate;

    const auto g = load_graphs(cfg);
    const fusion::Encoder enc(g.sq, g.kc, cfg.retrieval, variant, cfg.irt);
    const auto tr = fusion::encode_windows(enc, read_windows(cfg, "train"));
    const auto va = fusion::encode_windows(enc, read_windows(cfg, "val"));
    const fusion::VocabSizes vocab{enc.students(), enc.questions(), enc.kcs()};

    std::vector<std::unique_ptr<fusion::TrainResult>> results(cfg.seeds.size());
    run_parallel(cfg.seeds.size(), cfg.threads, [&](std::size_t i) {
        results[i] = std::make_unique<fusion::TrainResult>(fusion::train(cfg.model, variant, vocab, tr, va, cfg.seeds[i]));
    });

    std::vector<std::string> outputs;
    std::vector<PlotPoint> pts;
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
        const auto seed = cfg.seeds[i];
        const auto& r = *results[i];
        const json extra{{"config_hash", cfg.hash},   {"seed", seed},
                         {"sq_version", g.sq_version}, {"kc_version", g.kc_version},
                         {"best_epoch", r.best_epoch}, {"best_val_auc", r.best_val_auc}};
        const auto ckpt = checkpoint_path(cfg, name, seed);
        fs::create_directories(ckpt.parent_path());
        fusion::save_checkpoint(ckpt, r.model, vocab, extra.dump());
        auto hist = fusion::history_table(r.history, cfg.delimiter);
        std::vector<std::vector<std::string>> rows;
        std::vector<std::string> header;
        {
            std::istringstream h(hist[0]);
            for (std::string f; std::getline(h, f, cfg.delimiter);) header.push_back(f);
        }
        header.push_back("seed");
        for (std::size_t k = 1; k < hist.size(); ++k) {
            std::vector<std::string> row;
            std::istringstream line(hist[k] + cfg.delimiter);
            for (std::string f; std::getline(line, f, cfg.delimiter);) row.push_back(f);
            row.resize(header.size() - 1);
            row.push_back(std::to_string(seed));
            rows.push_back(row);
        }
        const auto hist_path = "train/" + name + "/history_seed" + std::to_string(seed) + ".csv";
        write_table(cfg.output_dir / hist_path, cfg, header, rows);
        outputs.push_back(fs::relative(ckpt, cfg.output_dir).string());
        outputs.push_back(hist_path);
        for (const auto& h : r.history) {
            pts.push_back({name + "/seed" + std::to_string(seed) + "/train_loss", h.epoch, h.train_loss, seed});
            pts.push_back({name + "/seed" + std::to_string(seed) + "/val_auc", h.epoch, h.val_auc, seed});
        }
        note(opt, "train " + name + " seed " + std::to_string(seed) + ": best val AUC " + num(r.best_val_auc) +
                      " at epoch " + std::to_string(r.best_epoch));
    }
    write_plot(cfg.output_dir / "plots" / ("train_" + name + ".jsonl"), cfg, pts);
    save_record(cfg, stage, key, outputs, {{"sq_version", g.sq_version}, {"kc_version", g.kc_version}});
    return StageStatus::Ran;
}

StageStatus run_eval(const RunConfig& cfg, const StageOptions& opt, const std::string& variant_name) {
    const auto variant = fusion::variant_from_string(variant_name);
    const auto name = std::string(fusion::to_string(variant));
    require_current(cfg, "train-" + name, train_key(cfg, name), "train --variant " + name);
    const auto key = eval_key(cfg, name);
    const auto stage = "eval-" + name;
    if (up_to_date(cfg, opt, stage, key)) return StageStatus::UpToDate;

    const auto g = load_graphs(cfg);
    const fusion::Encoder enc(g.sq, g.kc, cfg.retrieval, variant, cfg.irt);
    const auto va = fusion::encode_windows(enc, read_windows(cfg, "val"));
    const auto te = fusion::encode_windows(enc, read_windows(cfg, "test"));

    std::vector<std::vector<std::string>> rows;
    std::vector<PlotPoint> pts;
    json summary{{"variant", name}, {"config_hash", cfg.hash}, {"seeds", cfg.seeds}};
    std::map<std::string, std::pair<double, double>> sums;
    for (const auto seed : cfg.seeds) {
        const auto ckpt = checkpoint_path(cfg, name, seed);
        if (!fs::exists(ckpt)) {
            throw CliError(ErrorKind::Prerequisite, "missing checkpoint " + ckpt.string() + "; run `magekt train` first");
        }
        std::ifstream in(ckpt);
        std::string first;
        std::getline(in, first);
        const auto extra = json::parse(first).at("extra");
        if (extra.at("sq_version") != g.sq_version || extra.at("kc_version") != g.kc_version) {
            throw CliError(ErrorKind::Stale, "checkpoint " + ckpt.string() +
                                                 " was trained on other graph versions; retrain with --force");
        }
        auto model = fusion::load_checkpoint(ckpt);
        for (const auto& [split, data] : {std::pair<std::string, const fusion::EncodedWindows*>{"val", &va},
                                          {"test", &te}}) {
            if (data->empty()) throw CliError(ErrorKind::Input, "split '" + split + "' has no windows to evaluate");
            const auto r = fusion::evaluate(model, *data);
            rows.push_back({name, split, num(r.n), num(r.auc), num(r.acc), std::to_string(seed)});
            summary["per_seed"][split].push_back({{"seed", seed}, {"auc", r.auc}, {"acc", r.acc}, {"n", r.n}});
            sums[split].first += r.auc;
            sums[split].second += r.acc;
            pts.push_back({name + "/" + split + "_auc", seed, r.auc, seed});
        }
    }
    const auto k = static_cast<double>(cfg.seeds.size());
    for (const auto& [split, s] : sums) {
        rows.push_back({name, split, "", num(s.first / k), num(s.second / k), "mean"});
        summary[split] = {{"auc_mean", s.first / k}, {"acc_mean", s.second / k}};
    }
    write_table(cfg.output_dir / ("eval_" + name + ".csv"), cfg, {"variant", "split", "n", "auc", "acc", "seed"}, rows);
    write_lines(cfg.output_dir / ("eval_" + name + ".json"), {summary.dump(2)});
    write_plot(cfg.output_dir / "plots" / ("eval_" + name + ".jsonl"), cfg, pts);
    save_record(cfg, stage, key, {"eval_" + name + ".csv", "eval_" + name + ".json"});
    note(opt, "eval " + name + ": test AUC " + num(sums["test"].first / k) + ", ACC " + num(sums["test"].second / k) +
                  " (mean over " + std::to_string(cfg.seeds.size()) + " seeds)");
    return StageStatus::Ran;
}

StageStatus run_ablate(const RunConfig& cfg, const StageOptions& opt) {
    if (cfg.ablate_variants.empty()) throw CliError(ErrorKind::Config, "ablate_variants is empty");
    // Upstream stages are reused when current.
    run_ingest(cfg, opt);
    run_fit_irt(cfg, opt);
    run_extract_kc(cfg, opt);
    run_build_graphs(cfg, opt);
    std::vector<json> summaries;
    for (const auto& v : cfg.ablate_variants) {
        run_train(cfg, opt, v);
        run_eval(cfg, opt, v);
        const auto name = std::string(fusion::to_string(fusion::variant_from_string(v)));
        summaries.push_back(json::parse(slurp(cfg.output_dir / ("eval_" + name + ".json"))));
    }
    std::optional<double> full_auc;
    for (const auto& s : summaries) {
        if (s["variant"] == "full") full_auc = s["test"]["auc_mean"].get<double>();
    }
    std::vector<std::vector<std::string>> rows;
    std::vector<PlotPoint> pts;
    std::string seeds;
    for (auto s : cfg.seeds) seeds += (seeds.empty() ? "" : " ") + std::to_string(s);
    for (const auto& s : summaries) {
        const double auc = s["test"]["auc_mean"];
        rows.push_back({s["variant"], num(auc), num(s["test"]["acc_mean"].get<double>()),
                        num(s["val"]["auc_mean"].get<double>()), num(s["val"]["acc_mean"].get<double>()),
                        full_auc ? num(*full_auc - auc) : "", seeds});
        pts.push_back({"ablation/test_auc", s["variant"], auc, 0});
    }
    write_table(cfg.output_dir / "ablation.csv", cfg,
                {"variant", "test_auc", "test_acc", "val_auc", "val_acc", "test_auc_drop_vs_full", "seed"}, rows);
    write_plot(cfg.output_dir / "plots" / "ablation.jsonl", cfg, pts);
    note(opt, "ablate: wrote " + (cfg.output_dir / "ablation.csv").string());
    return StageStatus::Ran;
}

void run_relation_eval(const RunConfig& cfg, const StageOptions& opt, fs::path predicted, fs::path gold) {
    if (gold.empty()) gold = cfg.gold_relations;
    if (gold.empty()) throw CliError(ErrorKind::Config, "no gold relation file (config key 'gold_relations' or --gold)");
    std::vector<agents::TypedRelation> gold_rel;
    {
        std::istringstream in(slurp(gold));
        try {
            gold_rel = agents::read_gold_relations(in);
        } catch (const DomainError& e) {
            throw CliError(ErrorKind::Input, gold.string() + ": " + e.what());
        }
    }
    KcGraph graph;
    if (predicted.empty()) {
        graph = load_graphs(cfg).kc;
    } else if (predicted.extension() == ".jsonl") {
        auto in = body_stream(predicted);
        graph = graphs::kc_graph_from_lines(in);
    } else {
        std::istringstream in(slurp(predicted));
        std::vector<agents::TypedRelation> rels;
        try {
            rels = agents::read_gold_relations(in);
        } catch (const DomainError& e) {
            throw CliError(ErrorKind::Input, predicted.string() + ": " + e.what());
        }
        std::set<std::string> ids;
        std::vector<RelationDecision> ds;
        for (const auto& r : rels) {
            ids.insert(r.src);
            ids.insert(r.dst);
            RelationDecision d;
            d.kc_a = r.src;
            d.kc_b = r.dst;
            d.final_type = r.type;
            d.confidence = 1.0;
            ds.push_back(d);
        }
        std::vector<ConceptProfile> nodes;
        for (const auto& id : ids) nodes.push_back({id, id, "", "", false});
        graph = graphs::build_kc_graph(nodes, ds).graph;
    }
    agents::RelationScores s;
    try {
        s = agents::evaluate_relations(graph, gold_rel);
    } catch (const DomainError& e) {
        throw CliError(ErrorKind::Input, gold.string() + ": " + e.what());
    }
    const auto seed = std::to_string(cfg.split.seed);
    write_table(cfg.output_dir / "relation_eval.csv", cfg, {"metric", "value", "definition", "seed"},
                {{"pred", num(s.pred), "percent of gold KC pairs that receive any predicted relation", seed},
                 {"corr", num(s.corr), "percent of gold relations predicted with the same type and direction", seed},
                 {"jacc", num(s.jacc),
                  "100 * |P and G| / |P or G| over typed relations (direction ignored for symmetric types)", seed}});
    write_plot(cfg.output_dir / "plots" / "relation_eval.jsonl", cfg,
               {{"relation_eval", "pred", s.pred, cfg.split.seed},
                {"relation_eval", "corr", s.corr, cfg.split.seed},
                {"relation_eval", "jacc", s.jacc, cfg.split.seed}});
    note(opt, "relation-eval: Pred " + num(s.pred) + ", Corr " + num(s.corr) + ", Jacc " + num(s.jacc));
}

void run_all(const RunConfig& cfg, const StageOptions& opt) {
    run_ingest(cfg, opt);
    run_fit_irt(cfg, opt);
    run_extract_kc(cfg, opt);
    run_build_graphs(cfg, opt);
    run_train(cfg, opt, cfg.variant);
    run_eval(cfg, opt, cfg.variant);
    if (!cfg.gold_relations.empty()) run_relation_eval(cfg, opt);
}

void write_demo(const fs::path& dir, const DemoSpec& spec) {
    synth::RelationWorldConfig rc;
    rc.students_per_unit = spec.students_per_unit;
    rc.seed = spec.seed;
    const auto world = synth::planted_relations(rc);
    fs::create_directories(dir);
    std::vector<std::string> rows{"student_id,question_id,kc_ids,correct,timestamp"};
    for (const auto& r : world.log.records()) {
        std::string kcs;
        for (const auto& k : r.kc_ids) kcs += (kcs.empty() ? "" : ";") + k;
        rows.push_back(r.student_id + "," + r.question_id + "," + kcs + "," + std::to_string(r.correct) + "," +
                       jsonl::format_double(r.timestamp));
    }
    jsonl::write_file(dir / "interactions.csv", rows);
    std::vector<std::string> names{"kc_id,name"};
    for (const auto& k : world.kcs) names.push_back(k.kc_id + "," + k.name);
    jsonl::write_file(dir / "kc_names.csv", names);
    jsonl::write_file(dir / "gold_relations.csv", agents::gold_to_lines(world.gold));
    const json config{
        {"_comment", "Demo run: planted 30-KC relation world with a small model."},
        {"data", "interactions.csv"},
        {"kc_names", "kc_names.csv"},
        {"gold_relations", "gold_relations.csv"},
        {"window_length", 20},
        {"topk_q", 5},
        {"topk_s", 5},
        {"sq_hops", 1},
        {"kc_hops", 1},
        {"budget", 32},
        {"prefix_ability", true},
        {"embed_dim", 16},
        {"attn_heads", 2},
        {"attn_layers", 1},
        {"gru_hidden", 32},
        {"ffn_mult", 2},
        {"dropout", 0.1},
        {"batch", 16},
        {"max_epochs", 12},
        {"patience", 4},
        {"lr", 0.003},
        {"seeds", {0, 1, 2}},
        {"output_dir", "out"},
    };
    jsonl::write_file(dir / "config.json", {config.dump(2)});
}

}  // namespace magekt::cli
