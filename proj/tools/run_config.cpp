#include "run_config.hpp"

#include "magekt/heuristic_backend.hpp"
#include "magekt/jsonl.hpp"

#include <fstream>

namespace magekt::cli {

using nlohmann::json;

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Config: return "config";
        case ErrorKind::Input: return "input";
        case ErrorKind::Prerequisite: return "prerequisite";
        case ErrorKind::Stale: return "stale";
        case ErrorKind::Backend: return "backend";
    }
    return "error";
}

json default_config_json() {
    const fusion::ModelConfig m;
    const fusion::RetrievalConfig r;
    const irt::IrtConfig irt;
    const graphs::GraphBuildConfig g;
    const agents::PipelineConfig p;
    const agents::ChatConfig c;
    const ingest::ColumnSchema cols;
    return {
        {"data", ""},
        {"kc_names", ""},
        {"gold_relations", ""},
        {"col_student", cols.student},
        {"col_question", cols.question},
        {"col_kcs", cols.kcs},
        {"col_correct", cols.correct},
        {"col_timestamp", cols.timestamp},
        {"field_delimiter", std::string(1, cols.field_delimiter)},
        {"kc_delimiter", std::string(1, cols.kc_delimiter)},
        {"min_student_attempts", 10},
        {"min_question_answers", 10},
        {"train_ratio", 0.8},
        {"val_ratio", 0.1},
        {"test_ratio", 0.1},
        {"split_seed", 0},
        {"window_length", 100},
        {"irt_l2_prior", irt.l2_prior},
        {"irt_max_iters", irt.max_iters},
        {"irt_tol", irt.tol},
        {"sigma_q", nullptr},
        {"sigma_s", nullptr},
        {"topk_q", g.topk_q},
        {"topk_s", g.topk_s},
        {"backend", "heuristic"},
        {"chat_endpoint", c.endpoint},
        {"chat_model", c.model},
        {"chat_api_key_env", c.api_key_env},
        {"chat_max_retries", c.max_retries},
        {"prompt_dir", ""},
        {"min_cooccurrence", p.min_cooccurrence},
        {"min_name_overlap", p.min_name_overlap},
        {"doubt_threshold", p.doubt_threshold},
        {"agent_retries", p.retries},
        {"max_in_flight", p.max_in_flight},
        {"completion", p.completion},
        {"cross_correction", p.cross_correction},
        {"sq_hops", r.sq_hops},
        {"kc_hops", r.kc_hops},
        {"budget", r.budget},
        {"prefix_ability", r.prefix_ability},
        {"embed_dim", m.embed_dim},
        {"attn_heads", m.attn_heads},
        {"attn_layers", m.attn_layers},
        {"gru_hidden", m.gru_hidden},
        {"ffn_mult", m.ffn_mult},
        {"dropout", m.dropout},
        {"batch", m.batch},
        {"max_epochs", m.max_epochs},
        {"patience", m.patience},
        {"lr", m.lr},
        {"weight_decay", m.weight_decay},
        {"eval_train", m.eval_train},
        {"seeds", {0, 1, 2}},
        {"variant", "full"},
        {"ablate_variants", {"full", "no_asyatt", "no_kc_graph", "no_sq_graph", "no_subgraph"}},
        {"output_dir", "out"},
        {"delimiter", ","},
        {"threads", 0},
    };
}

namespace {

char single_char(const json& v, const char* key) {
    const auto s = v.get<std::string>();
    if (s == "\\t" || s == "tab") return '\t';
    if (s.size() != 1) throw CliError(ErrorKind::Config, std::string(key) + " must be a single character");
    return s[0];
}

std::filesystem::path resolve(const std::string& p, const std::filesystem::path& base) {
    if (p.empty()) return {};
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base / path;
}

}  // namespace

RunConfig config_from_json(const json& j, const std::filesystem::path& base_dir) {
    if (!j.is_object()) throw CliError(ErrorKind::Config, "config must be a JSON object");
    json r = default_config_json();
    for (const auto& [key, value] : j.items()) {
        if (key.rfind("_comment", 0) == 0 || key.rfind("//", 0) == 0) continue;
        if (!r.contains(key)) throw CliError(ErrorKind::Config, "unknown config key '" + key + "'");
        const auto& def = r[key];
        const bool ok = def.is_null() ? (value.is_null() || value.is_number())
                        : def.is_number_float() ? value.is_number()
                        : def.is_number()       ? value.is_number_integer() && value.get<long long>() >= 0
                                                : def.type() == value.type();
        if (!ok) throw CliError(ErrorKind::Config, "config key '" + key + "' has the wrong type");
        r[key] = value;
    }

    RunConfig c;
    try {
        c.data = resolve(r["data"], base_dir);
        c.kc_names = resolve(r["kc_names"], base_dir);
        c.gold_relations = resolve(r["gold_relations"], base_dir);
        c.columns.student = r["col_student"];
        c.columns.question = r["col_question"];
        c.columns.kcs = r["col_kcs"];
        c.columns.correct = r["col_correct"];
        c.columns.timestamp = r["col_timestamp"];
        c.columns.field_delimiter = single_char(r["field_delimiter"], "field_delimiter");
        c.columns.kc_delimiter = single_char(r["kc_delimiter"], "kc_delimiter");
        for (const char* k : {"col_student", "col_question", "col_kcs", "col_correct"}) {
            if (r[k].get<std::string>().empty()) throw CliError(ErrorKind::Config, std::string(k) + " must name a column");
        }
        c.min_student_attempts = r["min_student_attempts"];
        c.min_question_answers = r["min_question_answers"];
        c.split.train_ratio = r["train_ratio"];
        c.split.val_ratio = r["val_ratio"];
        c.split.test_ratio = r["test_ratio"];
        c.split.seed = r["split_seed"];
        c.split.validate();
        c.window_length = r["window_length"];
        if (c.window_length < 2) throw CliError(ErrorKind::Config, "window_length must be at least 2");

        c.irt.l2_prior = r["irt_l2_prior"];
        c.irt.max_iters = r["irt_max_iters"];
        c.irt.tol = r["irt_tol"];
        c.irt.validate();
        if (!r["sigma_q"].is_null()) c.graph.sigma_q = r["sigma_q"].get<double>();
        if (!r["sigma_s"].is_null()) c.graph.sigma_s = r["sigma_s"].get<double>();
        c.graph.topk_q = r["topk_q"];
        c.graph.topk_s = r["topk_s"];
        c.graph.validate();

        c.backend = r["backend"];
        if (c.backend != "heuristic" && c.backend != "chat") {
            throw CliError(ErrorKind::Config, "backend must be 'heuristic' or 'chat'");
        }
        c.chat.endpoint = r["chat_endpoint"];
        c.chat.model = r["chat_model"];
        c.chat.api_key_env = r["chat_api_key_env"];
        c.chat.max_retries = r["chat_max_retries"];
        if (!r["prompt_dir"].get<std::string>().empty()) c.chat.prompt_dir = resolve(r["prompt_dir"], base_dir);
        c.pipeline.min_cooccurrence = r["min_cooccurrence"];
        c.pipeline.min_name_overlap = r["min_name_overlap"];
        c.pipeline.doubt_threshold = r["doubt_threshold"];
        c.pipeline.retries = r["agent_retries"];
        c.pipeline.max_in_flight = r["max_in_flight"];
        c.pipeline.completion = r["completion"];
        c.pipeline.cross_correction = r["cross_correction"];

        c.retrieval.sq_hops = r["sq_hops"];
        c.retrieval.kc_hops = r["kc_hops"];
        c.retrieval.budget = r["budget"];
        c.retrieval.prefix_ability = r["prefix_ability"];
        c.retrieval.validate();
        c.model.embed_dim = r["embed_dim"];
        c.model.attn_heads = r["attn_heads"];
        c.model.attn_layers = r["attn_layers"];
        c.model.gru_hidden = r["gru_hidden"];
        c.model.ffn_mult = r["ffn_mult"];
        c.model.dropout = r["dropout"];
        c.model.batch = r["batch"];
        c.model.max_epochs = r["max_epochs"];
        c.model.patience = r["patience"];
        c.model.lr = r["lr"];
        c.model.weight_decay = r["weight_decay"];
        c.model.eval_train = r["eval_train"];
        c.seeds.clear();
        for (const auto& s : r["seeds"]) {
            if (!s.is_number_integer() || s.get<long long>() < 0) throw CliError(ErrorKind::Config, "seeds must be non-negative integers");
            c.seeds.push_back(s.get<std::uint64_t>());
        }
        if (c.seeds.empty()) throw CliError(ErrorKind::Config, "seeds must not be empty");
        c.model.seeds = c.seeds.size();
        c.model.validate();
        c.variant = r["variant"];
        fusion::variant_from_string(c.variant);
        for (const auto& v : r["ablate_variants"]) {
            c.ablate_variants.push_back(v.get<std::string>());
            fusion::variant_from_string(c.ablate_variants.back());
        }
        c.output_dir = resolve(r["output_dir"], base_dir);
        c.delimiter = single_char(r["delimiter"], "delimiter");
        c.threads = r["threads"];
    } catch (const CliError&) {
        throw;
    } catch (const std::exception& e) {
        throw CliError(ErrorKind::Config, e.what());
    }
    c.resolved = r;
    json hashed = r;
    hashed.erase("output_dir");
    hashed.erase("threads");
    c.hash = jsonl::hex64(jsonl::fnv1a(hashed.dump()));
    return c;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw CliError(ErrorKind::Config, "cannot read config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw CliError(ErrorKind::Config, "config " + path.string() + " is not valid JSON: " + e.what());
    }
    return config_from_json(j, path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

std::string subset_hash(const RunConfig& cfg, const std::vector<std::string>& keys) {
    json sub = json::object();
    for (const auto& k : keys) sub[k] = cfg.resolved.at(k);
    return jsonl::hex64(jsonl::fnv1a(sub.dump()));
}

std::unique_ptr<agents::AgentBackend> make_backend(const RunConfig& cfg) {
    if (cfg.backend == "chat") {
        try {
            return std::make_unique<agents::ChatBackend>(cfg.chat);
        } catch (const DomainError& e) {
            throw CliError(ErrorKind::Config, e.what());
        }
    }
    return std::make_unique<agents::HeuristicBackend>();
}

}  // namespace magekt::cli
