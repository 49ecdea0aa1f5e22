#include "stages.hpp"

#include "magekt/agents.hpp"

#include <CLI/CLI.hpp>

#include <iostream>

using namespace magekt;
using namespace magekt::cli;

namespace {

constexpr int kUsageExit = 1;
constexpr int kInternalExit = 10;

int report(std::string_view kind, const std::string& what, int code) {
    std::cerr << "error[" << kind << "]: " << what << '\n';
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Knowledge tracing with agent-built concept graphs and graph-retrieval fusion."};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path = "config.json";
    bool force = false;
    bool quiet = false;
    app.add_option("-c,--config", config_path, "Run configuration (flat JSON object)");
    app.add_flag("-f,--force", force, "Recompute stages even when their records are up to date");
    app.add_flag("-q,--quiet", quiet, "Suppress progress lines");

    auto* ingest = app.add_subcommand("ingest", "Parse, filter, split and window the interaction log");
    auto* fit = app.add_subcommand("fit-irt", "Fit Rasch abilities and difficulties on the training split");
    auto* extract = app.add_subcommand("extract-kc", "Run the agent pipeline to type KC relations");
    auto* build = app.add_subcommand("build-graphs", "Build the student-question and KC graphs");

    std::string variant;
    auto* train = app.add_subcommand("train", "Train one model variant for every configured seed");
    train->add_option("--variant", variant, "full, no_asyatt, no_kc_graph, no_sq_graph or no_subgraph");
    auto* eval = app.add_subcommand("eval", "Evaluate trained checkpoints on validation and test windows");
    eval->add_option("--variant", variant, "Variant to evaluate (defaults to the config's)");

    auto* ablate = app.add_subcommand("ablate", "Train and evaluate every ablation variant");

    std::string pred_path, gold_path;
    auto* rel = app.add_subcommand("relation-eval", "Score predicted KC relations against gold relations");
    rel->add_option("--pred", pred_path, "kc_graph.jsonl or src,dst,type file (default: this run's KC graph)");
    rel->add_option("--gold", gold_path, "Gold relations (default: config key gold_relations)");

    std::string demo_dir = "demo";
    std::size_t demo_students = 40;
    std::uint64_t demo_seed = 7;
    auto* demo = app.add_subcommand("demo", "Write a small synthetic dataset with a ready-to-run config");
    demo->add_option("--out", demo_dir, "Target directory");
    demo->add_option("--students-per-unit", demo_students, "Students per curriculum unit")->check(CLI::PositiveNumber);
    demo->add_option("--seed", demo_seed, "Generator seed");

    auto* all = app.add_subcommand("all", "ingest through eval, then relation-eval when gold is configured");

    auto* show = app.add_subcommand("show-config", "Print the resolved configuration");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kUsageExit;
    }

    StageOptions opt;
    opt.force = force;
    opt.log = quiet ? nullptr : &std::cerr;

    try {
        if (demo->parsed()) {
            write_demo(demo_dir, {demo_students, demo_seed});
            if (!quiet) std::cerr << "demo: wrote " << demo_dir << "; run `magekt all --config " << demo_dir
                                  << "/config.json`\n";
            return 0;
        }
        const auto cfg = load_config(config_path);
        const auto v = variant.empty() ? cfg.variant : variant;
        if (ingest->parsed()) run_ingest(cfg, opt);
        if (fit->parsed()) run_fit_irt(cfg, opt);
        if (extract->parsed()) run_extract_kc(cfg, opt);
        if (build->parsed()) run_build_graphs(cfg, opt);
        if (train->parsed()) run_train(cfg, opt, v);
        if (eval->parsed()) run_eval(cfg, opt, v);
        if (ablate->parsed()) run_ablate(cfg, opt);
        if (rel->parsed()) run_relation_eval(cfg, opt, pred_path, gold_path);
        if (all->parsed()) run_all(cfg, opt);
        if (show->parsed()) std::cout << cfg.resolved.dump(2) << "\nconfig_hash " << cfg.hash << '\n';
    } catch (const CliError& e) {
        return report(to_string(e.kind()), e.what(), static_cast<int>(e.kind()));
    } catch (const agents::BackendError& e) {
        return report("backend", e.what(), static_cast<int>(ErrorKind::Backend));
    } catch (const DomainError& e) {
        return report("domain", e.what(), kInternalExit - 1);
    } catch (const std::exception& e) {
        return report("internal", e.what(), kInternalExit);
    }
    return 0;
}
