// Command-line front end: validate/split corpora, run the experiment grid,
// judge and report, and build the training datasets. Thin argv parsing over
// the command functions in dialign/cli.hpp.

#include <iostream>

#include <CLI11.hpp>

#include "dialign/cli.hpp"

namespace cli = dialign::cli;

int main(int argc, char** argv) {
    CLI::App app{"Dialectical-path robustness pipeline for poisoned-context QA"};
    app.require_subcommand(1);
    int rc = cli::kExitOk;

    // --- validate ---
    cli::ValidateArgs validate_args;
    auto* validate = app.add_subcommand("validate", "Check a corpus against its invariants");
    validate->add_option("--corpus", validate_args.corpus, "Corpus JSON file")->required();
    validate->callback(
        [&] { rc = cli::command_validate(validate_args, std::cout, std::cerr); });

    // --- split ---
    cli::SplitArgs split_args;
    auto* split = app.add_subcommand("split", "Draw disjoint train/test sample ids");
    split->add_option("--corpus", split_args.corpus, "Corpus JSON file")->required();
    split->add_option("--n-train", split_args.n_train, "Training samples to draw");
    split->add_option("--n-test", split_args.n_test, "Test samples to draw");
    split->add_option("--seed", split_args.seed, "Shuffle seed");
    split->add_option("--out", split_args.out_path, "Output split file (default split.json)");
    split->add_flag("--per-dataset", split_args.per_dataset,
                    "Draw the counts within every dataset tag instead of the pooled corpus");
    split->callback([&] { rc = cli::command_split(split_args, std::cout, std::cerr); });

    // --- run ---
    cli::RunArgs run_args;
    auto* run = app.add_subcommand("run", "Execute the experiment grid");
    run->add_option("--profile", run_args.profile_path, "Profile config file")->required();
    run->add_option("--corpus", run_args.corpus, "Corpus JSON file")->required();
    run->add_option("--run-dir", run_args.run_dir,
                    "Run directory (default <run_root>/<corpus>_<model>)");
    run->add_option("--temps", run_args.temps, "Temperatures (default from profile)")
        ->delimiter(',');
    run->add_option("--paths", run_args.paths, "Paths to run (default from profile)")
        ->delimiter(',');
    run->add_option("--pcn-max", run_args.pcn_max, "Highest poisoned-context count (1..5)");
    run->add_option("--parallelism", run_args.parallelism, "Concurrent trials");
    run->add_option("--generator-profile", run_args.generator_role,
                    "Provider role to generate with (default generator)");
    run->add_option("--split", run_args.split_path, "Split file to filter samples by");
    run->add_option("--subset", run_args.subset, "Which split side to run: train|test");
    run->add_flag("--dry-run", run_args.dry_run, "Print the grid without executing");
    run->add_flag("--include-memory-only", run_args.include_memory_only,
                  "Also run pcn=0 no-context cells for context paths");
    run->callback([&] { rc = cli::command_run(run_args, std::cout, std::cerr); });

    // --- judge ---
    cli::JudgeArgs judge_args;
    auto* judge = app.add_subcommand("judge", "Grade every record with the judge model");
    judge->add_option("--run-dir", judge_args.run_dir, "Run directory")->required();
    judge->add_option("--profile", judge_args.profile_path, "Profile config file")->required();
    judge->add_option("--judge-profile", judge_args.judge_role,
                      "Provider role to judge with (default judge)");
    judge->add_option("--corpus", judge_args.corpus_override,
                      "Corpus override (default: the run's recorded corpus)");
    judge->add_option("--parallelism", judge_args.parallelism, "Concurrent judge calls");
    judge->add_flag("--allow-self-serving", judge_args.allow_self_serving,
                    "Permit judge and revisor to be the same provider");
    judge->callback([&] { rc = cli::command_judge(judge_args, std::cout, std::cerr); });

    // --- report ---
    cli::ReportArgs report_args;
    auto* report = app.add_subcommand("report", "Aggregate judgments into accuracy tables");
    report->add_option("--run-dir", report_args.run_dir, "Run directory")->required();
    report->add_option("--format", report_args.format, "Output format: md|csv");
    report->add_option("--out", report_args.out_path,
                       "Output file (default <run-dir>/report.<format>)");
    report->callback([&] { rc = cli::command_report(report_args, std::cout, std::cerr); });

    // --- build-sft ---
    cli::BuildArgs sft_args;
    sft_args.out_path = "sft.json";
    auto* build_sft = app.add_subcommand("build-sft", "Emit the instruction-tuning dataset");
    build_sft->add_option("--run-dir", sft_args.run_dir, "Run directory")->required();
    build_sft->add_option("--out", sft_args.out_path, "Output file (default sft.json)");
    build_sft->add_option("--profile", sft_args.profile_path,
                          "Profile config file (needed unless --skip-revision)");
    build_sft->add_option("--revisor-profile", sft_args.revisor_role,
                          "Provider role to revise with (default revisor)");
    build_sft->add_option("--corpus", sft_args.corpus_override,
                          "Corpus override (default: the run's recorded corpus)");
    build_sft->add_option("--min-source-model", sft_args.min_source_model,
                          "Keep only responses generated by this model");
    build_sft->add_flag("--one-per-cell", sft_args.one_per_cell,
                        "Emit only the best-scoring eligible path per cell");
    build_sft->add_flag("--skip-revision", sft_args.skip_revision,
                        "Use raw responses without the revisor pass");
    build_sft->add_flag("--allow-self-serving", sft_args.allow_self_serving,
                        "Permit judge and revisor to be the same provider");
    build_sft->callback([&] { rc = cli::command_build_sft(sft_args, std::cout, std::cerr); });

    // --- build-pref ---
    cli::BuildArgs pref_args;
    pref_args.out_path = "pref.json";
    auto* build_pref = app.add_subcommand("build-pref", "Emit the preference-pair dataset");
    build_pref->add_option("--run-dir", pref_args.run_dir, "Run directory")->required();
    build_pref->add_option("--out", pref_args.out_path, "Output file (default pref.json)");
    build_pref->add_option("--profile", pref_args.profile_path,
                           "Profile config file (needed unless --skip-revision)");
    build_pref->add_option("--revisor-profile", pref_args.revisor_role,
                           "Provider role to revise with (default revisor)");
    build_pref->add_option("--corpus", pref_args.corpus_override,
                           "Corpus override (default: the run's recorded corpus)");
    build_pref->add_option("--min-source-model", pref_args.min_source_model,
                           "Keep only responses generated by this model");
    build_pref->add_flag("--one-per-cell", pref_args.one_per_cell,
                         "Keep only the best-scoring eligible path per cell");
    build_pref->add_flag("--skip-revision", pref_args.skip_revision,
                         "Use raw responses without the revisor pass");
    build_pref->add_flag("--allow-self-serving", pref_args.allow_self_serving,
                         "Permit judge and revisor to be the same provider");
    build_pref->callback(
        [&] { rc = cli::command_build_pref(pref_args, std::cout, std::cerr); });

    // --- dump-templates ---
    auto* dump = app.add_subcommand("dump-templates", "Print every prompt template verbatim");
    dump->callback([&] { rc = cli::command_dump_templates(std::cout); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return cli::kExitValidation;
    }
    return rc;
}
