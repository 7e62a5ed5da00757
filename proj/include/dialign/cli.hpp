#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <unordered_set>
#include <vector>

#include "dialign/corpus.hpp"
#include "dialign/datasetgen.hpp"
#include "dialign/errors.hpp"
#include "dialign/judge.hpp"
#include "dialign/profile.hpp"
#include "dialign/prompt_paths.hpp"
#include "dialign/provider.hpp"
#include "dialign/runner.hpp"
#include "dialign/templates.hpp"

namespace dialign::cli {

// Exit-code contract: 0 success, 1 validation/config, 2 I/O, 3 upstream
// provider trouble.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitIo = 2;
inline constexpr int kExitUpstream = 3;

inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const AuthError*>(&e) || dynamic_cast<const RateLimited*>(&e) ||
        dynamic_cast<const UpstreamError*>(&e) || dynamic_cast<const TimeoutError*>(&e) ||
        dynamic_cast<const TranscriptTooLong*>(&e))
        return kExitUpstream;
    if (dynamic_cast<const PersistenceError*>(&e)) return kExitIo;
    if (dynamic_cast<const Error*>(&e)) return kExitValidation;
    return kExitIo;  // filesystem and other unexpected failures
}

/// Runs a command body, translating errors into the exit-code contract.
template <typename Fn>
inline int guard(std::ostream& err, Fn&& fn) {
    try {
        return fn();
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
}

// ============================================================================
// Run metadata
// ============================================================================

struct RunMeta {
    std::string corpus_path;
    std::string generator_role;
    std::string model;
    std::vector<double> temps;
    std::vector<PathKind> paths;
    int pcn_max = 5;
    bool include_memory_only = false;
};

inline void write_run_meta(const RunMeta& meta, const std::string& run_dir) {
    nlohmann::ordered_json j;
    j["corpus"] = meta.corpus_path;
    j["generator_role"] = meta.generator_role;
    j["model"] = meta.model;
    j["temps"] = nlohmann::ordered_json::array();
    for (double t : meta.temps) j["temps"].push_back(format_temp(t));
    j["paths"] = nlohmann::ordered_json::array();
    for (PathKind p : meta.paths) j["paths"].push_back(std::string(path_kind_str(p)));
    j["pcn_max"] = meta.pcn_max;
    j["include_memory_only"] = meta.include_memory_only;
    std::ofstream out(std::filesystem::path(run_dir) / "run_meta.json",
                      std::ios::binary | std::ios::trunc);
    if (!out) throw PersistenceError("cannot write run_meta.json in " + run_dir);
    out << j.dump(2) << "\n";
}

/// corpus path for a downstream stage: explicit override, else whatever the
/// run recorded.
inline std::string resolve_corpus_path(const std::string& run_dir,
                                       const std::string& override_path) {
    if (!override_path.empty()) return override_path;
    const auto meta_path = std::filesystem::path(run_dir) / "run_meta.json";
    std::ifstream in(meta_path, std::ios::binary);
    if (!in)
        throw ConfigError("no run_meta.json in " + run_dir +
                          " and no --corpus override given");
    nlohmann::ordered_json j;
    try {
        j = nlohmann::ordered_json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw PersistenceError("corrupt run_meta.json in " + run_dir + ": " + e.what());
    }
    if (!j.contains("corpus") || !j["corpus"].is_string())
        throw PersistenceError("run_meta.json in " + run_dir + " has no corpus path");
    return j["corpus"].get<std::string>();
}

inline std::vector<GenerationRecord> load_run_records(const std::string& run_dir) {
    std::vector<GenerationRecord> records = load_records(run_dir);
    if (records.empty())
        throw PersistenceError("run directory has no records: " + run_dir);
    return records;
}

// ============================================================================
// validate
// ============================================================================

struct ValidateArgs {
    std::string corpus;
};

inline int command_validate(const ValidateArgs& args, std::ostream& out, std::ostream& err) {
    return guard(err, [&] {
        CorpusValidation v = validate_corpus(args.corpus);
        if (v.issues.empty()) {
            out << v.samples.size() << " samples OK\n";
            return kExitOk;
        }
        for (const auto& issue : v.issues)
            err << "record " << issue.record_index << " (id '" << issue.sample_id
                << "'): " << issue.invariant << " — " << issue.detail << "\n";
        err << v.issues.size() << " violation(s) in " << v.samples.size() << " samples\n";
        return kExitValidation;
    });
}

// ============================================================================
// split
// ============================================================================

struct SplitArgs {
    std::string corpus;
    size_t n_train = 300;
    size_t n_test = 300;
    int64_t seed = 7;
    std::string out_path = "split.json";
    bool per_dataset = false;  // draw n_train/n_test within every dataset tag
};

inline int command_split(const SplitArgs& args, std::ostream& out, std::ostream& err) {
    return guard(err, [&] {
        std::vector<ConflictSample> corpus = load_corpus(args.corpus);

        CorpusSplit split;
        split.seed = args.seed;
        if (args.per_dataset) {
            std::map<std::string, std::vector<ConflictSample>> groups;
            for (const auto& s : corpus) groups[s.dataset_tag.str()].push_back(s);
            for (const auto& [tag, group] : groups) {
                // Per-group seed derived from the shared seed and the tag,
                // so adding a dataset never reshuffles the others.
                const int64_t seed = static_cast<int64_t>(
                    fnv1a64(tag) ^ static_cast<uint64_t>(args.seed));
                CorpusSplit part = split_disjoint(group, args.n_train, args.n_test, seed);
                split.train_ids.insert(split.train_ids.end(), part.train_ids.begin(),
                                       part.train_ids.end());
                split.test_ids.insert(split.test_ids.end(), part.test_ids.begin(),
                                      part.test_ids.end());
            }
        } else {
            split = split_disjoint(corpus, args.n_train, args.n_test, args.seed);
        }

        nlohmann::ordered_json j;
        j["seed"] = args.seed;
        j["per_dataset"] = args.per_dataset;
        j["train_ids"] = split.train_ids;
        j["test_ids"] = split.test_ids;
        std::ofstream file(args.out_path, std::ios::binary | std::ios::trunc);
        if (!file) throw PersistenceError("cannot write " + args.out_path);
        file << j.dump(2) << "\n";

        out << split.train_ids.size() << " train / " << split.test_ids.size() << " test -> "
            << args.out_path << "\n";
        return kExitOk;
    });
}

/// Reads one id list ("train" or "test") out of a split file.
inline std::unordered_set<std::string> load_split_ids(const std::string& path,
                                                      const std::string& subset) {
    if (subset != "train" && subset != "test")
        throw ConfigError("subset must be 'train' or 'test', got '" + subset + "'");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PersistenceError("cannot open split file: " + path);
    nlohmann::ordered_json j;
    try {
        j = nlohmann::ordered_json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw MalformedDocument("split file parse failure in " + path + ": " + e.what());
    }
    const std::string key = subset + "_ids";
    if (!j.contains(key) || !j[key].is_array())
        throw MalformedDocument("split file has no " + key + " array: " + path);
    std::unordered_set<std::string> ids;
    for (const auto& id : j[key]) ids.insert(id.get<std::string>());
    return ids;
}

// ============================================================================
// run
// ============================================================================

struct RunArgs {
    std::string profile_path;
    std::string corpus;
    std::string run_dir;              // empty = <run_root>/<corpus-stem>_<model>
    std::vector<double> temps;        // empty = profile default
    std::vector<std::string> paths;   // empty = profile default
    int pcn_max = 0;                  // 0 = profile default
    int parallelism = 0;              // 0 = profile default
    std::string generator_role = "generator";
    std::string split_path;           // optional id filter
    std::string subset;               // train|test, with split_path
    bool dry_run = false;
    bool include_memory_only = false;
};

inline int command_run(const RunArgs& args, std::ostream& out, std::ostream& err) {
    return guard(err, [&] {
        Profile profile = load_profile(args.profile_path);
        const ProviderConfig& gen_cfg = profile.provider(args.generator_role);

        std::vector<double> temps = args.temps.empty() ? profile.temps : args.temps;
        std::vector<PathKind> paths = profile.paths;
        if (!args.paths.empty()) {
            paths.clear();
            for (const auto& p : args.paths) paths.push_back(parse_path_kind(p));
        }

        std::vector<ConflictSample> samples = load_corpus(args.corpus);
        if (!args.split_path.empty()) {
            auto keep = load_split_ids(args.split_path, args.subset);
            std::erase_if(samples,
                          [&](const ConflictSample& s) { return !keep.count(s.id); });
        }
        if (samples.empty()) throw InsufficientSamples("no samples selected to run");

        GridOptions grid;
        grid.pcn_max = args.pcn_max > 0 ? args.pcn_max : profile.pcn_max;
        grid.include_memory_only = args.include_memory_only;
        grid.model_role = gen_cfg.model_name;
        std::vector<TrialConfig> trials = enumerate_grid(samples, temps, paths, grid);

        if (args.dry_run) {
            out << "trial_id          sample                path     pcn fc ro temp\n";
            for (const auto& t : trials) {
                char line[256];
                std::snprintf(line, sizeof(line), "%s  %-20s  %-7s  %3d  %c  %c %s\n",
                              t.trial_id.c_str(), t.sample_id.c_str(),
                              std::string(path_kind_str(t.path)).c_str(),
                              t.arrangement.pcn, t.arrangement.include_factual ? 'y' : 'n',
                              t.arrangement.reorder ? 'y' : 'n',
                              format_temp(t.temperature).c_str());
                out << line;
            }
            out << trials.size() << " trials (dry run, nothing executed)\n";
            return kExitOk;
        }

        std::string run_dir = args.run_dir;
        if (run_dir.empty()) {
            const std::string stem = std::filesystem::path(args.corpus).stem().string();
            run_dir = profile.run_root + "/" + sanitize_token(stem) + "_" +
                      sanitize_token(gen_cfg.model_name);
        }

        auto generator = make_provider(gen_cfg, args.generator_role);
        RunOptions run_opts;
        run_opts.parallelism =
            args.parallelism > 0 ? static_cast<size_t>(args.parallelism) : profile.parallelism;
        RunSummary summary = run_grid(trials, *generator, CorpusIndex(samples), run_dir,
                                      run_opts);

        RunMeta meta{args.corpus, args.generator_role, gen_cfg.model_name,
                     temps,       paths,               grid.pcn_max,
                     grid.include_memory_only};
        write_run_meta(meta, run_dir);

        out << "completed " << summary.completed << ", failed " << summary.failed
            << ", skipped " << summary.skipped << " -> " << run_dir << "\n";
        return kExitOk;
    });
}

// ============================================================================
// judge
// ============================================================================

struct JudgeArgs {
    std::string run_dir;
    std::string profile_path;
    std::string judge_role = "judge";
    std::string corpus_override;
    bool allow_self_serving = false;
    int parallelism = 0;
};

inline int command_judge(const JudgeArgs& args, std::ostream& out, std::ostream& err) {
    return guard(err, [&] {
        Profile profile = load_profile(args.profile_path);
        check_distinct_judge_revisor(profile, args.allow_self_serving);

        std::vector<GenerationRecord> records = load_run_records(args.run_dir);
        CorpusIndex corpus(
            load_corpus(resolve_corpus_path(args.run_dir, args.corpus_override)));

        auto judge = make_provider(profile.provider(args.judge_role), args.judge_role);
        const size_t parallelism =
            args.parallelism > 0 ? static_cast<size_t>(args.parallelism) : profile.parallelism;
        std::vector<Judgment> judgments = judge_records(records, corpus, *judge, parallelism);
        save_judgments(judgments, args.run_dir);

        size_t correct = 0;
        size_t incorrect = 0;
        size_t unparseable = 0;
        for (const auto& j : judgments) {
            if (j.verdict == Verdict::Correct) ++correct;
            else if (j.verdict == Verdict::Incorrect) ++incorrect;
            else ++unparseable;
        }
        out << judgments.size() << " judged: " << correct << " correct, " << incorrect
            << " incorrect, " << unparseable << " unparseable\n";
        return kExitOk;
    });
}

// ============================================================================
// report
// ============================================================================

struct ReportArgs {
    std::string run_dir;
    std::string format = "md";  // md | csv
    std::string out_path;       // empty = <run_dir>/report.<format>
};

inline int command_report(const ReportArgs& args, std::ostream& out, std::ostream& err) {
    return guard(err, [&] {
        if (args.format != "md" && args.format != "csv")
            throw ConfigError("format must be 'md' or 'csv', got '" + args.format + "'");
        std::vector<GenerationRecord> records = load_run_records(args.run_dir);
        std::vector<Judgment> judgments = load_judgments(args.run_dir);
        AccuracyReport report = aggregate(judgments, index_trials(records));

        const std::string text =
            args.format == "csv" ? emit_csv(report) : emit_markdown(report);
        const std::string out_path =
            args.out_path.empty()
                ? (std::filesystem::path(args.run_dir) / ("report." + args.format)).string()
                : args.out_path;
        std::ofstream file(out_path, std::ios::binary | std::ios::trunc);
        if (!file) throw PersistenceError("cannot write " + out_path);
        file << text;

        out << text;
        return kExitOk;
    });
}

// ============================================================================
// build-sft / build-pref
// ============================================================================

struct BuildArgs {
    std::string run_dir;
    std::string out_path;  // sft.json / pref.json by default at call site
    std::string profile_path;
    std::string revisor_role = "revisor";
    std::string corpus_override;
    bool one_per_cell = false;
    std::string min_source_model;
    bool skip_revision = false;
    bool allow_self_serving = false;
};

namespace detail {

struct BuildInputs {
    std::vector<GenerationRecord> records;
    std::vector<Judgment> judgments;
    CorpusIndex corpus;
    std::unique_ptr<Provider> revisor;  // null when revision is skipped
};

inline BuildInputs gather_build_inputs(const BuildArgs& args) {
    BuildInputs in;
    in.records = load_run_records(args.run_dir);
    in.judgments = load_judgments(args.run_dir);
    in.corpus =
        CorpusIndex(load_corpus(resolve_corpus_path(args.run_dir, args.corpus_override)));
    if (!args.skip_revision) {
        Profile profile = load_profile(args.profile_path);
        check_distinct_judge_revisor(profile, args.allow_self_serving);
        in.revisor = make_provider(profile.provider(args.revisor_role), args.revisor_role);
    }
    return in;
}

inline DatasetOptions dataset_options(const BuildArgs& args) {
    DatasetOptions opts;
    opts.one_per_cell = args.one_per_cell;
    opts.min_source_model = args.min_source_model;
    opts.skip_revision = args.skip_revision;
    return opts;
}

}  // namespace detail

inline int command_build_sft(const BuildArgs& args, std::ostream& out, std::ostream& err) {
    return guard(err, [&] {
        detail::BuildInputs in = detail::gather_build_inputs(args);
        SftBuild build = build_sft(in.records, in.judgments, in.corpus, in.revisor.get(),
                                   detail::dataset_options(args));
        save_sft(build.examples, args.out_path);
        save_stats(build.stats.to_json(), args.out_path);
        if (build.stats.conclusion_drift > 0)
            err << "warning: " << build.stats.conclusion_drift
                << " revision(s) dropped the correct answer (see stats)\n";
        out << build.examples.size() << " examples -> " << args.out_path << " ("
            << build.stats.cells_emitted << "/" << build.stats.cells_seen << " cells)\n";
        return kExitOk;
    });
}

inline int command_build_pref(const BuildArgs& args, std::ostream& out, std::ostream& err) {
    return guard(err, [&] {
        detail::BuildInputs in = detail::gather_build_inputs(args);
        PrefBuild build = build_preferences(in.records, in.judgments, in.corpus,
                                            in.revisor.get(), detail::dataset_options(args));
        save_preferences(build.pairs, args.out_path);
        save_stats(build.stats.to_json(), args.out_path);
        if (build.stats.pairs_suppressed_equal > 0)
            err << "warning: " << build.stats.pairs_suppressed_equal
                << " pair(s) suppressed because chosen == rejected\n";
        out << build.pairs.size() << " pairs -> " << args.out_path << " ("
            << build.stats.cells_emitted << "/" << build.stats.cells_seen << " cells)\n";
        return kExitOk;
    });
}

// ============================================================================
// dump-templates
// ============================================================================

inline int command_dump_templates(std::ostream& out) {
    for (const auto& t : templates::all_templates())
        out << "=== " << t.name << " ===\n" << t.text << "\n\n";
    return kExitOk;
}

}  // namespace dialign::cli
