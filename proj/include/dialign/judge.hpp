#pragma once

#include <atomic>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "dialign/corpus.hpp"
#include "dialign/errors.hpp"
#include "dialign/provider.hpp"
#include "dialign/runner.hpp"

namespace dialign {

// ============================================================================
// Judgments
// ============================================================================

enum class Verdict { Correct, Incorrect, Unparseable };

inline std::string_view verdict_str(Verdict v) {
    switch (v) {
        case Verdict::Correct: return "Correct";
        case Verdict::Incorrect: return "Incorrect";
        case Verdict::Unparseable: return "Unparseable";
    }
    return "Unparseable";
}

inline Verdict parse_verdict_name(std::string_view s) {
    if (s == "Correct") return Verdict::Correct;
    if (s == "Incorrect") return Verdict::Incorrect;
    if (s == "Unparseable") return Verdict::Unparseable;
    throw MalformedDocument("unknown verdict: " + std::string(s));
}

struct Judgment {
    std::string trial_id;
    Verdict verdict = Verdict::Unparseable;
    std::string raw_judge_text;
    std::string judge_provider_id;
    bool failed_trial = false;  // source trial errored; scored Incorrect
    bool refusal = false;       // source answer was the refusal sentinel
    std::string error;          // judge-side problem (provider error, empty answer)
};

// ============================================================================
// Judge prompt
// ============================================================================

/// Marking-expert transcript: fixed system turn, user turn with the three
/// fields substituted once (no re-templating of inserted braces).
inline PromptTranscript render_judge_prompt(const std::string& question,
                                            const std::string& correct_answer,
                                            const std::string& student_answer) {
    if (trim(question).empty()) throw EmptyField("judge prompt: empty question");
    if (trim(correct_answer).empty()) throw EmptyField("judge prompt: empty correct answer");
    if (trim(student_answer).empty()) throw EmptyField("judge prompt: empty student answer");
    PromptTranscript t;
    t.placeholders_resolved = true;
    t.turns.push_back({Role::System, std::string(templates::kJudgeSystem)});
    t.turns.push_back({Role::User, substitute(templates::kJudgeUser,
                                              {{"question", question},
                                               {"correct_answer", correct_answer},
                                               {"s_answer", student_answer}})});
    return t;
}

/// Scans for standalone "true"/"false" tokens (case-insensitive, delimited
/// by any non-alphanumeric byte). Exactly one kind present decides the
/// verdict; both kinds, or neither, is Unparseable. Total — never throws.
inline Verdict parse_verdict(std::string_view text) {
    size_t trues = 0;
    size_t falses = 0;
    size_t i = 0;
    while (i < text.size()) {
        if (!std::isalnum(static_cast<unsigned char>(text[i]))) {
            ++i;
            continue;
        }
        size_t begin = i;
        while (i < text.size() && std::isalnum(static_cast<unsigned char>(text[i]))) ++i;
        std::string_view token = text.substr(begin, i - begin);
        if (iequals(token, "true")) ++trues;
        else if (iequals(token, "false")) ++falses;
    }
    if (trues > 0 && falses == 0) return Verdict::Correct;
    if (falses > 0 && trues == 0) return Verdict::Incorrect;
    return Verdict::Unparseable;
}

// ============================================================================
// Judging a run
// ============================================================================

/// One judgment per record. Failed trials are scored Incorrect without a
/// provider call (flagged, so reports can separate them); judge-side
/// problems — an empty answer to grade, a provider failure — fall back to
/// Unparseable with the reason kept, never aborting the batch. Results come
/// back sorted by trial_id regardless of scheduling.
inline std::vector<Judgment> judge_records(const std::vector<GenerationRecord>& records,
                                           const CorpusIndex& corpus, Provider& judge,
                                           size_t parallelism = 4) {
    std::vector<Judgment> out(records.size());

    std::atomic<size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= records.size()) return;
            const GenerationRecord& rec = records[i];
            Judgment& j = out[i];
            j.trial_id = rec.trial.trial_id;
            j.refusal = rec.refusal;
            if (!rec.error.empty()) {
                j.verdict = Verdict::Incorrect;
                j.failed_trial = true;
                continue;
            }
            const ConflictSample& sample = corpus.at(rec.trial.sample_id);
            try {
                PromptTranscript prompt = render_judge_prompt(
                    sample.question, sample.correct_answer, rec.final_answer);
                CompletionResult res = judge.complete(prompt, {rec.trial.trial_id, 0});
                j.raw_judge_text = res.text;
                j.judge_provider_id = res.provider_id;
                j.verdict = parse_verdict(res.text);
            } catch (const EmptyField&) {
                j.verdict = Verdict::Unparseable;
                j.error = "nothing to grade: empty answer";
            } catch (const Error& e) {
                j.verdict = Verdict::Unparseable;
                j.error = e.what();
            }
        }
    };

    const size_t n_threads = std::max<size_t>(1, std::min(parallelism, records.size()));
    std::vector<std::thread> threads;
    threads.reserve(n_threads);
    for (size_t i = 0; i < n_threads; ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();

    std::sort(out.begin(), out.end(),
              [](const Judgment& a, const Judgment& b) { return a.trial_id < b.trial_id; });
    return out;
}

inline nlohmann::ordered_json judgment_to_json(const Judgment& j) {
    nlohmann::ordered_json doc;
    doc["trial_id"] = j.trial_id;
    doc["verdict"] = std::string(verdict_str(j.verdict));
    doc["raw_judge_text"] = j.raw_judge_text;
    doc["judge_provider_id"] = j.judge_provider_id;
    doc["failed_trial"] = j.failed_trial;
    doc["refusal"] = j.refusal;
    if (j.error.empty())
        doc["error"] = nullptr;
    else
        doc["error"] = j.error;
    return doc;
}

inline Judgment judgment_from_json(const nlohmann::ordered_json& doc) {
    try {
        Judgment j;
        j.trial_id = doc.at("trial_id").get<std::string>();
        j.verdict = parse_verdict_name(doc.at("verdict").get<std::string>());
        j.raw_judge_text = doc.at("raw_judge_text").get<std::string>();
        j.judge_provider_id = doc.at("judge_provider_id").get<std::string>();
        j.failed_trial = doc.at("failed_trial").get<bool>();
        j.refusal = doc.at("refusal").get<bool>();
        if (!doc.at("error").is_null()) j.error = doc["error"].get<std::string>();
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw PersistenceError(std::string("judgment deserialization failed: ") + e.what());
    }
}

inline void save_judgments(const std::vector<Judgment>& judgments, const std::string& run_dir) {
    std::vector<const Judgment*> sorted;
    sorted.reserve(judgments.size());
    for (const auto& j : judgments) sorted.push_back(&j);
    std::sort(sorted.begin(), sorted.end(),
              [](const Judgment* a, const Judgment* b) { return a->trial_id < b->trial_id; });
    std::ofstream out(std::filesystem::path(run_dir) / "judgments.jsonl",
                      std::ios::binary | std::ios::trunc);
    if (!out) throw PersistenceError("cannot write judgments.jsonl in " + run_dir);
    for (const Judgment* j : sorted) out << judgment_to_json(*j).dump() << "\n";
}

inline std::vector<Judgment> load_judgments(const std::string& run_dir) {
    const auto path = std::filesystem::path(run_dir) / "judgments.jsonl";
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingJudgments("no judgments.jsonl in " + run_dir +
                                    " — run the judge stage first");
    std::vector<Judgment> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        try {
            out.push_back(judgment_from_json(nlohmann::ordered_json::parse(line)));
        } catch (const nlohmann::json::parse_error&) {
            throw PersistenceError("corrupt judgment at " + path.string() + ":" +
                                   std::to_string(line_no));
        }
    }
    return out;
}

// ============================================================================
// Aggregation
// ============================================================================

/// Column a trial lands in, mirroring the result tables: DG and the
/// knowledge-editing cell (pcn=0 with factual contexts) stand alone; PCA
/// rows split into poisoned-only, +factual, and +reordered columns.
/// "memory" only appears for the flag-gated MemoryOnly cells.
inline std::string cell_label(PathKind path, const ContextArrangement& arr) {
    if (path == PathKind::DG) return "DG";
    if (arr.pcn == 0) return arr.include_factual ? "IKE" : "memory";
    if (arr.include_factual) return arr.reorder ? "+RO" : "+FC";
    return "base";
}

struct GroupKey {
    std::string model;
    std::string temperature;  // canonical text form (format_temp)
    std::string dataset;
    std::string path;
    std::string cell;  // DG | IKE | memory | base | +FC | +RO
    int pcn = 0;       // 0 for DG/IKE/memory rows

    auto tied() const { return std::tie(model, temperature, dataset, path, cell, pcn); }
    bool operator<(const GroupKey& o) const { return tied() < o.tied(); }
    bool operator==(const GroupKey& o) const { return tied() == o.tied(); }
};

struct GroupStats {
    size_t correct = 0;
    size_t total = 0;
    size_t unparseable = 0;

    /// Unparseable verdicts stay in the denominator (scored as incorrect).
    double acc() const { return total == 0 ? 0.0 : 100.0 * static_cast<double>(correct) /
                                                       static_cast<double>(total); }
    bool operator==(const GroupStats&) const = default;
};

struct AccuracyReport {
    std::map<GroupKey, GroupStats> groups;

    bool operator==(const AccuracyReport&) const = default;
};

using TrialsIndex = std::unordered_map<std::string, TrialConfig>;

inline TrialsIndex index_trials(const std::vector<GenerationRecord>& records) {
    TrialsIndex idx;
    for (const auto& r : records) idx.emplace(r.trial.trial_id, r.trial);
    return idx;
}

/// Folds judgments into table cells. Every judgment lands in exactly one
/// group, so group totals always sum to the judgment count.
inline AccuracyReport aggregate(const std::vector<Judgment>& judgments,
                                const TrialsIndex& trials) {
    AccuracyReport report;
    for (const auto& j : judgments) {
        auto it = trials.find(j.trial_id);
        if (it == trials.end())
            throw UnknownTrial("judgment references unknown trial " + j.trial_id);
        const TrialConfig& t = it->second;
        GroupKey key{t.model_role,
                     format_temp(t.temperature),
                     t.dataset_tag.str(),
                     std::string(path_kind_str(t.path)),
                     cell_label(t.path, t.arrangement),
                     t.arrangement.pcn >= 1 ? t.arrangement.pcn : 0};
        GroupStats& stats = report.groups[key];
        ++stats.total;
        if (j.verdict == Verdict::Correct) ++stats.correct;
        if (j.verdict == Verdict::Unparseable) ++stats.unparseable;
    }
    return report;
}

// ============================================================================
// Report emitters
// ============================================================================

namespace detail {

inline std::string csv_escape(const std::string& field) {
    if (field.find_first_of(",\"\n") == std::string::npos) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

inline std::string format_acc(double acc) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", acc);
    return buf;
}

}  // namespace detail

/// One row per group; groups with zero trials simply have no row.
inline std::string emit_csv(const AccuracyReport& report) {
    std::string out = "model,temperature,dataset,path,cell,pcn,correct,total,unparseable,acc\n";
    for (const auto& [key, stats] : report.groups) {
        out += detail::csv_escape(key.model) + ",";
        out += key.temperature + ",";
        out += detail::csv_escape(key.dataset) + ",";
        out += key.path + ",";
        out += key.cell + ",";
        out += std::to_string(key.pcn) + ",";
        out += std::to_string(stats.correct) + ",";
        out += std::to_string(stats.total) + ",";
        out += std::to_string(stats.unparseable) + ",";
        out += detail::format_acc(stats.acc()) + "\n";
    }
    return out;
}

namespace detail {

inline std::vector<std::string> split_csv_row(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    fields.push_back(std::move(cur));
    return fields;
}

}  // namespace detail

/// Inverse of emit_csv (accuracy is recomputed from the counts).
inline AccuracyReport parse_csv(const std::string& text) {
    AccuracyReport report;
    std::istringstream in(text);
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        if (header) {
            header = false;
            continue;
        }
        auto fields = detail::split_csv_row(line);
        if (fields.size() != 10)
            throw MalformedDocument("report row needs 10 fields, got " +
                                    std::to_string(fields.size()));
        GroupKey key{fields[0], fields[1], fields[2], fields[3], fields[4],
                     std::stoi(fields[5])};
        GroupStats stats;
        stats.correct = static_cast<size_t>(std::stoull(fields[6]));
        stats.total = static_cast<size_t>(std::stoull(fields[7]));
        stats.unparseable = static_cast<size_t>(std::stoull(fields[8]));
        report.groups.emplace(key, stats);
    }
    return report;
}

namespace detail {

inline std::string md_cell(const AccuracyReport& report, const GroupKey& key) {
    auto it = report.groups.find(key);
    if (it == report.groups.end()) return "—";
    const GroupStats& s = it->second;
    std::string out = format_acc(s.acc()) + "% (" + std::to_string(s.correct) + "/" +
                      std::to_string(s.total);
    if (s.unparseable > 0) out += ", u:" + std::to_string(s.unparseable);
    out += ")";
    return out;
}

}  // namespace detail

/// Human-readable twin of the CSV: per (model, temperature, dataset), a
/// direct-generation line, then one table per context path with PCN rows
/// and poisoned-only / +FC / +RO columns, the knowledge-editing cell on its
/// own line above each table.
inline std::string emit_markdown(const AccuracyReport& report) {
    // Collect section keys and the paths/pcns present in each.
    std::map<std::tuple<std::string, std::string, std::string>,
             std::map<std::string, std::set<int>>>
        sections;  // (model,temp,dataset) -> path -> pcns seen
    for (const auto& [key, stats] : report.groups)
        sections[{key.model, key.temperature, key.dataset}][key.path].insert(key.pcn);

    std::string out = "# Accuracy report\n";
    for (const auto& [sec, paths] : sections) {
        const auto& [model, temp, dataset] = sec;
        out += "\n## " + model + " | T=" + temp + " | " + dataset + "\n";

        auto find_cell = [&](const std::string& path, const std::string& cell, int pcn) {
            return detail::md_cell(report, GroupKey{model, temp, dataset, path, cell, pcn});
        };

        if (paths.count("DG"))
            out += "\nDirect generate: " + find_cell("DG", "DG", 0) + "\n";

        for (PathKind p : all_path_kinds()) {
            const std::string path(path_kind_str(p));
            if (p == PathKind::DG || !paths.count(path)) continue;
            out += "\n### " + path + "\n";
            const std::string ike = find_cell(path, "IKE", 0);
            if (ike != "—") out += "\nIKE (pcn=0, factual only): " + ike + "\n";
            const std::string memory = find_cell(path, "memory", 0);
            if (memory != "—") out += "\nMemory only (pcn=0, no contexts): " + memory + "\n";

            int max_pcn = 0;
            for (int pcn : paths.at(path)) max_pcn = std::max(max_pcn, pcn);
            if (max_pcn >= 1) {
                out += "\n| PCN | base | +FC | +RO |\n|---:|---|---|---|\n";
                for (int pcn = 1; pcn <= max_pcn; ++pcn) {
                    out += "| " + std::to_string(pcn) + " | " +
                           find_cell(path, "base", pcn) + " | " +
                           find_cell(path, "+FC", pcn) + " | " +
                           find_cell(path, "+RO", pcn) + " |\n";
                }
            }
        }
    }
    return out;
}

}  // namespace dialign
