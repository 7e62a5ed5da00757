#pragma once

#include <fstream>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "dialign/corpus.hpp"
#include "dialign/errors.hpp"
#include "dialign/judge.hpp"
#include "dialign/provider.hpp"
#include "dialign/runner.hpp"

namespace dialign {

// ============================================================================
// Path selection
// ============================================================================

/// Which responses a cell contributes to the training data: the four paths
/// that never elicit prior knowledge, or CoT-PK alone.
enum class PathPool { NoPriorKnowledgePool, CoTPKOnly };

inline std::string_view path_pool_str(PathPool p) {
    return p == PathPool::NoPriorKnowledgePool ? "NoPriorKnowledgePool" : "CoTPKOnly";
}

/// The selection rule over the cell grid: the two easiest cells — factual
/// contexts present with at most one poisoned context — draw from the
/// no-prior-knowledge paths; every harder cell keeps only CoT-PK responses.
/// The no-context cell is not a training cell at all.
inline PathPool select_pool(int pcn, bool include_factual) {
    if (pcn < 0 || pcn > 5)
        throw InvalidArrangement("pcn must be in 0..5, got " + std::to_string(pcn));
    if (pcn == 0 && !include_factual)
        throw MemoryOnlyCell("cell (pcn=0, no factual contexts) has no selection pool");
    if (include_factual && pcn <= 1) return PathPool::NoPriorKnowledgePool;
    return PathPool::CoTPKOnly;
}

inline bool pool_contains(PathPool pool, PathKind path) {
    if (pool == PathPool::CoTPKOnly) return path == PathKind::CoTPK;
    return path == PathKind::Base || path == PathKind::Tips || path == PathKind::BaseCoT ||
           path == PathKind::CoTNoPK;
}

// ============================================================================
// Revision
// ============================================================================

struct RevisionOutcome {
    std::string text;
    /// Set when the revised text no longer contains the correct answer
    /// (case-insensitive) — the rewrite may have changed the conclusion.
    bool conclusion_drift = false;
};

/// Rewrites a step-wise answer into natural prose via the revisor model.
/// The conclusion must survive; drift is flagged, not fatal.
inline RevisionOutcome revise(const GenerationRecord& record, Provider& revisor,
                              const std::string& correct_answer) {
    if (trim(record.final_answer).empty())
        throw EmptyField("revision of an empty answer (trial " + record.trial.trial_id + ")");
    PromptTranscript prompt;
    prompt.placeholders_resolved = true;
    prompt.turns.push_back({Role::User, substitute(templates::kRevision,
                                                   {{"answer", record.final_answer}})});
    CompletionResult res = revisor.complete(prompt, {record.trial.trial_id, 0});
    RevisionOutcome out;
    out.text = res.text;
    out.conclusion_drift = !icontains(res.text, correct_answer);
    return out;
}

// ============================================================================
// Dataset types
// ============================================================================

struct SftExample {
    std::string instruction;  // Base-path rendering of the cell
    std::string output;       // revised response
    std::string source_trial_id;
};

struct PreferencePair {
    std::string instruction;  // Base-path rendering of the cell
    std::string chosen;       // revised response judged Correct
    std::string rejected;     // raw Base-path response judged Incorrect
    std::string chosen_trial_id;
    std::string rejected_trial_id;
};

struct DatasetOptions {
    /// Emit only the best-scoring eligible path per cell instead of all of
    /// them (ranked by that path's overall accuracy in this run, ties going
    /// to the more elaborate path).
    bool one_per_cell = false;
    /// Keep only responses from this generator (source-model filter).
    std::string min_source_model;
    /// Use raw responses verbatim instead of calling the revisor.
    bool skip_revision = false;
};

struct SftStats {
    size_t cells_seen = 0;
    size_t cells_emitted = 0;
    size_t cells_no_correct = 0;
    size_t examples = 0;
    size_t duplicates_removed = 0;
    size_t conclusion_drift = 0;
    size_t refusal_outputs = 0;
    std::vector<std::string> drift_trial_ids;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["cells_seen"] = cells_seen;
        j["cells_emitted"] = cells_emitted;
        j["cells_no_correct"] = cells_no_correct;
        j["examples"] = examples;
        j["duplicates_removed"] = duplicates_removed;
        j["conclusion_drift"] = conclusion_drift;
        j["refusal_outputs"] = refusal_outputs;
        j["drift_trial_ids"] = drift_trial_ids;
        return j;
    }
};

struct PrefStats {
    size_t cells_seen = 0;
    size_t cells_emitted = 0;
    size_t cells_missing_chosen = 0;
    size_t cells_missing_rejected = 0;
    size_t pairs = 0;
    size_t pairs_suppressed_equal = 0;
    size_t conclusion_drift = 0;
    std::vector<std::string> drift_trial_ids;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["cells_seen"] = cells_seen;
        j["cells_emitted"] = cells_emitted;
        j["cells_missing_chosen"] = cells_missing_chosen;
        j["cells_missing_rejected"] = cells_missing_rejected;
        j["pairs"] = pairs;
        j["pairs_suppressed_equal"] = pairs_suppressed_equal;
        j["conclusion_drift"] = conclusion_drift;
        j["drift_trial_ids"] = drift_trial_ids;
        return j;
    }
};

// ============================================================================
// Cell machinery
// ============================================================================

namespace detail {

// Cell identity: one (model, sample, temperature, arrangement) point of the
// grid. Ordered so dataset assembly is a deterministic fold.
using CellKey = std::tuple<std::string, std::string, std::string, int, int, int>;

inline CellKey cell_key(const TrialConfig& t) {
    return {t.model_role,        t.sample_id,
            format_temp(t.temperature), t.arrangement.pcn,
            t.arrangement.include_factual ? 1 : 0, t.arrangement.reorder ? 1 : 0};
}

/// Verifies the judge stage covered every record, then indexes verdicts.
inline std::unordered_map<std::string, const Judgment*> judgment_index(
    const std::vector<GenerationRecord>& records, const std::vector<Judgment>& judgments) {
    std::unordered_map<std::string, const Judgment*> by_id;
    for (const auto& j : judgments) by_id.emplace(j.trial_id, &j);
    for (const auto& r : records) {
        if (!by_id.count(r.trial.trial_id))
            throw MissingJudgments("record " + r.trial.trial_id +
                                   " has no judgment — run the judge stage first");
    }
    return by_id;
}

/// Overall accuracy per (model, path) across the run; the one-per-cell
/// tie-break ranks eligible paths by it.
inline std::map<std::pair<std::string, PathKind>, double> path_accuracy(
    const std::vector<GenerationRecord>& records,
    const std::unordered_map<std::string, const Judgment*>& by_id) {
    std::map<std::pair<std::string, PathKind>, std::pair<size_t, size_t>> counts;
    for (const auto& r : records) {
        auto& [correct, total] = counts[{r.trial.model_role, r.trial.path}];
        ++total;
        if (by_id.at(r.trial.trial_id)->verdict == Verdict::Correct) ++correct;
    }
    std::map<std::pair<std::string, PathKind>, double> acc;
    for (const auto& [key, ct] : counts)
        acc[key] = ct.second == 0 ? 0.0
                                  : static_cast<double>(ct.first) /
                                        static_cast<double>(ct.second);
    return acc;
}

/// The instruction every training example uses: the plainest path's
/// rendering of the very contexts the source trial saw.
inline std::string base_instruction(const ConflictSample& sample,
                                    const ContextArrangement& arr) {
    return render(PathKind::Base, sample, arr).turns.front().text;
}

struct CellPlan {
    std::map<CellKey, std::vector<const GenerationRecord*>> cells;
    size_t memory_only_skipped = 0;
};

/// Groups records into grid cells, dropping the cells that have no
/// selection pool (DG and the flag-gated memory-only cells).
inline CellPlan plan_cells(const std::vector<GenerationRecord>& records,
                           const DatasetOptions& opts) {
    CellPlan plan;
    for (const auto& r : records) {
        if (!opts.min_source_model.empty() && r.trial.model_role != opts.min_source_model)
            continue;
        if (r.trial.arrangement.pcn == 0 && !r.trial.arrangement.include_factual) {
            ++plan.memory_only_skipped;
            continue;
        }
        plan.cells[cell_key(r.trial)].push_back(&r);
    }
    // Stable order inside a cell: plainest path first, trial_id as the
    // final tie-break.
    for (auto& [key, recs] : plan.cells) {
        std::sort(recs.begin(), recs.end(),
                  [](const GenerationRecord* a, const GenerationRecord* b) {
                      if (a->trial.path != b->trial.path)
                          return static_cast<int>(a->trial.path) <
                                 static_cast<int>(b->trial.path);
                      return a->trial.trial_id < b->trial.trial_id;
                  });
    }
    return plan;
}

/// Correct-judged, non-failed records whose path the cell's pool accepts.
inline std::vector<const GenerationRecord*> eligible_records(
    const std::vector<const GenerationRecord*>& cell_records, PathPool pool,
    const std::unordered_map<std::string, const Judgment*>& by_id) {
    std::vector<const GenerationRecord*> out;
    for (const GenerationRecord* r : cell_records) {
        if (!r->error.empty()) continue;
        if (!pool_contains(pool, r->trial.path)) continue;
        if (by_id.at(r->trial.trial_id)->verdict != Verdict::Correct) continue;
        if (trim(r->final_answer).empty()) continue;
        out.push_back(r);
    }
    return out;
}

inline void apply_one_per_cell(
    std::vector<const GenerationRecord*>& eligible,
    const std::map<std::pair<std::string, PathKind>, double>& path_acc) {
    if (eligible.size() <= 1) return;
    const GenerationRecord* best = eligible.front();
    for (const GenerationRecord* r : eligible) {
        const double acc_r = path_acc.at({r->trial.model_role, r->trial.path});
        const double acc_b = path_acc.at({best->trial.model_role, best->trial.path});
        if (acc_r > acc_b ||
            (acc_r == acc_b &&
             static_cast<int>(r->trial.path) > static_cast<int>(best->trial.path)))
            best = r;
    }
    eligible = {best};
}

}  // namespace detail

// ============================================================================
// Builders
// ============================================================================

struct SftBuild {
    std::vector<SftExample> examples;
    SftStats stats;
};

/// Walks every training cell, selects Correct responses per the path rule,
/// revises them, and pairs each with the cell's Base rendering. Duplicate
/// (instruction, output) pairs collapse to their first occurrence.
inline SftBuild build_sft(const std::vector<GenerationRecord>& records,
                          const std::vector<Judgment>& judgments, const CorpusIndex& corpus,
                          Provider* revisor, const DatasetOptions& opts = {}) {
    if (!opts.skip_revision && revisor == nullptr)
        throw ConfigError("build_sft needs a revisor provider unless revision is skipped");

    auto by_id = detail::judgment_index(records, judgments);
    auto path_acc = detail::path_accuracy(records, by_id);
    detail::CellPlan plan = detail::plan_cells(records, opts);

    SftBuild build;
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& [key, cell_records] : plan.cells) {
        ++build.stats.cells_seen;
        const int pcn = std::get<3>(key);
        const bool fc = std::get<4>(key) != 0;
        const PathPool pool = select_pool(pcn, fc);

        std::vector<const GenerationRecord*> eligible =
            detail::eligible_records(cell_records, pool, by_id);
        if (eligible.empty()) {
            ++build.stats.cells_no_correct;
            continue;
        }
        if (opts.one_per_cell) detail::apply_one_per_cell(eligible, path_acc);

        const ConflictSample& sample = corpus.at(std::get<1>(key));
        const std::string instruction =
            detail::base_instruction(sample, eligible.front()->trial.arrangement);

        bool emitted = false;
        for (const GenerationRecord* r : eligible) {
            std::string output;
            if (opts.skip_revision) {
                output = r->final_answer;
            } else {
                RevisionOutcome rev = revise(*r, *revisor, sample.correct_answer);
                if (rev.conclusion_drift) {
                    ++build.stats.conclusion_drift;
                    build.stats.drift_trial_ids.push_back(r->trial.trial_id);
                }
                output = std::move(rev.text);
            }
            if (trim(output).empty()) continue;
            if (is_refusal(output)) ++build.stats.refusal_outputs;
            if (!seen.emplace(instruction, output).second) {
                ++build.stats.duplicates_removed;
                continue;
            }
            build.examples.push_back({instruction, output, r->trial.trial_id});
            emitted = true;
        }
        if (emitted)
            ++build.stats.cells_emitted;
        else
            ++build.stats.cells_no_correct;
    }
    build.stats.examples = build.examples.size();
    return build;
}

struct PrefBuild {
    std::vector<PreferencePair> pairs;
    PrefStats stats;
};

/// Preference construction: in each cell, the revised Correct responses
/// (chosen) pair against that cell's Incorrect Base response (rejected,
/// kept verbatim — it is the poisoned behavior to train away from). Cells
/// lacking either side contribute nothing.
inline PrefBuild build_preferences(const std::vector<GenerationRecord>& records,
                                   const std::vector<Judgment>& judgments,
                                   const CorpusIndex& corpus, Provider* revisor,
                                   const DatasetOptions& opts = {}) {
    if (!opts.skip_revision && revisor == nullptr)
        throw ConfigError("build_preferences needs a revisor provider unless revision is skipped");

    auto by_id = detail::judgment_index(records, judgments);
    auto path_acc = detail::path_accuracy(records, by_id);
    detail::CellPlan plan = detail::plan_cells(records, opts);

    PrefBuild build;
    for (const auto& [key, cell_records] : plan.cells) {
        ++build.stats.cells_seen;
        const int pcn = std::get<3>(key);
        const bool fc = std::get<4>(key) != 0;
        const PathPool pool = select_pool(pcn, fc);

        // The rejected side: this cell's Base response, judged Incorrect.
        const GenerationRecord* rejected = nullptr;
        for (const GenerationRecord* r : cell_records) {
            if (r->trial.path != PathKind::Base) continue;
            if (!r->error.empty() || trim(r->final_answer).empty()) continue;
            if (by_id.at(r->trial.trial_id)->verdict != Verdict::Incorrect) continue;
            rejected = r;
            break;
        }

        std::vector<const GenerationRecord*> eligible =
            detail::eligible_records(cell_records, pool, by_id);
        if (opts.one_per_cell) detail::apply_one_per_cell(eligible, path_acc);

        if (eligible.empty()) {
            ++build.stats.cells_missing_chosen;
            continue;
        }
        if (rejected == nullptr) {
            ++build.stats.cells_missing_rejected;
            continue;
        }

        const ConflictSample& sample = corpus.at(std::get<1>(key));
        const std::string instruction =
            detail::base_instruction(sample, eligible.front()->trial.arrangement);

        bool emitted = false;
        for (const GenerationRecord* r : eligible) {
            std::string chosen;
            if (opts.skip_revision) {
                chosen = r->final_answer;
            } else {
                RevisionOutcome rev = revise(*r, *revisor, sample.correct_answer);
                if (rev.conclusion_drift) {
                    ++build.stats.conclusion_drift;
                    build.stats.drift_trial_ids.push_back(r->trial.trial_id);
                }
                chosen = std::move(rev.text);
            }
            if (trim(chosen).empty()) continue;
            if (chosen == rejected->final_answer) {
                ++build.stats.pairs_suppressed_equal;
                continue;
            }
            build.pairs.push_back({instruction, chosen, rejected->final_answer,
                                   r->trial.trial_id, rejected->trial.trial_id});
            emitted = true;
        }
        if (emitted) ++build.stats.cells_emitted;
    }
    build.stats.pairs = build.pairs.size();
    return build;
}

// ============================================================================
// File emitters
// ============================================================================

inline void save_sft(const std::vector<SftExample>& examples, const std::string& path) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& e : examples)
        arr.push_back({{"instruction", e.instruction}, {"output", e.output}});
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw PersistenceError("cannot write " + path);
    out << arr.dump(2) << "\n";
}

inline void save_preferences(const std::vector<PreferencePair>& pairs,
                             const std::string& path) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& p : pairs)
        arr.push_back(
            {{"instruction", p.instruction}, {"chosen", p.chosen}, {"rejected", p.rejected}});
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw PersistenceError("cannot write " + path);
    out << arr.dump(2) << "\n";
}

inline void save_stats(const nlohmann::ordered_json& stats, const std::string& out_path) {
    std::ofstream out(out_path + ".stats.json", std::ios::binary | std::ios::trunc);
    if (!out) throw PersistenceError("cannot write " + out_path + ".stats.json");
    out << stats.dump(2) << "\n";
}

}  // namespace dialign
