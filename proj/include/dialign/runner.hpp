#pragma once

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "dialign/corpus.hpp"
#include "dialign/errors.hpp"
#include "dialign/prompt_paths.hpp"
#include "dialign/provider.hpp"

namespace dialign {

inline constexpr int kRecordSchemaVersion = 1;

// ============================================================================
// Task classification
// ============================================================================

/// Where a cell sits in the unified framework: no contexts at all, factual
/// contexts only (knowledge editing), poisoned only, or both kinds in
/// conflict.
enum class TaskClass { MemoryOnly, IKE, PcaNoFact, PcaMixed };

inline TaskClass classify_task(int pcn, bool include_factual) {
    if (pcn == 0) return include_factual ? TaskClass::IKE : TaskClass::MemoryOnly;
    return include_factual ? TaskClass::PcaMixed : TaskClass::PcaNoFact;
}

inline std::string_view task_class_str(TaskClass t) {
    switch (t) {
        case TaskClass::MemoryOnly: return "MemoryOnly";
        case TaskClass::IKE: return "IKE";
        case TaskClass::PcaNoFact: return "PcaNoFact";
        case TaskClass::PcaMixed: return "PcaMixed";
    }
    return "MemoryOnly";
}

// ============================================================================
// Trials
// ============================================================================

/// Canonical text form of a temperature: fixed 6-decimal rendering with
/// trailing zeros stripped, so 0.1 is "0.1" everywhere a key or file name
/// needs it.
inline std::string format_temp(double t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", t);
    std::string s(buf);
    while (!s.empty() && s.back() == '0') s.pop_back();
    if (!s.empty() && s.back() == '.') s.pop_back();
    return s;
}

struct TrialConfig {
    std::string trial_id;  // derived; see make_trial_id
    std::string sample_id;
    PathKind path = PathKind::DG;
    ContextArrangement arrangement;
    double temperature = 0.1;
    std::string model_role;  // generator the trial is bound to
    DatasetTag dataset_tag;
};

/// trial_id is a pure function of the identity fields, so reruns and
/// resumes agree on which trials already happened.
inline std::string make_trial_id(const TrialConfig& t) {
    std::string canon = "v1|";
    canon += t.sample_id;
    canon += '|';
    canon += path_kind_str(t.path);
    canon += '|';
    canon += std::to_string(t.arrangement.pcn);
    canon += '|';
    canon += t.arrangement.include_factual ? '1' : '0';
    canon += '|';
    canon += t.arrangement.reorder ? '1' : '0';
    canon += '|';
    canon += format_temp(t.temperature);
    canon += '|';
    canon += t.model_role;
    canon += '|';
    canon += t.dataset_tag.str();
    return to_hex(fnv1a64(canon));
}

inline TrialConfig make_trial(std::string sample_id, PathKind path, ContextArrangement arr,
                              double temperature, std::string model_role, DatasetTag tag) {
    TrialConfig t;
    t.sample_id = std::move(sample_id);
    t.path = path;
    t.arrangement = arr;
    t.temperature = temperature;
    t.model_role = std::move(model_role);
    t.dataset_tag = tag;
    t.trial_id = make_trial_id(t);
    return t;
}

struct GridOptions {
    int pcn_max = 5;
    bool include_memory_only = false;  // off-default: see enumerate_grid
    std::string model_role = "generator";
};

/// Builds the full experiment grid. Per sample per temperature: one DG
/// trial, and for every context path one knowledge-editing cell
/// (pcn=0, FC) plus, for each pcn in 1..pcn_max, the three arrangements
/// no-FC / +FC / +RO. MemoryOnly cells (pcn=0, no FC) exist only for DG
/// unless include_memory_only asks for them on context paths too — the
/// source tables suggest they were measured via direct generation alone.
inline std::vector<TrialConfig> enumerate_grid(const std::vector<ConflictSample>& samples,
                                               const std::vector<double>& temps,
                                               const std::vector<PathKind>& paths,
                                               const GridOptions& opts = {}) {
    if (paths.empty()) throw ConfigError("enumerate_grid: no paths requested");
    if (temps.empty()) throw ConfigError("enumerate_grid: no temperatures requested");
    if (opts.pcn_max < 1 || opts.pcn_max > 5)
        throw ConfigError("pcn_max must be in 1..5, got " + std::to_string(opts.pcn_max));

    std::vector<TrialConfig> trials;
    for (const auto& sample : samples) {
        for (double temp : temps) {
            for (PathKind path : all_path_kinds()) {
                if (std::find(paths.begin(), paths.end(), path) == paths.end()) continue;
                if (path == PathKind::DG) {
                    trials.push_back(make_trial(sample.id, path, {0, false, false}, temp,
                                                opts.model_role, sample.dataset_tag));
                    continue;
                }
                if (opts.include_memory_only)
                    trials.push_back(make_trial(sample.id, path, {0, false, false}, temp,
                                                opts.model_role, sample.dataset_tag));
                trials.push_back(make_trial(sample.id, path, {0, true, false}, temp,
                                            opts.model_role, sample.dataset_tag));
                for (int pcn = 1; pcn <= opts.pcn_max; ++pcn) {
                    trials.push_back(make_trial(sample.id, path, {pcn, false, false}, temp,
                                                opts.model_role, sample.dataset_tag));
                    trials.push_back(make_trial(sample.id, path, {pcn, true, false}, temp,
                                                opts.model_role, sample.dataset_tag));
                    trials.push_back(make_trial(sample.id, path, {pcn, true, true}, temp,
                                                opts.model_role, sample.dataset_tag));
                }
            }
        }
    }
    return trials;
}

// ============================================================================
// Generation records
// ============================================================================

struct ProviderMeta {
    std::string provider_id;
    int attempts = 0;     // summed over the trial's calls
    int64_t latency_ms = 0;
};

/// One executed trial, failed or not. Failed trials keep their partial
/// transcript and carry the error text, so accuracy denominators stay
/// auditable.
struct GenerationRecord {
    TrialConfig trial;
    PromptTranscript transcript;  // every turn, model responses included
    std::string final_answer;     // empty on failure
    bool refusal = false;         // final answer is the templates' refusal phrase
    std::string error;            // empty = success
    int64_t started_at_ms = 0;
    int64_t finished_at_ms = 0;
    ProviderMeta provider;
};

inline nlohmann::ordered_json record_to_json(const GenerationRecord& r) {
    nlohmann::ordered_json j;
    j["schema_version"] = kRecordSchemaVersion;
    j["trial_id"] = r.trial.trial_id;
    j["sample_id"] = r.trial.sample_id;
    j["dataset_tag"] = r.trial.dataset_tag.str();
    j["path"] = std::string(path_kind_str(r.trial.path));
    j["pcn"] = r.trial.arrangement.pcn;
    j["include_factual"] = r.trial.arrangement.include_factual;
    j["reorder"] = r.trial.arrangement.reorder;
    j["temperature"] = r.trial.temperature;
    j["model_role"] = r.trial.model_role;
    j["transcript"] = nlohmann::ordered_json::array();
    for (const auto& turn : r.transcript.turns)
        j["transcript"].push_back(
            {{"role", std::string(role_str(turn.role))}, {"text", turn.text}});
    j["final_answer"] = r.final_answer;
    j["refusal"] = r.refusal;
    if (r.error.empty())
        j["error"] = nullptr;
    else
        j["error"] = r.error;
    j["started_at_ms"] = r.started_at_ms;
    j["finished_at_ms"] = r.finished_at_ms;
    j["provider"] = {{"id", r.provider.provider_id},
                     {"attempts", r.provider.attempts},
                     {"latency_ms", r.provider.latency_ms}};
    return j;
}

inline GenerationRecord record_from_json(const nlohmann::ordered_json& j) {
    try {
        GenerationRecord r;
        if (!j.contains("schema_version") || j["schema_version"].get<int>() != kRecordSchemaVersion)
            throw PersistenceError("unsupported record schema version");
        r.trial.trial_id = j.at("trial_id").get<std::string>();
        r.trial.sample_id = j.at("sample_id").get<std::string>();
        r.trial.dataset_tag = DatasetTag::parse(j.at("dataset_tag").get<std::string>());
        r.trial.path = parse_path_kind(j.at("path").get<std::string>());
        r.trial.arrangement.pcn = j.at("pcn").get<int>();
        r.trial.arrangement.include_factual = j.at("include_factual").get<bool>();
        r.trial.arrangement.reorder = j.at("reorder").get<bool>();
        r.trial.temperature = j.at("temperature").get<double>();
        r.trial.model_role = j.at("model_role").get<std::string>();
        r.transcript.placeholders_resolved = true;
        for (const auto& turn : j.at("transcript"))
            r.transcript.turns.push_back({parse_role(turn.at("role").get<std::string>()),
                                          turn.at("text").get<std::string>()});
        r.final_answer = j.at("final_answer").get<std::string>();
        r.refusal = j.at("refusal").get<bool>();
        if (!j.at("error").is_null()) r.error = j["error"].get<std::string>();
        r.started_at_ms = j.at("started_at_ms").get<int64_t>();
        r.finished_at_ms = j.at("finished_at_ms").get<int64_t>();
        r.provider.provider_id = j.at("provider").at("id").get<std::string>();
        r.provider.attempts = j.at("provider").at("attempts").get<int>();
        r.provider.latency_ms = j.at("provider").at("latency_ms").get<int64_t>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw PersistenceError(std::string("record deserialization failed: ") + e.what());
    }
}

// ============================================================================
// Trial execution
// ============================================================================

/// Wall clock, or a frozen zero clock when the provider is deterministic —
/// timestamps are the one nondeterministic field, and freezing them makes
/// whole artifacts byte-reproducible under the mock.
struct RunClock {
    bool frozen = false;
    int64_t now_ms() const {
        if (frozen) return 0;
        return std::chrono::duration_cast<std::chrono::milliseconds>(
                   std::chrono::system_clock::now().time_since_epoch())
            .count();
    }
};

namespace detail {

/// Opening transcript for a trial. The flag-gated MemoryOnly cells on
/// context paths render with an empty context window (the window exists but
/// holds nothing); everything else goes through render() and its guards.
inline PromptTranscript opening_transcript(const TrialConfig& trial,
                                           const ConflictSample& sample) {
    const auto& arr = trial.arrangement;
    const bool memory_only =
        trial.path != PathKind::DG && arr.pcn == 0 && !arr.include_factual;
    if (!memory_only) return render(trial.path, sample, arr);

    PromptTranscript t;
    t.placeholders_resolved = true;
    if (trial.path == PathKind::CoTPK) {
        t.turns.push_back({Role::User, substitute(templates::kCotPkPart1,
                                                  {{"question", sample.question}})});
    } else {
        t.turns.push_back({Role::User, substitute(single_turn_template(trial.path),
                                                  {{"context", ""},
                                                   {"question", sample.question}})});
    }
    return t;
}

}  // namespace detail

/// Executes one trial to completion: a single exchange for most paths, the
/// full extract-concepts / probe-each-concept / critique-and-answer loop for
/// CoTPK. Errors from rendering, concept parsing, or the provider do not
/// escape — they become a failed record with the partial transcript, and the
/// run moves on.
inline GenerationRecord run_trial(const TrialConfig& trial, Provider& generator,
                                  const ConflictSample& sample, const RunClock& clock = {}) {
    if (sample.id != trial.sample_id)
        throw UnknownTrial("trial " + trial.trial_id + " expects sample '" + trial.sample_id +
                           "', got '" + sample.id + "'");

    GenerationRecord rec;
    rec.trial = trial;
    rec.started_at_ms = clock.now_ms();

    int call_index = 0;
    auto ask = [&](const PromptTranscript& t) {
        CompletionResult res =
            generator.complete(t, {trial.trial_id, call_index++, trial.temperature});
        rec.provider.provider_id = res.provider_id;
        rec.provider.attempts += res.attempt_count;
        rec.provider.latency_ms += res.latency_ms;
        return res.text;
    };

    try {
        PromptTranscript transcript = detail::opening_transcript(trial, sample);
        std::string response = ask(transcript);

        if (trial.path == PathKind::CoTPK) {
            for (;;) {
                CotPkStep step =
                    plan_cot_pk_next(transcript, response, sample, trial.arrangement);
                if (auto* done = std::get_if<CotPkCompleted>(&step)) {
                    rec.transcript = std::move(done->transcript);
                    rec.final_answer = done->final_answer;
                    break;
                }
                transcript = std::move(std::get<PromptTranscript>(step));
                response = ask(transcript);
            }
        } else {
            transcript.turns.push_back({Role::Assistant, response});
            rec.transcript = std::move(transcript);
            rec.final_answer = response;
        }
        rec.refusal = is_refusal(rec.final_answer);
    } catch (const Error& e) {
        rec.error = e.what();
        rec.final_answer.clear();
        rec.refusal = false;
    }

    rec.finished_at_ms = clock.now_ms();
    return rec;
}

// ============================================================================
// Persistence and resume
// ============================================================================

/// Records file for one (model, temperature, dataset) slice.
inline std::string records_filename(const std::string& model_role, double temperature,
                                    const DatasetTag& tag) {
    return sanitize_token(model_role) + "_" + format_temp(temperature) + "_" +
           sanitize_token(tag.str()) + ".jsonl";
}

namespace detail {

/// Append-only record sink. All writes funnel through one mutex, making it
/// a single-writer channel regardless of worker count; each line is flushed
/// before the next trial can land.
class RecordWriter {
public:
    explicit RecordWriter(std::filesystem::path records_dir)
        : records_dir_(std::move(records_dir)) {}

    using Hook = std::function<void(const GenerationRecord&, size_t)>;

    void set_hook(Hook hook) { hook_ = std::move(hook); }

    void write(const GenerationRecord& rec) {
        std::lock_guard<std::mutex> lock(mu_);
        const std::string name = records_filename(
            rec.trial.model_role, rec.trial.temperature, rec.trial.dataset_tag);
        auto it = streams_.find(name);
        if (it == streams_.end()) {
            auto stream = std::make_unique<std::ofstream>(
                records_dir_ / name, std::ios::binary | std::ios::app);
            if (!*stream)
                throw PersistenceError("cannot open records file: " +
                                       (records_dir_ / name).string());
            it = streams_.emplace(name, std::move(stream)).first;
        }
        *it->second << record_to_json(rec).dump() << "\n";
        it->second->flush();
        if (!*it->second)
            throw PersistenceError("write failed on records file: " +
                                   (records_dir_ / name).string());
        ++written_;
        if (hook_) hook_(rec, written_);
    }

private:
    std::filesystem::path records_dir_;
    std::unordered_map<std::string, std::unique_ptr<std::ofstream>> streams_;
    std::mutex mu_;
    size_t written_ = 0;
    Hook hook_;
};

}  // namespace detail

/// Reads every record in a run directory. A half-written final line (torn
/// by a crash) is truncated away when repair_torn_tail is set — that is the
/// resume path; a corrupt line anywhere else is a hard error.
inline std::vector<GenerationRecord> load_records(const std::string& run_dir,
                                                  bool repair_torn_tail = false) {
    namespace fs = std::filesystem;
    const fs::path records_dir = fs::path(run_dir) / "records";
    std::vector<GenerationRecord> records;
    if (!fs::exists(records_dir)) return records;

    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(records_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".jsonl")
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());

    for (const auto& file : files) {
        std::ifstream in(file, std::ios::binary);
        if (!in) throw PersistenceError("cannot open records file: " + file.string());
        std::string line;
        std::vector<std::pair<std::streamoff, std::string>> lines;
        std::streamoff offset = 0;
        while (std::getline(in, line)) {
            lines.emplace_back(offset, line);
            offset += static_cast<std::streamoff>(line.size()) + 1;
        }
        for (size_t i = 0; i < lines.size(); ++i) {
            if (trim(lines[i].second).empty()) continue;
            try {
                records.push_back(
                    record_from_json(nlohmann::ordered_json::parse(lines[i].second)));
            } catch (const Error&) {
                if (repair_torn_tail && i + 1 == lines.size()) {
                    std::filesystem::resize_file(file,
                                                 static_cast<uintmax_t>(lines[i].first));
                    break;
                }
                throw PersistenceError("corrupt record at " + file.string() + ":" +
                                       std::to_string(i + 1));
            } catch (const nlohmann::json::parse_error&) {
                if (repair_torn_tail && i + 1 == lines.size()) {
                    std::filesystem::resize_file(file,
                                                 static_cast<uintmax_t>(lines[i].first));
                    break;
                }
                throw PersistenceError("corrupt record at " + file.string() + ":" +
                                       std::to_string(i + 1));
            }
        }
    }
    return records;
}

struct RunSummary {
    size_t completed = 0;  // written this run without error
    size_t failed = 0;     // written this run with an error field
    size_t skipped = 0;    // already present in the run directory
};

inline void write_summary(const RunSummary& s, const std::string& run_dir) {
    nlohmann::ordered_json j;
    j["completed"] = s.completed;
    j["failed"] = s.failed;
    j["skipped"] = s.skipped;
    std::ofstream out(std::filesystem::path(run_dir) / "summary.json",
                      std::ios::binary | std::ios::trunc);
    if (!out) throw PersistenceError("cannot write summary.json in " + run_dir);
    out << j.dump(2) << "\n";
}

struct RunOptions {
    size_t parallelism = 4;
    /// Test hook: invoked after each record lands (under the writer lock),
    /// with the record and the running count. Throwing from it aborts the
    /// run mid-flight, which is how the crash-injection tests kill a run at
    /// a chosen point without killing the process.
    detail::RecordWriter::Hook on_record_written;
};

/// Executes every trial not already present in run_dir. Records persist the
/// moment a trial finishes; a rerun over the same directory finds them by
/// trial_id and skips. Individual trial failures are recorded, not fatal;
/// only persistence failures (or a throwing test hook) abort the run.
inline RunSummary run_grid(const std::vector<TrialConfig>& trials, Provider& generator,
                           const CorpusIndex& corpus, const std::string& run_dir,
                           const RunOptions& opts = {}) {
    namespace fs = std::filesystem;
    const fs::path records_dir = fs::path(run_dir) / "records";
    std::error_code ec;
    fs::create_directories(records_dir, ec);
    if (ec) throw PersistenceError("cannot create run directory: " + records_dir.string());

    std::unordered_set<std::string> done;
    for (const auto& rec : load_records(run_dir, /*repair_torn_tail=*/true))
        done.insert(rec.trial.trial_id);

    RunSummary summary;
    std::vector<const TrialConfig*> pending;
    for (const auto& t : trials) {
        if (done.count(t.trial_id))
            ++summary.skipped;
        else
            pending.push_back(&t);
    }

    const RunClock clock{generator.deterministic()};
    detail::RecordWriter writer(records_dir);
    writer.set_hook(opts.on_record_written);

    std::atomic<size_t> next{0};
    std::atomic<bool> abort{false};
    std::atomic<size_t> completed{0};
    std::atomic<size_t> failed{0};
    std::mutex err_mu;
    std::exception_ptr first_error;

    auto worker = [&] {
        for (;;) {
            if (abort.load()) return;
            const size_t i = next.fetch_add(1);
            if (i >= pending.size()) return;
            const TrialConfig& trial = *pending[i];
            try {
                GenerationRecord rec =
                    run_trial(trial, generator, corpus.at(trial.sample_id), clock);
                writer.write(rec);
                if (rec.error.empty())
                    completed.fetch_add(1);
                else
                    failed.fetch_add(1);
            } catch (...) {
                {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (!first_error) first_error = std::current_exception();
                }
                abort.store(true);
                return;
            }
        }
    };

    const size_t n_threads = std::max<size_t>(1, std::min(opts.parallelism, pending.size()));
    std::vector<std::thread> threads;
    threads.reserve(n_threads);
    for (size_t i = 0; i < n_threads; ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();

    if (first_error) std::rethrow_exception(first_error);

    summary.completed = completed.load();
    summary.failed = failed.load();
    write_summary(summary, run_dir);
    return summary;
}

}  // namespace dialign
