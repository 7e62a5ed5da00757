#pragma once

#include <cstdint>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "dialign/errors.hpp"
#include "dialign/strings.hpp"

namespace dialign {

/// Which upstream QA benchmark a sample was derived from.
struct DatasetTag {
    enum class Kind { HQA, MS, NQ, Other };

    Kind kind = Kind::Other;
    std::string other_name = "OTHER";

    static DatasetTag parse(std::string_view s) {
        DatasetTag t;
        if (s == "HQA") {
            t.kind = Kind::HQA;
        } else if (s == "MS") {
            t.kind = Kind::MS;
        } else if (s == "NQ") {
            t.kind = Kind::NQ;
        } else {
            t.kind = Kind::Other;
            t.other_name = s.empty() ? "OTHER" : std::string(s);
        }
        return t;
    }

    std::string str() const {
        switch (kind) {
            case Kind::HQA: return "HQA";
            case Kind::MS: return "MS";
            case Kind::NQ: return "NQ";
            case Kind::Other: return other_name;
        }
        return "OTHER";
    }

    bool operator==(const DatasetTag& o) const {
        return kind == o.kind && (kind != Kind::Other || other_name == o.other_name);
    }
};

/// One QA item with a correct and an incorrect answer, poisoned contexts
/// supporting the incorrect answer and factual contexts supporting the
/// correct one.
struct ConflictSample {
    std::string id;
    std::string question;
    std::string correct_answer;
    std::string incorrect_answer;
    std::vector<std::string> poisoned_contexts;
    std::vector<std::string> factual_contexts;
    DatasetTag dataset_tag;

    /// Unknown keys from the source record, preserved verbatim on save.
    nlohmann::ordered_json extra_fields = nlohmann::ordered_json::object();
};

struct CorpusSplit {
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;
    int64_t seed = 0;
};

struct ValidationIssue {
    std::string sample_id;   // empty when the document itself is malformed
    std::string invariant;   // which rule failed
    std::string detail;
    size_t record_index = 0;
};

namespace detail {

inline void check_sample(const ConflictSample& s, size_t index,
                         std::vector<ValidationIssue>& issues) {
    auto add = [&](const std::string& invariant, const std::string& detail) {
        issues.push_back({s.id, invariant, detail, index});
    };
    if (trim(s.question).empty())
        add("question non-empty", "question is empty after trimming");
    if (trim(s.correct_answer).empty())
        add("correct_answer non-empty", "correct_answer is empty after trimming");
    if (trim(s.incorrect_answer).empty())
        add("incorrect_answer non-empty", "incorrect_answer is empty after trimming");
    if (!trim(s.correct_answer).empty() && !trim(s.incorrect_answer).empty() &&
        iequals(trim(s.correct_answer), trim(s.incorrect_answer)))
        add("correct_answer != incorrect_answer",
            "answers are equal after trimming (case-insensitive)");
    if (s.poisoned_contexts.empty())
        add("poisoned_contexts length >= 1", "poisoned_contexts is empty");
    if (s.factual_contexts.empty())
        add("factual_contexts length >= 1", "factual_contexts is empty");
}

inline ConflictSample sample_from_json(const nlohmann::ordered_json& rec, size_t index) {
    static const std::unordered_set<std::string> known = {
        "id", "question", "correct_answer", "incorrect_answer",
        "poisoned_contexts", "factual_contexts", "dataset_tag"};

    auto get_string = [&](const char* key) -> std::string {
        if (!rec.contains(key) || !rec[key].is_string()) {
            throw MalformedDocument("record " + std::to_string(index) +
                                    ": missing or non-string field '" + key + "'");
        }
        return rec[key].get<std::string>();
    };
    auto get_string_array = [&](const char* key) -> std::vector<std::string> {
        if (!rec.contains(key) || !rec[key].is_array()) {
            throw MalformedDocument("record " + std::to_string(index) +
                                    ": missing or non-array field '" + key + "'");
        }
        std::vector<std::string> out;
        for (const auto& item : rec[key]) {
            if (!item.is_string()) {
                throw MalformedDocument("record " + std::to_string(index) + ": field '" +
                                        key + "' contains a non-string entry");
            }
            out.push_back(item.get<std::string>());
        }
        return out;
    };

    ConflictSample s;
    s.id = get_string("id");
    s.question = get_string("question");
    s.correct_answer = get_string("correct_answer");
    s.incorrect_answer = get_string("incorrect_answer");
    s.poisoned_contexts = get_string_array("poisoned_contexts");
    s.factual_contexts = get_string_array("factual_contexts");
    if (rec.contains("dataset_tag")) {
        if (!rec["dataset_tag"].is_string()) {
            throw MalformedDocument("record " + std::to_string(index) +
                                    ": 'dataset_tag' must be a string");
        }
        s.dataset_tag = DatasetTag::parse(rec["dataset_tag"].get<std::string>());
    }
    for (auto it = rec.begin(); it != rec.end(); ++it) {
        if (!known.count(it.key())) s.extra_fields[it.key()] = it.value();
    }
    return s;
}

}  // namespace detail

struct CorpusValidation {
    std::vector<ConflictSample> samples;
    std::vector<ValidationIssue> issues;
};

/// Parses a corpus document and collects every invariant violation instead
/// of stopping at the first. Parse failures still throw MalformedDocument.
inline CorpusValidation validate_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PersistenceError("cannot open corpus file: " + path);

    nlohmann::ordered_json doc;
    try {
        doc = nlohmann::ordered_json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw MalformedDocument("corpus parse failure in " + path + ": " + e.what());
    }
    if (!doc.is_array())
        throw MalformedDocument("corpus document must be a top-level JSON array: " + path);

    CorpusValidation result;
    std::unordered_map<std::string, size_t> seen_ids;
    for (size_t i = 0; i < doc.size(); ++i) {
        if (!doc[i].is_object()) {
            throw MalformedDocument("record " + std::to_string(i) + " is not an object");
        }
        ConflictSample s = detail::sample_from_json(doc[i], i);
        auto [it, inserted] = seen_ids.emplace(s.id, i);
        if (!inserted) {
            result.issues.push_back({s.id, "ids unique within corpus",
                                     "id also used by record " + std::to_string(it->second), i});
        }
        detail::check_sample(s, i, result.issues);
        result.samples.push_back(std::move(s));
    }
    return result;
}

/// Loads a corpus, throwing on the first violated invariant.
inline std::vector<ConflictSample> load_corpus(const std::string& path) {
    CorpusValidation v = validate_corpus(path);
    if (!v.issues.empty()) {
        const ValidationIssue& first = v.issues.front();
        if (first.invariant == "ids unique within corpus") {
            throw DuplicateId("duplicate sample id '" + first.sample_id + "' (" +
                              first.detail + ")");
        }
        throw InvariantViolation(first.sample_id, first.invariant + ": " + first.detail);
    }
    return v.samples;
}

inline nlohmann::ordered_json corpus_to_json(const std::vector<ConflictSample>& samples) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& s : samples) {
        nlohmann::ordered_json rec;
        rec["id"] = s.id;
        rec["question"] = s.question;
        rec["correct_answer"] = s.correct_answer;
        rec["incorrect_answer"] = s.incorrect_answer;
        rec["poisoned_contexts"] = s.poisoned_contexts;
        rec["factual_contexts"] = s.factual_contexts;
        rec["dataset_tag"] = s.dataset_tag.str();
        for (auto it = s.extra_fields.begin(); it != s.extra_fields.end(); ++it)
            rec[it.key()] = it.value();
        arr.push_back(std::move(rec));
    }
    return arr;
}

inline void save_corpus(const std::vector<ConflictSample>& samples, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw PersistenceError("cannot write corpus file: " + path);
    out << corpus_to_json(samples).dump(2) << "\n";
}

namespace detail {

/// Uniform draw in [0, bound) from mt19937_64 via rejection sampling.
/// std::uniform_int_distribution is implementation-defined, so the shuffle
/// would not be reproducible across standard libraries without this.
inline uint64_t bounded_draw(std::mt19937_64& rng, uint64_t bound) {
    const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    uint64_t v = rng();
    while (v >= limit) v = rng();
    return v % bound;
}

/// Fisher-Yates with MT19937-64; both pieces are fully specified, so the
/// permutation is identical on every platform for a fixed seed.
inline std::vector<size_t> seeded_permutation(size_t n, int64_t seed) {
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    std::mt19937_64 rng(static_cast<uint64_t>(seed));
    for (size_t i = n; i > 1; --i) {
        size_t j = static_cast<size_t>(bounded_draw(rng, i));
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

}  // namespace detail

/// Draws disjoint train/test id sets of the requested sizes.
inline CorpusSplit split_disjoint(const std::vector<ConflictSample>& corpus, size_t n_train,
                                  size_t n_test, int64_t seed) {
    if (n_train + n_test > corpus.size()) {
        throw InsufficientSamples("requested " + std::to_string(n_train) + "+" +
                                  std::to_string(n_test) + " samples from a corpus of " +
                                  std::to_string(corpus.size()));
    }
    std::vector<size_t> perm = detail::seeded_permutation(corpus.size(), seed);
    CorpusSplit split;
    split.seed = seed;
    split.train_ids.reserve(n_train);
    split.test_ids.reserve(n_test);
    for (size_t i = 0; i < n_train; ++i) split.train_ids.push_back(corpus[perm[i]].id);
    for (size_t i = 0; i < n_test; ++i)
        split.test_ids.push_back(corpus[perm[n_train + i]].id);
    return split;
}

/// Index from sample id to sample, for judge/dataset stages.
class CorpusIndex {
public:
    CorpusIndex() = default;
    explicit CorpusIndex(const std::vector<ConflictSample>& samples) {
        for (const auto& s : samples) by_id_.emplace(s.id, s);
    }

    const ConflictSample& at(const std::string& id) const {
        auto it = by_id_.find(id);
        if (it == by_id_.end()) throw UnknownTrial("unknown sample id: " + id);
        return it->second;
    }

    bool contains(const std::string& id) const { return by_id_.count(id) > 0; }
    size_t size() const { return by_id_.size(); }

private:
    std::unordered_map<std::string, ConflictSample> by_id_;
};

}  // namespace dialign
