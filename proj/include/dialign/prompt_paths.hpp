#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "dialign/corpus.hpp"
#include "dialign/errors.hpp"
#include "dialign/strings.hpp"
#include "dialign/templates.hpp"

namespace dialign {

// ============================================================================
// Path and arrangement types
// ============================================================================

/// The six generation strategies, in increasing order of complexity. The
/// enum order is meaningful: tie-breaks elsewhere prefer the later (more
/// elaborate) path.
enum class PathKind { DG, Base, Tips, BaseCoT, CoTNoPK, CoTPK };

inline std::string_view path_kind_str(PathKind p) {
    switch (p) {
        case PathKind::DG: return "DG";
        case PathKind::Base: return "Base";
        case PathKind::Tips: return "Tips";
        case PathKind::BaseCoT: return "BaseCoT";
        case PathKind::CoTNoPK: return "CoTNoPK";
        case PathKind::CoTPK: return "CoTPK";
    }
    return "DG";
}

inline PathKind parse_path_kind(std::string_view s) {
    if (s == "DG") return PathKind::DG;
    if (s == "Base") return PathKind::Base;
    if (s == "Tips") return PathKind::Tips;
    if (s == "BaseCoT") return PathKind::BaseCoT;
    if (s == "CoTNoPK") return PathKind::CoTNoPK;
    if (s == "CoTPK") return PathKind::CoTPK;
    throw MalformedDocument("unknown path kind: " + std::string(s));
}

inline const std::vector<PathKind>& all_path_kinds() {
    static const std::vector<PathKind> all = {PathKind::DG,      PathKind::Base,
                                              PathKind::Tips,    PathKind::BaseCoT,
                                              PathKind::CoTNoPK, PathKind::CoTPK};
    return all;
}

/// Paths that consume a context window (everything but DG).
inline bool takes_contexts(PathKind p) { return p != PathKind::DG; }

/// How the context window is put together: how many poisoned contexts (pcn),
/// whether the factual ones are included (FC), and whether the factual block
/// is moved in front of the poisoned block (RO).
struct ContextArrangement {
    int pcn = 0;
    bool include_factual = false;
    bool reorder = false;

    bool operator==(const ContextArrangement&) const = default;
};

/// Throws InvalidArrangement unless the combination is expressible.
/// pcn=0 ∧ ¬FC is the empty window, valid only for DG — callers that hold a
/// non-DG path must reject it separately (render does).
inline void check_arrangement(const ContextArrangement& arr) {
    if (arr.pcn < 0 || arr.pcn > 5)
        throw InvalidArrangement("pcn must be in 0..5, got " + std::to_string(arr.pcn));
    if (arr.reorder && !arr.include_factual)
        throw InvalidArrangement("reorder without factual contexts is meaningless");
    if (arr.reorder && arr.pcn == 0)
        throw InvalidArrangement("reorder with no poisoned contexts is meaningless");
}

// ============================================================================
// Transcripts
// ============================================================================

enum class Role { System, User, Assistant };

inline std::string_view role_str(Role r) {
    switch (r) {
        case Role::System: return "system";
        case Role::User: return "user";
        case Role::Assistant: return "assistant";
    }
    return "user";
}

inline Role parse_role(std::string_view s) {
    if (s == "system") return Role::System;
    if (s == "user") return Role::User;
    if (s == "assistant") return Role::Assistant;
    throw MalformedDocument("unknown role: " + std::string(s));
}

struct Turn {
    Role role;
    std::string text;

    bool operator==(const Turn&) const = default;
};

struct PromptTranscript {
    std::vector<Turn> turns;
    bool placeholders_resolved = false;

    bool operator==(const PromptTranscript&) const = default;
};

// ============================================================================
// Placeholder substitution
// ============================================================================

namespace detail {

inline bool is_known_placeholder(std::string_view name) {
    return name == "context" || name == "question" || name == "concept" ||
           name == "correct_answer" || name == "s_answer" || name == "answer";
}

}  // namespace detail

/// Single-pass substitution: the template (a trusted constant) is scanned
/// once and each {name} token is replaced from `values`. Substituted values
/// are never re-scanned, so braces inside questions or contexts are inert.
/// A known placeholder with no value supplied is a TemplateViolation.
inline std::string substitute(std::string_view tpl,
                              const std::map<std::string, std::string>& values) {
    std::string out;
    out.reserve(tpl.size());
    size_t i = 0;
    while (i < tpl.size()) {
        if (tpl[i] != '{') {
            out += tpl[i++];
            continue;
        }
        size_t close = tpl.find('}', i + 1);
        if (close == std::string_view::npos) {
            out += tpl.substr(i);
            break;
        }
        std::string name(tpl.substr(i + 1, close - i - 1));
        auto it = values.find(name);
        if (it != values.end()) {
            out += it->second;
        } else if (detail::is_known_placeholder(name)) {
            throw TemplateViolation("placeholder {" + name + "} left unresolved");
        } else {
            out += tpl.substr(i, close - i + 1);
        }
        i = close + 1;
    }
    return out;
}

// ============================================================================
// Context-window assembly
// ============================================================================

/// Picks the first arr.pcn poisoned contexts in corpus order, then arranges:
///   FC ∧ ¬RO → poisoned block, factual block
///   FC ∧ RO  → factual block, poisoned block
///   ¬FC      → poisoned block only
inline std::vector<std::string> assemble_contexts(const ConflictSample& sample,
                                                  const ContextArrangement& arr) {
    check_arrangement(arr);
    if (static_cast<size_t>(arr.pcn) > sample.poisoned_contexts.size()) {
        throw NotEnoughPoisonedContexts("sample '" + sample.id + "' has " +
                                        std::to_string(sample.poisoned_contexts.size()) +
                                        " poisoned contexts, arrangement needs " +
                                        std::to_string(arr.pcn));
    }
    std::vector<std::string> poisoned(sample.poisoned_contexts.begin(),
                                      sample.poisoned_contexts.begin() + arr.pcn);
    std::vector<std::string> out;
    if (arr.include_factual && arr.reorder) {
        out = sample.factual_contexts;
        out.insert(out.end(), poisoned.begin(), poisoned.end());
    } else if (arr.include_factual) {
        out = std::move(poisoned);
        out.insert(out.end(), sample.factual_contexts.begin(), sample.factual_contexts.end());
    } else {
        out = std::move(poisoned);
    }
    return out;
}

// ============================================================================
// Rendering
// ============================================================================

namespace detail {

inline std::string_view single_turn_template(PathKind path) {
    switch (path) {
        case PathKind::DG: return templates::kDirectGenerate;
        case PathKind::Base: return templates::kBase;
        case PathKind::Tips: return templates::kTips;
        case PathKind::BaseCoT: return templates::kBaseCot;
        case PathKind::CoTNoPK: return templates::kCotNoPk;
        case PathKind::CoTPK: break;  // multi-turn, handled separately
    }
    throw TemplateViolation("no single-turn template for CoTPK");
}

}  // namespace detail

/// Renders the opening transcript for a path: the lone user turn for the
/// single-turn paths, the Part-1 concept-extraction turn for CoTPK (later
/// turns depend on model responses; see plan_cot_pk_next).
inline PromptTranscript render(PathKind path, const ConflictSample& sample,
                               const ContextArrangement& arr) {
    check_arrangement(arr);
    PromptTranscript t;
    t.placeholders_resolved = true;

    if (path == PathKind::DG) {
        if (arr.pcn != 0 || arr.include_factual)
            throw InvalidArrangement("DG takes no contexts (pcn=0, FC=false required)");
        t.turns.push_back(
            {Role::User, substitute(templates::kDirectGenerate, {{"question", sample.question}})});
        return t;
    }

    if (path == PathKind::CoTPK) {
        // Part 1 needs no contexts yet, but the arrangement must still be
        // non-empty — a context-free CoTPK trial is a contradiction.
        if (arr.pcn == 0 && !arr.include_factual)
            throw EmptyContexts("CoTPK with an empty context window");
        t.turns.push_back(
            {Role::User, substitute(templates::kCotPkPart1, {{"question", sample.question}})});
        return t;
    }

    std::vector<std::string> contexts = assemble_contexts(sample, arr);
    if (contexts.empty()) throw EmptyContexts("path " + std::string(path_kind_str(path)) +
                                              " rendered with an empty context window");
    t.turns.push_back({Role::User, substitute(detail::single_turn_template(path),
                                              {{"context", join(contexts, "\n")},
                                               {"question", sample.question}})});
    return t;
}

// ============================================================================
// Concept parsing (CoT-PK Part 1 output)
// ============================================================================

namespace detail {

/// Attempts to read a quote-delimited comma list from inside one bracket
/// pair. Returns nullopt when the content does not fit the grammar;
/// an empty list is a *successful* parse of zero entries.
inline std::optional<std::vector<std::string>> parse_bracket_list(std::string_view inside) {
    std::vector<std::string> items;
    size_t i = 0;
    auto skip_ws = [&] {
        while (i < inside.size() && std::isspace(static_cast<unsigned char>(inside[i]))) ++i;
    };
    skip_ws();
    if (i == inside.size()) return items;  // "[]"
    while (true) {
        skip_ws();
        if (i >= inside.size()) break;  // trailing comma
        char q = inside[i];
        if (q != '\'' && q != '"') return std::nullopt;
        size_t end = inside.find(q, i + 1);
        if (end == std::string_view::npos) return std::nullopt;
        items.emplace_back(inside.substr(i + 1, end - i - 1));
        i = end + 1;
        skip_ws();
        if (i == inside.size()) break;
        if (inside[i] != ',') return std::nullopt;
        ++i;
    }
    return items;
}

inline std::vector<std::string> dedupe_and_cap(std::vector<std::string> raw, size_t max_concepts) {
    std::vector<std::string> out;
    for (auto& item : raw) {
        std::string c = trim(item);
        if (c.empty()) continue;
        bool seen = false;
        for (const auto& prev : out)
            if (prev == c) { seen = true; break; }
        if (seen) continue;
        out.push_back(std::move(c));
        if (out.size() == max_concepts) break;
    }
    return out;
}

}  // namespace detail

/// Extracts the concept list from a Part-1 response. Primary route: the
/// first bracketed, quote-delimited, comma-separated list in the text
/// (single or double quotes). Fallback for models that ignore the format:
/// split the whole text on commas and keep non-empty trimmed fragments of
/// at most 80 characters. Entries are trimmed, deduplicated (first
/// occurrence wins) and capped at max_concepts.
inline std::vector<std::string> parse_concepts(std::string_view text, size_t max_concepts = 8) {
    for (size_t open = text.find('['); open != std::string_view::npos;
         open = text.find('[', open + 1)) {
        size_t close = text.find(']', open + 1);
        if (close == std::string_view::npos) break;
        auto items = detail::parse_bracket_list(text.substr(open + 1, close - open - 1));
        if (!items) continue;
        std::vector<std::string> concepts = detail::dedupe_and_cap(std::move(*items), max_concepts);
        if (concepts.empty())
            throw EmptyConceptList("bracketed list parsed to zero concepts");
        return concepts;
    }

    // Fallback: comma-split the raw text.
    std::vector<std::string> fragments;
    size_t start = 0;
    std::string s(text);
    while (start <= s.size()) {
        size_t comma = s.find(',', start);
        std::string frag = trim(s.substr(start, comma == std::string::npos ? std::string::npos
                                                                           : comma - start));
        if (!frag.empty() && frag.size() <= 80) fragments.push_back(std::move(frag));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    std::vector<std::string> concepts =
        detail::dedupe_and_cap(std::move(fragments), max_concepts);
    if (concepts.empty())
        throw ConceptParseFailure("no concept list found in: " +
                                  std::string(text.substr(0, 120)));
    return concepts;
}

/// Renders a concept list back into the Part-1 output format. Quote choice
/// avoids the quote kind appearing in the concept; a concept containing both
/// kinds is not representable in that grammar.
inline std::string format_concepts(const std::vector<std::string>& concepts) {
    std::string out = "[";
    for (size_t i = 0; i < concepts.size(); ++i) {
        const std::string& c = concepts[i];
        char q = c.find('\'') == std::string::npos ? '\'' : '"';
        if (c.find(q) != std::string::npos)
            throw ConceptParseFailure("concept contains both quote kinds: " + c);
        if (i) out += ',';
        out += q;
        out += c;
        out += q;
    }
    out += "]";
    return out;
}

// ============================================================================
// CoT-PK multi-turn protocol
// ============================================================================

/// Terminal result of the CoT-PK session: the Part-3 response is the
/// path's final answer.
struct CotPkCompleted {
    std::string final_answer;
    PromptTranscript transcript;  // full session including the final response
};

using CotPkStep = std::variant<PromptTranscript, CotPkCompleted>;

/// Advances the CoT-PK session one turn. `state` must end with a user turn
/// that `last_response` answers; the response is appended and the next user
/// turn (Part 2 per concept, then Part 3) is planned from the transcript
/// shape alone — no hidden state. The whole exchange stays in one session so
/// Part 3's "what you know above" points at the Part-2 answers.
///
/// When Part 1 parses to an empty list the question itself is substituted as
/// the single concept, keeping Part 2 meaningful without inventing content.
/// ConceptParseFailure (no list at all) propagates to the caller.
inline CotPkStep plan_cot_pk_next(const PromptTranscript& state, const std::string& last_response,
                                  const ConflictSample& sample, const ContextArrangement& arr) {
    if (state.turns.empty() || state.turns.back().role != Role::User)
        throw ProtocolViolation("CoT-PK step requires a transcript awaiting a response");

    PromptTranscript next = state;
    next.turns.push_back({Role::Assistant, last_response});

    size_t responses = 0;
    for (const auto& turn : next.turns)
        if (turn.role == Role::Assistant) ++responses;

    // Concepts come from the Part-1 response, re-parsed on every step so the
    // state machine stays a pure function of the transcript.
    std::vector<std::string> concepts;
    try {
        concepts = parse_concepts(next.turns[1].text);
    } catch (const EmptyConceptList&) {
        concepts = {sample.question};
    }

    if (responses <= concepts.size()) {
        next.turns.push_back(
            {Role::User, substitute(templates::kCotPkPart2,
                                    {{"concept", concepts[responses - 1]}})});
        return next;
    }
    if (responses == concepts.size() + 1) {
        std::vector<std::string> contexts = assemble_contexts(sample, arr);
        next.turns.push_back(
            {Role::User, substitute(templates::kCotPkPart3, {{"context", join(contexts, "\n")},
                                                             {"question", sample.question}})});
        return next;
    }
    if (responses == concepts.size() + 2) {
        return CotPkCompleted{last_response, std::move(next)};
    }
    throw ProtocolViolation("CoT-PK session already completed");
}

// ============================================================================
// Base-rendering recognizer
// ============================================================================

/// The capture groups of a well-formed Base prompt.
struct BaseRenderingParts {
    std::vector<std::string> contexts;
    std::string question;
};

/// Structural inverse of render(Base, ...): accepts exactly the strings the
/// Base template can produce and recovers the substituted fields. Dataset
/// emitters use this to prove their instructions carry no extra scaffolding.
inline std::optional<BaseRenderingParts> parse_base_rendering(std::string_view text) {
    constexpr std::string_view tpl = templates::kBase;
    const size_t ctx_pos = tpl.find("{context}");
    const std::string_view prefix = tpl.substr(0, ctx_pos);            // "...Contexts:\n"
    const std::string_view query_sep = "\nQuery: ";
    const std::string_view suffix = "\nAnswer:";

    if (text.size() < prefix.size() + query_sep.size() + suffix.size()) return std::nullopt;
    if (text.substr(0, prefix.size()) != prefix) return std::nullopt;
    if (text.substr(text.size() - suffix.size()) != suffix) return std::nullopt;

    std::string_view middle =
        text.substr(prefix.size(), text.size() - prefix.size() - suffix.size());
    // The question is a single trailing segment; contexts may themselves
    // span lines, so split on the *last* query separator.
    size_t sep = middle.rfind(query_sep);
    if (sep == std::string_view::npos) return std::nullopt;

    BaseRenderingParts parts;
    parts.question = std::string(middle.substr(sep + query_sep.size()));
    std::string_view block = middle.substr(0, sep);
    size_t start = 0;
    while (start <= block.size()) {
        size_t nl = block.find('\n', start);
        if (nl == std::string_view::npos) {
            parts.contexts.emplace_back(block.substr(start));
            break;
        }
        parts.contexts.emplace_back(block.substr(start, nl - start));
        start = nl + 1;
    }
    if (parts.contexts.empty() || parts.question.empty()) return std::nullopt;
    return parts;
}

}  // namespace dialign
