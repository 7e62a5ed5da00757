#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <set>

#include "dialign/prompt_paths.hpp"
#include "test_support.hpp"

using namespace dialign;

// ============================================================================
// Frozen template text
// ============================================================================

TEST_CASE("every template matches its golden file byte for byte") {
    const auto& all = templates::all_templates();
    REQUIRE(all.size() == 11);
    for (const auto& t : all) {
        INFO("template: ", t.name);
        CHECK(std::string(t.text) == testsup::read_golden(std::string(t.name) + ".txt"));
    }
}

TEST_CASE("golden files exactly cover the template set") {
    std::set<std::string> expected;
    for (const auto& t : templates::all_templates()) expected.insert(std::string(t.name) + ".txt");
    std::set<std::string> present;
    for (const auto& entry : std::filesystem::directory_iterator(DIALIGN_GOLDEN_DIR))
        present.insert(entry.path().filename().string());
    CHECK(present == expected);
}

// ============================================================================
// Rendering vs goldens (independent substitution route)
// ============================================================================

namespace {

/// The tests' own expected-rendering builder: golden text + replace_all.
std::string expected_single_turn(const std::string& golden_name, const ConflictSample& s,
                                 const std::vector<std::string>& contexts) {
    std::string text = testsup::read_golden(golden_name);
    text = testsup::replace_all(text, "{context}", join(contexts, "\n"));
    text = testsup::replace_all(text, "{question}", s.question);
    return text;
}

}  // namespace

TEST_CASE("single-turn paths render exactly the golden text with fields filled") {
    auto s = testsup::laleli();
    ContextArrangement arr{1, true, false};
    auto contexts = assemble_contexts(s, arr);
    REQUIRE(contexts.size() == 3);  // p1, f1, f2

    struct Case {
        PathKind path;
        const char* golden;
    };
    for (auto [path, golden] : {Case{PathKind::Base, "path_base.txt"},
                                Case{PathKind::Tips, "path_tips.txt"},
                                Case{PathKind::BaseCoT, "path_base_cot.txt"},
                                Case{PathKind::CoTNoPK, "path_cot_nopk.txt"}}) {
        INFO("path: ", path_kind_str(path));
        auto transcript = render(path, s, arr);
        REQUIRE(transcript.turns.size() == 1);
        CHECK(transcript.turns[0].role == Role::User);
        CHECK(transcript.placeholders_resolved);
        CHECK(transcript.turns[0].text == expected_single_turn(golden, s, contexts));
        CHECK(transcript.turns[0].text.find("{context}") == std::string::npos);
        CHECK(transcript.turns[0].text.find("{question}") == std::string::npos);
    }
}

TEST_CASE("direct generation renders the bare question prompt") {
    auto s = testsup::laleli();
    auto transcript = render(PathKind::DG, s, {0, false, false});
    REQUIRE(transcript.turns.size() == 1);
    CHECK(transcript.turns[0].text == expected_single_turn("path_dg.txt", s, {}));
}

TEST_CASE("factual-only window renders with just the factual contexts") {
    auto s = testsup::laleli();
    auto transcript = render(PathKind::Base, s, {0, true, false});
    auto expected = expected_single_turn("path_base.txt", s, s.factual_contexts);
    CHECK(transcript.turns[0].text == expected);
}

TEST_CASE("render rejects impossible path/arrangement combinations") {
    auto s = testsup::laleli();
    CHECK_THROWS_AS(render(PathKind::DG, s, {1, false, false}), InvalidArrangement);
    CHECK_THROWS_AS(render(PathKind::DG, s, {0, true, false}), InvalidArrangement);
    CHECK_THROWS_AS(render(PathKind::Base, s, {0, false, false}), EmptyContexts);
    CHECK_THROWS_AS(render(PathKind::CoTPK, s, {0, false, false}), EmptyContexts);
    CHECK_THROWS_AS(render(PathKind::Base, s, {6, true, false}), InvalidArrangement);
}

// ============================================================================
// Context assembly
// ============================================================================

TEST_CASE("assembly examples: placement of poisoned and factual blocks") {
    auto s = testsup::laleli();
    const auto& p = s.poisoned_contexts;
    const auto& f = s.factual_contexts;

    CHECK(assemble_contexts(s, {1, true, false}) ==
          std::vector<std::string>{p[0], f[0], f[1]});
    CHECK(assemble_contexts(s, {1, true, true}) ==
          std::vector<std::string>{f[0], f[1], p[0]});
    CHECK(assemble_contexts(s, {2, false, false}) == std::vector<std::string>{p[0], p[1]});
    CHECK(assemble_contexts(s, {0, true, false}) == f);
    CHECK(assemble_contexts(s, {0, false, false}).empty());
    CHECK(assemble_contexts(s, {5, true, true}).size() == 7);
}

TEST_CASE("assembly rejects invalid arrangements and starved samples") {
    auto s = testsup::laleli();
    CHECK_THROWS_AS(assemble_contexts(s, {-1, false, false}), InvalidArrangement);
    CHECK_THROWS_AS(assemble_contexts(s, {6, true, false}), InvalidArrangement);
    CHECK_THROWS_AS(assemble_contexts(s, {1, false, true}), InvalidArrangement);
    CHECK_THROWS_AS(assemble_contexts(s, {0, true, true}), InvalidArrangement);

    auto starved = s;
    starved.poisoned_contexts.resize(2);
    CHECK_THROWS_AS(assemble_contexts(starved, {3, true, false}), NotEnoughPoisonedContexts);
}

TEST_CASE("assembly properties hold across randomized samples and arrangements") {
    std::mt19937 rng(20260816);
    for (int i = 0; i < 60; ++i) {
        ConflictSample s;
        s.id = "rand-" + std::to_string(i);
        s.question = "q?";
        s.correct_answer = "a";
        s.incorrect_answer = "b";
        int n_poisoned = 3 + static_cast<int>(rng() % 3);  // 3..5
        int n_factual = 1 + static_cast<int>(rng() % 3);   // 1..3
        for (int k = 0; k < n_poisoned; ++k) s.poisoned_contexts.push_back("P" + std::to_string(k));
        for (int k = 0; k < n_factual; ++k) s.factual_contexts.push_back("F" + std::to_string(k));

        ContextArrangement arr;
        arr.pcn = static_cast<int>(rng() % (n_poisoned + 1));
        arr.include_factual = (rng() % 2) == 0;
        arr.reorder = arr.include_factual && arr.pcn >= 1 && (rng() % 2) == 0;

        auto out = assemble_contexts(s, arr);
        INFO("pcn=", arr.pcn, " fc=", arr.include_factual, " ro=", arr.reorder);

        // Window size is fully determined by the arrangement.
        size_t expected_len =
            static_cast<size_t>(arr.pcn) + (arr.include_factual ? s.factual_contexts.size() : 0);
        CHECK(out.size() == expected_len);

        // Poisoned picks are a prefix of the corpus order; blocks keep their
        // internal order and only swap positions under reorder.
        std::vector<std::string> poisoned_block(s.poisoned_contexts.begin(),
                                                s.poisoned_contexts.begin() + arr.pcn);
        std::vector<std::string> expected;
        if (arr.include_factual && arr.reorder) {
            expected = s.factual_contexts;
            expected.insert(expected.end(), poisoned_block.begin(), poisoned_block.end());
        } else {
            expected = poisoned_block;
            if (arr.include_factual)
                expected.insert(expected.end(), s.factual_contexts.begin(),
                                s.factual_contexts.end());
        }
        CHECK(out == expected);

        // Reorder is a permutation: same multiset either way.
        if (arr.include_factual && arr.pcn >= 1) {
            auto flipped = arr;
            flipped.reorder = !arr.reorder;
            auto other = assemble_contexts(s, flipped);
            auto sorted_a = out;
            auto sorted_b = other;
            std::sort(sorted_a.begin(), sorted_a.end());
            std::sort(sorted_b.begin(), sorted_b.end());
            CHECK(sorted_a == sorted_b);
            CHECK(out != other);  // with distinct entries the order must differ
        }
    }
}

// ============================================================================
// Placeholder substitution
// ============================================================================

TEST_CASE("substitution resolves tokens exactly once") {
    CHECK(substitute("Q: {question}", {{"question", "why?"}}) == "Q: why?");

    // Values are not templates: braces inside them stay inert.
    CHECK(substitute("Q: {question}", {{"question", "has {context} inside"}}) ==
          "Q: has {context} inside");

    // Unknown brace tokens pass through untouched.
    CHECK(substitute("a {weird} b", {}) == "a {weird} b");

    // An unclosed brace is literal text.
    CHECK(substitute("tail {question", {{"question", "x"}}) == "tail {question");

    // Leaving a known placeholder unresolved is a hard error.
    CHECK_THROWS_AS(substitute("{question}", {}), TemplateViolation);
    CHECK_THROWS_AS(substitute("{answer}", {}), TemplateViolation);
    CHECK_THROWS_AS(substitute("{context}", {{"question", "x"}}), TemplateViolation);
}

// ============================================================================
// Concept parsing
// ============================================================================

TEST_CASE("concept lists parse from the bracketed quote grammar") {
    CHECK(parse_concepts("['a', 'b', 'c']") == std::vector<std::string>{"a", "b", "c"});
    CHECK(parse_concepts("Here: [\"Laleli Mosque\", \"Esma Sultan Mansion\"]") ==
          std::vector<std::string>{"Laleli Mosque", "Esma Sultan Mansion"});
    CHECK(parse_concepts("['x', 'y',]") == std::vector<std::string>{"x", "y"});  // trailing comma
    CHECK(parse_concepts("['a', \"b\"]") == std::vector<std::string>{"a", "b"});  // mixed quotes
    CHECK(parse_concepts("[' a ', 'b ']") == std::vector<std::string>{"a", "b"});  // trimming
    CHECK(parse_concepts("['a',\n 'b']") == std::vector<std::string>{"a", "b"});  // newlines ok

    // First bracket pair that is not a quote list is skipped, not fatal.
    CHECK(parse_concepts("see [1], then ['x']") == std::vector<std::string>{"x"});
}

TEST_CASE("concept lists deduplicate and cap") {
    CHECK(parse_concepts("['a', 'a', 'b']") == std::vector<std::string>{"a", "b"});

    std::string ten = "['c0','c1','c2','c3','c4','c5','c6','c7','c8','c9']";
    CHECK(parse_concepts(ten).size() == 8);
    CHECK(parse_concepts(ten, 2) == std::vector<std::string>{"c0", "c1"});
}

TEST_CASE("an explicitly empty list is its own failure mode") {
    CHECK_THROWS_AS(parse_concepts("[]"), EmptyConceptList);
    CHECK_THROWS_AS(parse_concepts("Sure: [  ]"), EmptyConceptList);
    CHECK_THROWS_AS(parse_concepts("[ '', ' ' ]"), EmptyConceptList);
}

TEST_CASE("fallback comma-split handles free-form responses") {
    CHECK(parse_concepts("alpha, beta, gamma") ==
          std::vector<std::string>{"alpha", "beta", "gamma"});
    CHECK(parse_concepts("just one concept") == std::vector<std::string>{"just one concept"});

    // Fragments over 80 characters are noise, not concepts.
    std::string longfrag(100, 'x');
    CHECK(parse_concepts("short, " + longfrag + ", tail") ==
          std::vector<std::string>{"short", "tail"});

    // Unterminated bracket degrades to the fallback.
    CHECK(parse_concepts("[broken") == std::vector<std::string>{"[broken"});

    // Unquoted bracket content also lands in the fallback, brackets and all.
    CHECK(parse_concepts("[alpha, beta]") == std::vector<std::string>{"[alpha", "beta]"});
}

TEST_CASE("no extractable concepts is a parse failure") {
    CHECK_THROWS_AS(parse_concepts(""), ConceptParseFailure);
    CHECK_THROWS_AS(parse_concepts(",,,"), ConceptParseFailure);
    CHECK_THROWS_AS(parse_concepts("   \n  "), ConceptParseFailure);
    CHECK_THROWS_AS(parse_concepts(std::string(200, 'x')), ConceptParseFailure);
}

TEST_CASE("format_concepts inverts parse_concepts") {
    std::vector<std::string> concepts = {"Laleli Mosque", "it's complicated", "plain"};
    std::string formatted = format_concepts(concepts);
    CHECK(parse_concepts(formatted) == concepts);

    CHECK(format_concepts({"a", "b"}) == "['a','b']");
    CHECK(format_concepts({"it's"}) == "[\"it's\"]");
    CHECK_THROWS_AS(format_concepts({"both ' and \" inside"}), ConceptParseFailure);

    // Fuzz: random quote-free concepts survive a full round trip.
    std::mt19937 rng(7);
    for (int i = 0; i < 40; ++i) {
        std::vector<std::string> xs;
        size_t n = 1 + rng() % 5;
        for (size_t k = 0; k < n; ++k)
            xs.push_back("concept " + std::to_string(rng() % 1000) + "-" + std::to_string(k));
        CHECK(parse_concepts(format_concepts(xs)) == xs);
    }
}

// ============================================================================
// CoT-PK session protocol
// ============================================================================

TEST_CASE("the three-part session walks concepts, prior knowledge, then critique") {
    auto s = testsup::laleli();
    ContextArrangement arr{2, true, false};

    auto t0 = render(PathKind::CoTPK, s, arr);
    REQUIRE(t0.turns.size() == 1);
    CHECK(t0.turns[0].text ==
          testsup::replace_all(testsup::read_golden("path_cot_pk_part1.txt"), "{question}",
                               s.question));

    // Part 1 answered with two concepts.
    std::string resp1 = "['Laleli Mosque', 'Esma Sultan Mansion']";
    auto step1 = plan_cot_pk_next(t0, resp1, s, arr);
    auto* t1 = std::get_if<PromptTranscript>(&step1);
    REQUIRE(t1 != nullptr);
    REQUIRE(t1->turns.size() == 3);
    CHECK(t1->turns[1].role == Role::Assistant);
    CHECK(t1->turns[1].text == resp1);
    CHECK(t1->turns[2].text ==
          testsup::replace_all(testsup::read_golden("path_cot_pk_part2.txt"), "{concept}",
                               "Laleli Mosque"));

    // First concept answered; second concept queried.
    std::string resp2 = "The Laleli Mosque is in the Laleli quarter of Fatih.";
    auto step2 = plan_cot_pk_next(*t1, resp2, s, arr);
    auto* t2 = std::get_if<PromptTranscript>(&step2);
    REQUIRE(t2 != nullptr);
    REQUIRE(t2->turns.size() == 5);
    CHECK(t2->turns[4].text ==
          testsup::replace_all(testsup::read_golden("path_cot_pk_part2.txt"), "{concept}",
                               "Esma Sultan Mansion"));

    // Second concept answered; Part 3 carries the contexts and question.
    std::string resp3 = "The Esma Sultan Mansion is in Ortakoy.";
    auto step3 = plan_cot_pk_next(*t2, resp3, s, arr);
    auto* t3 = std::get_if<PromptTranscript>(&step3);
    REQUIRE(t3 != nullptr);
    REQUIRE(t3->turns.size() == 7);
    std::string part3 = testsup::read_golden("path_cot_pk_part3.txt");
    part3 = testsup::replace_all(part3, "{context}", join(assemble_contexts(s, arr), "\n"));
    part3 = testsup::replace_all(part3, "{question}", s.question);
    CHECK(t3->turns[6].text == part3);

    // Part 3 answered: session complete, answer captured verbatim.
    std::string resp4 = "No. They are in different neighborhoods.";
    auto step4 = plan_cot_pk_next(*t3, resp4, s, arr);
    auto* done = std::get_if<CotPkCompleted>(&step4);
    REQUIRE(done != nullptr);
    CHECK(done->final_answer == resp4);
    REQUIRE(done->transcript.turns.size() == 8);
    CHECK(done->transcript.turns.back().role == Role::Assistant);
    CHECK(done->transcript.turns.back().text == resp4);

    // Stepping a finished session is a protocol violation both ways:
    // the transcript no longer awaits a response, and forcing an extra
    // user turn overruns the plan.
    CHECK_THROWS_AS(plan_cot_pk_next(done->transcript, "again", s, arr), ProtocolViolation);
    auto overrun = done->transcript;
    overrun.turns.push_back({Role::User, "one more"});
    CHECK_THROWS_AS(plan_cot_pk_next(overrun, "answer", s, arr), ProtocolViolation);
}

TEST_CASE("an empty concept list falls back to the question itself") {
    auto s = testsup::laleli();
    ContextArrangement arr{1, false, false};

    auto t0 = render(PathKind::CoTPK, s, arr);
    auto step1 = plan_cot_pk_next(t0, "[]", s, arr);
    auto* t1 = std::get_if<PromptTranscript>(&step1);
    REQUIRE(t1 != nullptr);
    CHECK(t1->turns[2].text ==
          testsup::replace_all(testsup::read_golden("path_cot_pk_part2.txt"), "{concept}",
                               s.question));

    // One pseudo-concept, so the next step is already Part 3.
    auto step2 = plan_cot_pk_next(*t1, "Some recalled knowledge.", s, arr);
    auto* t2 = std::get_if<PromptTranscript>(&step2);
    REQUIRE(t2 != nullptr);
    CHECK(t2->turns[4].text.find("Retrieved Contexts:") != std::string::npos);
}

TEST_CASE("an unusable part-1 response propagates as a parse failure") {
    auto s = testsup::laleli();
    ContextArrangement arr{1, false, false};
    auto t0 = render(PathKind::CoTPK, s, arr);
    CHECK_THROWS_AS(plan_cot_pk_next(t0, "", s, arr), ConceptParseFailure);
}

TEST_CASE("a transcript not awaiting a response cannot be stepped") {
    auto s = testsup::laleli();
    ContextArrangement arr{1, false, false};
    PromptTranscript empty;
    CHECK_THROWS_AS(plan_cot_pk_next(empty, "x", s, arr), ProtocolViolation);

    PromptTranscript ends_assistant;
    ends_assistant.turns.push_back({Role::User, "hi"});
    ends_assistant.turns.push_back({Role::Assistant, "hello"});
    CHECK_THROWS_AS(plan_cot_pk_next(ends_assistant, "x", s, arr), ProtocolViolation);
}

// ============================================================================
// Base-rendering recognizer
// ============================================================================

TEST_CASE("the recognizer inverts base renderings") {
    auto s = testsup::laleli();
    for (ContextArrangement arr : {ContextArrangement{2, true, false},
                                   ContextArrangement{1, true, true},
                                   ContextArrangement{3, false, false},
                                   ContextArrangement{0, true, false}}) {
        auto text = render(PathKind::Base, s, arr).turns[0].text;
        auto parts = parse_base_rendering(text);
        REQUIRE(parts.has_value());
        CHECK(parts->question == s.question);
        CHECK(join(parts->contexts, "\n") == join(assemble_contexts(s, arr), "\n"));
    }
}

TEST_CASE("a context that embeds a fake query line does not confuse the recognizer") {
    auto s = testsup::laleli();
    s.poisoned_contexts[0] = "Sneaky text.\nQuery: fake question?";
    auto text = render(PathKind::Base, s, {1, true, false}).turns[0].text;
    auto parts = parse_base_rendering(text);
    REQUIRE(parts.has_value());
    CHECK(parts->question == s.question);
}

TEST_CASE("the recognizer rejects everything that is not a base rendering") {
    auto s = testsup::laleli();
    CHECK_FALSE(parse_base_rendering(render(PathKind::DG, s, {0, false, false}).turns[0].text));
    CHECK_FALSE(parse_base_rendering(render(PathKind::Tips, s, {1, true, false}).turns[0].text));
    CHECK_FALSE(
        parse_base_rendering(render(PathKind::BaseCoT, s, {1, true, false}).turns[0].text));
    CHECK_FALSE(parse_base_rendering(""));
    CHECK_FALSE(parse_base_rendering("Contexts:\nfoo\nAnswer:"));

    auto good = render(PathKind::Base, s, {1, true, false}).turns[0].text;
    CHECK_FALSE(parse_base_rendering(good + " trailing junk"));
}

// ============================================================================
// Path kind bookkeeping
// ============================================================================

TEST_CASE("path kinds round-trip through their names") {
    for (PathKind p : all_path_kinds()) {
        CHECK(parse_path_kind(path_kind_str(p)) == p);
    }
    CHECK(all_path_kinds().size() == 6);
    CHECK_THROWS_AS(parse_path_kind("NoSuchPath"), MalformedDocument);
    CHECK_FALSE(takes_contexts(PathKind::DG));
    CHECK(takes_contexts(PathKind::CoTPK));
}
