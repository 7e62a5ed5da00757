#pragma once

#include <string_view>
#include <utility>
#include <vector>

// ============================================================================
// Prompt templates
// ============================================================================
//
// These texts are frozen verbatim, quirks included: CoT-NoPK's step lines
// carry no trailing periods while Part 3's first step does, and Part 2 ends
// its refusal sentence with a stray `."` . Golden copies live under
// tests/golden/ and the suite diffs the two, so any edit here trips a test.
//
// Placeholders: {context} {question} {concept} {correct_answer} {s_answer}
// {answer}. Substitution is single-pass (see prompt_paths.hpp), so braces
// inside the substituted values are never re-expanded.

namespace dialign::templates {

inline constexpr std::string_view kDirectGenerate =
    R"(Answer the following question, your answer should be short and concise. If you cannot find the answer to the question, just say "I don't know".
Question: {question}
Answer:)";

inline constexpr std::string_view kBase =
    R"(Below is a query from a user and some relevant contexts. Answer the question given the information in those contexts. Your answer should be short and concise. If you cannot find the answer to the question, just say "I don't know".
Contexts:
{context}
Query: {question}
Answer:)";

inline constexpr std::string_view kTips =
    R"(Below is a query from a user and some relevant contexts. The contexts might be correct or incorrect. Answer the question given the information in those contexts. Your answer should be short and concise. If you cannot find the answer to the question, just say "I don't know".
Contexts:
{context}
Query: {question}
Answer:)";

inline constexpr std::string_view kBaseCot =
    R"(Below is a query from a user and some relevant contexts. The contexts might be correct or incorrect. Answer the question given the information in those contexts, *slow down, take a breath, and think step by step*. Your answer should be short and concise. If you cannot find the answer to the question, just say "I don't know".
Contexts:
{context}
Query: {question}
Answer:)";

inline constexpr std::string_view kCotNoPk =
    R"(Below is a query from a user and some relevant contexts. Answer the question given the information in those contexts, follow the steps below:
Step 1: Judge the accuracy of the content based on what you know to prevent being misled by incorrect data
Step 2: Decide whether or not you want to refer to these elements in your answer
Step 3: Give the correct answer to the following question
Contexts:
{context}
Query: {question}
Answer:)";

inline constexpr std::string_view kCotPkPart1 =
    R"(Your task is to extract the key concepts in the given question. Extract only the most important and atomistic concepts, if needed break the concepts down to the simpler concepts.
Question: {question}
Now give me the concepts you have extracted from the question as the format ['concept1','concept2',...]:)";

inline constexpr std::string_view kCotPkPart2 =
    R"(You are a knowledge-exploiting AI assistant, you need to give correct and detailed information to the concepts, if you are not sure or don't know about the concepts, PLEASE JUST say "I don't know"."
Now tell me what you know about {concept}:)";

inline constexpr std::string_view kCotPkPart3 =
    R"(Below is a query from a user and some relevant contexts. Your task is to critique the given retrieved contexts and answer the question correctly.
Retrieved Contexts:
{context}
Answer the question follow the steps below:
Step 1: Judge the accuracy of the content based on what you know above to prevent being misled by incorrect data.
Step 2: Decide whether or not you want to refer to these elements in your answer
Step 3: Give the correct answer to the following question
Question: {question}
Answer:)";

inline constexpr std::string_view kJudgeSystem =
    R"(You are a marking expert, please judge whether the student's answer is correct or not based on the question and the correct answer I have given. Output "True" if it is correct and "False" if it is wrong.)";

inline constexpr std::string_view kJudgeUser =
    R"(Question: {question}
Correct Answer: {correct_answer}
Student's Answer: {s_answer}
Now Give Your Judgment about Student's Answer (Only True or False):)";

inline constexpr std::string_view kRevision =
    R"(Rewrite the following step-by-step answer as a short, natural explanation. Keep the final answer exactly the same. Do not add new information.
Answer:
{answer})";

/// The refusal phrase every answering template instructs the model to use.
inline constexpr std::string_view kRefusalSentinel = "I don't know";

struct NamedTemplate {
    std::string_view name;
    std::string_view text;
};

/// Every template, keyed by the basename its golden copy uses. The order is
/// the dump-templates output order.
inline const std::vector<NamedTemplate>& all_templates() {
    static const std::vector<NamedTemplate> all = {
        {"path_dg", kDirectGenerate},
        {"path_base", kBase},
        {"path_tips", kTips},
        {"path_base_cot", kBaseCot},
        {"path_cot_nopk", kCotNoPk},
        {"path_cot_pk_part1", kCotPkPart1},
        {"path_cot_pk_part2", kCotPkPart2},
        {"path_cot_pk_part3", kCotPkPart3},
        {"judge_system", kJudgeSystem},
        {"judge_user", kJudgeUser},
        {"revision", kRevision},
    };
    return all;
}

}  // namespace dialign::templates
