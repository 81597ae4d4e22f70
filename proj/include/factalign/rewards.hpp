#pragma once

// The two reward channels. RM_IF is an LLM judge score averaged over three
// samples; RM_fact splits a response into sentences, decomposes them into
// atomic facts, verifies each fact against retrieved passages and reports
// the supported proportion.

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "factalign/classify.hpp"
#include "factalign/core.hpp"
#include "factalign/llm_gateway.hpp"
#include "factalign/prompts.hpp"
#include "factalign/retrieval.hpp"

namespace factalign::rewards {

inline constexpr int kJudgeSamples = 3;

struct Sentence {
    std::size_t index = 0;
    /// Exact slice of the input, trailing whitespace included (the first
    /// sentence also owns any leading whitespace).
    std::string text;
    std::optional<bool> fact_based;

    [[nodiscard]] std::string_view content() const { return trim(text); }
};

/// Rule-based splitter. Joining the texts of the result reproduces the input.
std::vector<Sentence> split_sentences(std::string_view text);

/// Abbreviations (without their final period) that never end a sentence.
std::span<const std::string_view> abbreviations();

struct ModelRef {
    std::string backend_id;
    std::string model;
};

/// Everything the scorers need to talk to models.
struct RewardEnv {
    llm::Gateway& gateway;
    const prompts::PromptLibrary& prompts;
    ModelRef decomposer;
    ModelRef verifier;
    ModelRef judge;
    std::optional<std::int64_t> seed;
};

struct Decomposition {
    std::vector<std::string> facts;
    bool parse_error = false;
    std::string raw_reply;
};

/// Reads "- fact" lines. NONE (or an empty list marker) means no facts; a
/// reply without any dash line is a parse error and yields no facts.
Decomposition parse_fact_list(std::string_view reply);

Decomposition decompose_facts(std::string_view sentence, const RewardEnv& env);

struct VerificationRecord {
    std::string fact_text;
    std::vector<std::string> supports_used;  // doc ids in prompt order
    Verdict verdict = Verdict::parse_error;
    std::string raw_reply;
};

/// Leading True/False token, case-insensitive; anything else is parse_error.
Verdict parse_verdict_reply(std::string_view reply);

/// "Title: ...\nText: ..." blocks separated by blank lines, in rank order.
std::string render_supports(std::span<const Passage> supports);

/// At most ten supports are presented. Backend failure yields parse_error.
VerificationRecord verify_claim(std::string_view fact, std::span<const Passage> supports, const RewardEnv& env);

enum class FactUnit { atomic, sentence };
std::string_view to_string(FactUnit u);
FactUnit parse_fact_unit(std::string_view s);

struct FactRewardOptions {
    bool sentence_filter = false;
    FactUnit unit = FactUnit::atomic;
    std::size_t m_supports = retrieval::kDefaultSupports;
    std::size_t k_retrieve = retrieval::kDefaultRetrieveK;
};

struct FactRewardDetail {
    FactReward reward;
    std::vector<Sentence> sentences;
    std::vector<std::size_t> decomposition_failures;  // sentence indices
    std::vector<VerificationRecord> verifications;    // aligned with reward.per_fact
};

/// Scores responses against one retrieval index. Supports are fetched once
/// per instruction (queried with the instruction text) and reused for all of
/// its responses and facts. Safe to call from several threads.
class FactScorer {
  public:
    FactScorer(const RewardEnv& env, const retrieval::LexicalIndex& index, retrieval::Reranker& reranker,
               FactRewardOptions options = {}, const classify::Classifier* sentence_classifier = nullptr);

    FactRewardDetail score(const Response& response, const Instruction& instruction);

    std::vector<Passage> supports_for(const Instruction& instruction);

    [[nodiscard]] const FactRewardOptions& options() const noexcept { return options_; }

  private:
    const RewardEnv& env_;
    const retrieval::LexicalIndex& index_;
    retrieval::Reranker& reranker_;
    FactRewardOptions options_;
    const classify::Classifier* sentence_classifier_;
    std::mutex mu_;
    std::map<std::string, std::vector<Passage>> supports_;
};

/// Atomic-unit factuality reward with the given options.
FactReward fact_reward(const Response& response, const Instruction& instruction, const RewardEnv& env,
                       const retrieval::LexicalIndex& index, retrieval::Reranker& reranker,
                       FactRewardOptions options = {}, const classify::Classifier* sentence_classifier = nullptr);

/// Each sentence is checked directly; a false sentence counts as one error.
FactReward sentence_level_reward(const Response& response, const Instruction& instruction, const RewardEnv& env,
                                 const retrieval::LexicalIndex& index, retrieval::Reranker& reranker,
                                 std::size_t m_supports = retrieval::kDefaultSupports);

struct JudgeOutcome {
    std::optional<JudgeScore> score;  // absent: every sample failed to parse
    std::vector<std::string> raw_replies;
    std::size_t parse_failures = 0;
};

JudgeOutcome if_judge(const Instruction& instruction, const Response& response, const RewardEnv& env,
                      int samples = kJudgeSamples);

}  // namespace factalign::rewards
