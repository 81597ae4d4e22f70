#pragma once

// Knowledge elicitation from a base model: few-shot prompt assembly (plain
// and retrieval-augmented), multi-sample generation, and SFT dataset
// construction with Human/PT routing.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "factalign/core.hpp"
#include "factalign/llm_gateway.hpp"

namespace factalign::elicit {

/// Sentinel line closing every demo response. Generation is cut at the first
/// boundary marker so the base model cannot run on into an invented demo.
inline constexpr std::string_view kDemoBoundary = "### END";
inline constexpr std::string_view kInstructionHeader = "### Instruction:";
inline constexpr std::string_view kResponseHeader = "### Response:";
inline constexpr std::string_view kPassageHeader = "### Passage:";

inline constexpr int kSftSamples = 10;
inline constexpr int kDpoSamples = 4;
inline constexpr std::size_t kRagTargetPassages = 10;

struct Demo {
    std::string instruction_id;
    std::string instruction;
    std::string response;
    std::optional<Passage> support;  // RAG prompts only: the demo's top-1 passage
};

struct FewShotPrompt {
    std::vector<Demo> demos;  // most similar last
    std::string target_id;
    std::string target_instruction;
    std::optional<std::vector<Passage>> rag_supports;

    /// Deterministic rendering; with no demos and no supports the prompt is
    /// the bare target instruction.
    [[nodiscard]] std::string render() const;
};

struct SeedPair {
    Instruction instruction;
    std::string response;  // human
};

/// Demos are the k seeds most similar to `x` (BM25 over seed texts), with
/// `x` itself excluded by id, rendered nearest-last. Requires
/// k <= |seed_pairs without x|.
FewShotPrompt build_fewshot_prompt(const Instruction& x, std::span<const SeedPair> seed_pairs, std::size_t k);

/// Target block gets up to ten supports; each demo keeps its own top-1
/// support. Passages are not deduplicated across blocks.
FewShotPrompt build_rag_prompt(const Instruction& x, std::vector<Passage> supports, std::vector<Demo> demos);

/// Cuts a generation at the first demo boundary or instruction header and
/// trims surrounding whitespace.
std::string truncate_at_boundary(std::string_view generated);

struct GenerationTarget {
    std::string backend_id;
    std::string model;
};

struct SampleFailure {
    int sample_index = 0;
    std::string reason;
};

struct SampleResult {
    std::vector<Response> responses;  // sample-index order
    std::vector<SampleFailure> failures;
    [[nodiscard]] bool failed() const noexcept { return responses.empty(); }
};

/// n samples of one prompt (the prompt is rendered once and reused). Origin
/// is pt_rag when the prompt carries supports, pt_fewshot otherwise.
SampleResult sample_responses(const FewShotPrompt& prompt, int n, SamplingParams sampling, llm::Gateway& gateway,
                              const GenerationTarget& target);

/// n samples from an aligned chat model given the bare instruction.
SampleResult sample_policy_responses(const Instruction& x, int n, SamplingParams sampling, llm::Gateway& gateway,
                                     const GenerationTarget& target);

enum class Route { human_response, pt_response };
enum class SftPolicy { classifier, no_classifier };

std::string_view to_string(Route r);
std::string_view to_string(SftPolicy p);
SftPolicy parse_sft_policy(std::string_view s);

struct SftExample {
    std::string instruction_id;
    std::string response_id;
    Route route = Route::human_response;
    /// Probability of drawing this example when the trainer samples one
    /// example for its instruction.
    double sampler_weight = 1.0;
};

struct SftBuild {
    std::vector<SftExample> examples;
    std::vector<std::string> excluded;  // fact-based instructions with no PT sample
};

/// classifier policy: non-fact-based -> the human response; fact-based -> one
/// example per PT sample. no_classifier policy: every instruction gets its
/// human example plus all PT examples, weighted so Human and PT are drawn
/// with equal probability.
SftBuild build_sft_dataset(std::span<const SeedRecord> classified_seed,
                           const std::map<std::string, std::vector<Response>>& pt_samples, SftPolicy policy);

/// SftExample joined with its texts; the sft_dataset.jsonl row.
struct SftRecord {
    SftExample example;
    std::string instruction;
    std::string response;
};

void to_json(Json& j, const SftRecord& v);
void from_json(const Json& j, SftRecord& v);
// Found by argument-dependent lookup from load_dataset / save_dataset.
std::string record_key(const SftRecord& v);
void validate_record(const SftRecord& v);

}  // namespace factalign::elicit
