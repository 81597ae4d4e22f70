#pragma once

// Preference-pair construction: instruction-following pairs, factuality
// pairs (max-min, enumeration, composite) and biography FS pairs, plus the
// DPO dataset writer.

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "factalign/core.hpp"

namespace factalign::pairs {

inline constexpr double kIfGap = 0.5;
inline constexpr double kEnumBand = 0.2;
inline constexpr double kCompositeIfWeight = 1.0;
inline constexpr double kCompositeFactWeight = 5.0;
/// Slack when comparing a computed difference against a threshold.
inline constexpr double kThresholdTolerance = 1e-9;

/// One sampled response with whatever rewards it received. Position in the
/// candidate list is the response index used for tie-breaking.
struct Candidate {
    std::string response_id;
    std::optional<double> if_mean;     // absent: judge failure
    std::optional<double> fact_value;  // absent: zero facts
};

enum class DiscardReason { tied_reward, if_gap_exceeded, below_band, unscoreable, judge_failure };
std::string_view to_string(DiscardReason r);
DiscardReason parse_discard_reason(std::string_view s);

struct Discard {
    std::string instruction_id;
    DiscardReason reason = DiscardReason::tied_reward;
    bool operator==(const Discard&) const = default;
};

struct PairBatch {
    std::vector<PreferencePair> pairs;
    /// One entry per candidate instruction that contributed no pair.
    std::vector<Discard> discarded;
    /// Per-pair rejections inside enumeration builders, by reason.
    std::map<DiscardReason, std::size_t> rejected_pairs;

    void append(PairBatch&& other);
    /// Number of distinct instructions with at least one pair.
    [[nodiscard]] std::size_t paired_instructions() const;
};

struct PairingParams {
    double if_gap = kIfGap;
    double enum_band = kEnumBand;
    double if_weight = kCompositeIfWeight;
    double fact_weight = kCompositeFactWeight;

    void validate() const;
};

/// Max/min judge mean; exact ties discarded. Candidates without a judge
/// score are skipped; fewer than two left is a judge_failure discard.
PairBatch build_if_pairs(const std::string& instruction_id, std::span<const Candidate> candidates);

/// Max/min fact value among candidates scoreable on both channels; discarded
/// on an exact tie or when the judge means differ by more than the IF gap.
PairBatch build_fact_pairs_maxmin(const std::string& instruction_id, std::span<const Candidate> candidates,
                                  const PairingParams& params = {});

/// Every unordered pair whose fact values differ by at least the band and
/// whose judge means differ by no more than the IF gap.
PairBatch build_fact_pairs_enum(const std::string& instruction_id, std::span<const Candidate> candidates,
                                const PairingParams& params = {});

double composite_reward(double if_mean, double fact_value, const PairingParams& params = {});

/// Max/min composite reward; exact ties discarded; no IF-gap filter.
PairBatch build_composite_pairs(const std::string& instruction_id, std::span<const Candidate> candidates,
                                const PairingParams& params = {});

/// All C(n,2) pairs of generations for one entity; the strictly higher FS is
/// positive and exact ties are dropped. Generations without an FS are left
/// out; throws std::invalid_argument for fewer than two generations.
PairBatch build_bio_fs_pairs(const std::string& instruction_id, std::span<const std::string> response_ids,
                             std::span<const std::optional<double>> fs_values);

enum class Strategy { max_min, enumeration, composite };
std::string_view to_string(Strategy s);
Strategy parse_strategy(std::string_view s);

/// Dispatches to the factuality builder for `strategy`.
PairBatch build_fact_pairs(Strategy strategy, const std::string& instruction_id, std::span<const Candidate> candidates,
                           const PairingParams& params = {});

struct Reference {
    std::size_t if_pairs = 18454;
    std::size_t fact_pairs = 3315;
};

struct AssemblyInput {
    std::optional<PairBatch> if_batch;
    std::optional<PairBatch> fact_batch;
    std::optional<PairBatch> bio_batch;
    std::map<std::string, Instruction> instructions;
    std::map<std::string, Response> responses;
    std::vector<std::string> sft_files;
    std::size_t if_candidates = 0;
    std::size_t fact_candidates = 0;
};

struct AssemblyOutput {
    std::vector<std::filesystem::path> files;  // everything written, manifest and summary included
    TrainingManifest manifest;
    Json summary;
};

/// Writes dpo_if.jsonl / dpo_fact.jsonl (and dpo_bio.jsonl when given) into
/// `dir`, a training manifest and a pair-count summary. A kind with no pairs
/// gets no file. Throws std::invalid_argument when there are no pairs at all.
AssemblyOutput assemble_dpo_dataset(const AssemblyInput& input, const std::filesystem::path& dir,
                                    TrainingManifest base = {});

Json summarize(const PairBatch& batch, std::size_t candidates);

}  // namespace factalign::pairs
