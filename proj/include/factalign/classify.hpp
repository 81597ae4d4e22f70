#pragma once

// Prompted binary classifiers: fact-based instruction detection (routing) and
// fact-based sentence detection (reward ablation).

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "factalign/core.hpp"
#include "factalign/llm_gateway.hpp"

namespace factalign::classify {

enum class Label { fact_based, non_fact_based };

std::string_view to_string(Label l);

struct ClassifierVerdict {
    Label label = Label::fact_based;
    std::string raw_text;
    /// false: the reply had no recognizable label and `label` holds the
    /// routing default (fact_based), not a model decision.
    bool parse_ok = false;
};

/// First occurrence of "fact-based" in the reply (case-insensitive), read as
/// non-fact-based when directly preceded by "not " or "non-".
std::optional<Label> parse_label(std::string_view reply);

struct ClassifierConfig {
    std::string backend_id;
    std::string model;
    std::string instruction_template;  // placeholder {instruction}
    std::string sentence_template;     // placeholders {instruction}, {sentence}
};

class Classifier {
  public:
    Classifier(llm::Gateway& gateway, ClassifierConfig config);

    /// Greedy, single sample. Parse failure routes as fact_based.
    ClassifierVerdict classify_instruction(const Instruction& x) const;

    /// Empty (after trimming) sentences are non_fact_based without a call.
    ClassifierVerdict classify_sentence(std::string_view sentence, std::string_view context_instruction) const;

  private:
    ClassifierVerdict ask(const std::string& prompt) const;

    llm::Gateway& gateway_;
    ClassifierConfig config_;
};

InstructionKind to_kind(Label l);

struct ClassificationSummary {
    std::size_t fact_based = 0;
    std::size_t non_fact_based = 0;
    std::size_t parse_failures = 0;
};

/// Classifies every instruction in place (sets `kind`) and returns the
/// per-instruction verdicts in input order.
std::vector<ClassifierVerdict> classify_all(const Classifier& classifier, std::span<Instruction> instructions,
                                            std::size_t workers, ClassificationSummary* summary = nullptr);

}  // namespace factalign::classify
