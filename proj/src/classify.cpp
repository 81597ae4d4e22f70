#include "factalign/classify.hpp"

#include <algorithm>
#include <cctype>

#include <spdlog/spdlog.h>

#include "factalign/parallel.hpp"
#include "factalign/prompts.hpp"

namespace factalign::classify {

std::string_view to_string(Label l) { return l == Label::fact_based ? "fact_based" : "non_fact_based"; }

InstructionKind to_kind(Label l) {
    return l == Label::fact_based ? InstructionKind::fact_based : InstructionKind::non_fact_based;
}

std::optional<Label> parse_label(std::string_view reply) {
    std::string lower(reply);
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    // "fact based" without the hyphen is accepted as well.
    std::size_t pos = std::string::npos;
    for (std::string_view token : {"fact-based", "fact based"}) {
        pos = std::min(pos, lower.find(token));
    }
    if (pos == std::string::npos) return std::nullopt;
    const std::string_view before = std::string_view(lower).substr(0, pos);
    for (std::string_view neg : {"not ", "non-", "non ", "not-"}) {
        if (before.ends_with(neg)) return Label::non_fact_based;
    }
    return Label::fact_based;
}

Classifier::Classifier(llm::Gateway& gateway, ClassifierConfig config)
    : gateway_(gateway), config_(std::move(config)) {}

ClassifierVerdict Classifier::ask(const std::string& prompt) const {
    const auto replies = gateway_.cached_complete(
        llm::ChatRequest::user_prompt(config_.backend_id, config_.model, prompt, SamplingParams::greedy()));
    ClassifierVerdict v;
    if (replies.empty() || !replies.front().ok()) {
        spdlog::warn("classifier: backend produced no reply; routing as fact_based");
        return v;
    }
    v.raw_text = replies.front().text;
    if (auto label = parse_label(v.raw_text)) {
        v.label = *label;
        v.parse_ok = true;
    }
    return v;
}

ClassifierVerdict Classifier::classify_instruction(const Instruction& x) const {
    return ask(prompts::render(config_.instruction_template, {{"instruction", x.text}}));
}

ClassifierVerdict Classifier::classify_sentence(std::string_view sentence, std::string_view context_instruction) const {
    if (trim(sentence).empty()) return ClassifierVerdict{Label::non_fact_based, "", true};
    return ask(prompts::render(config_.sentence_template, {{"instruction", std::string(context_instruction)},
                                                           {"sentence", std::string(trim(sentence))}}));
}

std::vector<ClassifierVerdict> classify_all(const Classifier& classifier, std::span<Instruction> instructions,
                                            std::size_t workers, ClassificationSummary* summary) {
    std::vector<ClassifierVerdict> verdicts(instructions.size());
    parallel_for(instructions.size(), workers,
                 [&](std::size_t i) { verdicts[i] = classifier.classify_instruction(instructions[i]); });
    ClassificationSummary s;
    for (std::size_t i = 0; i < instructions.size(); ++i) {
        instructions[i].kind = to_kind(verdicts[i].label);
        if (!verdicts[i].parse_ok) ++s.parse_failures;
        if (verdicts[i].label == Label::fact_based) {
            ++s.fact_based;
        } else {
            ++s.non_fact_based;
        }
    }
    spdlog::info("classify: {} fact-based, {} non-fact-based ({} parse failures routed as fact-based)", s.fact_based,
                 s.non_fact_based, s.parse_failures);
    if (summary) *summary = s;
    return verdicts;
}

}  // namespace factalign::classify
