#pragma once

// Versioned prompt templates with named {placeholder} substitution. The
// templates under prompts/ are compiled in; a directory of files named
// <name>.v<version>.txt can override them at run time.

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace factalign::prompts {

inline constexpr std::string_view kInstructionClassifier = "instruction_classifier";
inline constexpr std::string_view kClaimClassifier = "claim_classifier";
inline constexpr std::string_view kFactCheck = "fact_check";
inline constexpr std::string_view kAtomicFacts = "atomic_facts";
inline constexpr std::string_view kSelfRewarding = "self_rewarding";
inline constexpr std::string_view kRerank = "rerank";

struct PromptTemplate {
    std::string name;
    int version = 1;
    std::string text;
};

/// Placeholder names ({identifier}) in order of first appearance.
std::vector<std::string> placeholders(std::string_view tmpl);

/// Substitutes every placeholder. Throws std::invalid_argument when a
/// placeholder has no value. Substituted values are not re-scanned.
std::string render(std::string_view tmpl, const std::map<std::string, std::string>& vars);

class PromptLibrary {
  public:
    /// Built-in templates.
    PromptLibrary();

    /// Replaces templates with files from `dir`; for each name the highest
    /// version present wins.
    void load_overrides(const std::filesystem::path& dir);

    /// Throws std::out_of_range for an unknown name.
    [[nodiscard]] const PromptTemplate& get(std::string_view name) const;

    /// Digest over every (name, version, text); changes whenever a template does.
    [[nodiscard]] std::string digest() const;

  private:
    std::map<std::string, PromptTemplate, std::less<>> templates_;
};

}  // namespace factalign::prompts
