#include <doctest.h>

#include <fstream>

#include "factalign/prompts.hpp"
#include "tmpdir.hpp"

using namespace factalign;
using namespace factalign::prompts;

TEST_CASE("placeholders in order of first appearance") {
    CHECK(placeholders("{b} x {a} {b} {not valid} {}") == std::vector<std::string>{"b", "a"});
}

TEST_CASE("render substitutes without rescanning") {
    CHECK(render("Q: {q}\nA:", {{"q", "what is {q}?"}}) == "Q: what is {q}?\nA:");
    CHECK(render("json {\"k\": 1} {x}", {{"x", "y"}}) == "json {\"k\": 1} y");
    CHECK_THROWS_AS(render("{missing}", {}), std::invalid_argument);
}

TEST_CASE("built-in templates carry their placeholders") {
    const PromptLibrary lib;
    CHECK(placeholders(lib.get(kInstructionClassifier).text) == std::vector<std::string>{"instruction"});
    CHECK(placeholders(lib.get(kClaimClassifier).text) == std::vector<std::string>{"instruction", "sentence"});
    CHECK(placeholders(lib.get(kFactCheck).text) == std::vector<std::string>{"supports", "claim"});
    CHECK(placeholders(lib.get(kAtomicFacts).text) == std::vector<std::string>{"sentence"});
    CHECK(placeholders(lib.get(kSelfRewarding).text) == std::vector<std::string>{"instruction", "response"});
    CHECK(placeholders(lib.get(kRerank).text) == std::vector<std::string>{"query", "title", "text"});
    CHECK_THROWS_AS(lib.get("nonexistent"), std::out_of_range);
}

TEST_CASE("overrides: highest version wins and the digest changes") {
    testing::TempDir dir;
    std::ofstream(dir / "fact_check.v2.txt") << "v2 {supports} {claim}";
    std::ofstream(dir / "fact_check.v3.txt") << "v3 {supports} {claim}";
    std::ofstream(dir / "README.md") << "ignored";
    PromptLibrary lib;
    const auto before = lib.digest();
    lib.load_overrides(dir.path());
    CHECK(lib.get(kFactCheck).version == 3);
    CHECK(lib.get(kFactCheck).text == "v3 {supports} {claim}");
    CHECK(lib.get(kAtomicFacts).version == 1);
    CHECK(lib.digest() != before);
}
