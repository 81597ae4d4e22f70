#include <doctest.h>

#include <random>

#include "factalign/prompts.hpp"
#include "factalign/retrieval.hpp"
#include "factalign/rewards.hpp"
#include "fn_backend.hpp"

using namespace factalign;
using namespace factalign::rewards;
using testing::FnBackend;

namespace {

std::vector<std::string> contents(std::string_view text) {
    std::vector<std::string> out;
    for (const auto& s : split_sentences(text)) out.emplace_back(s.content());
    return out;
}

std::string between(const std::string& s, const std::string& a, const std::string& b) {
    const auto i = s.find(a);
    if (i == std::string::npos) return {};
    const auto j = s.find(b, i + a.size());
    return s.substr(i + a.size(), j - i - a.size());
}

// Decomposes on ";" and calls a claim true when it contains "ok".
std::optional<std::string> scripted(const std::string& prompt, int i) {
    if (prompt.find("Score:") != std::string::npos || prompt.find("<response>") != std::string::npos) {
        const auto resp = between(prompt, "<response>", "</response>");
        if (resp.find("silent") != std::string::npos) return "no idea";
        if (resp.find("flaky") != std::string::npos && i == 1) return std::nullopt;
        return "Reasoning...\nScore: " + std::to_string(3 + i % 2);
    }
    if (prompt.find("True or False?") != std::string::npos) {
        const auto claim = between(prompt, "Input: ", " True or False?");
        if (claim.find("garbled") != std::string::npos) return "Perhaps";
        return claim.find("ok") != std::string::npos ? "True" : "False";
    }
    const auto sentence = std::string(trim(prompt.substr(prompt.rfind("Sentence: ") + 10)));
    if (sentence.find("Hello") != std::string::npos) return "NONE";
    if (sentence.find("weird") != std::string::npos) return "I cannot do that";
    std::string out;
    std::size_t start = 0;
    while (start <= sentence.size()) {
        auto end = sentence.find(';', start);
        if (end == std::string::npos) end = sentence.size();
        out += "- " + std::string(trim(sentence.substr(start, end - start))) + "\n";
        start = end + 1;
    }
    return out;
}

struct Fixture {
    prompts::PromptLibrary lib;
    llm::Gateway gw;
    std::shared_ptr<FnBackend> backend = std::make_shared<FnBackend>(scripted);
    RewardEnv env{gw, lib, {"b", "m"}, {"b", "m"}, {"b", "m"}, 5};
    retrieval::LexicalIndex index = retrieval::LexicalIndex::build(
        retrieval::Corpus::from_passages({{"d1", "Newton", "Isaac Newton was a physicist.", 0, {}}}));
    retrieval::IdentityReranker identity;
    Instruction x = Instruction::make("Tell me about Isaac Newton", InstructionSource::augmented,
                                      InstructionKind::fact_based);

    Fixture() { gw.register_backend("b", backend); }

    Response response(const std::string& text) {
        Response r;
        r.instruction_id = x.id;
        r.text = text;
        r.origin = ResponseOrigin::sft_model;
        r.id = Response::make_id(x.id, r.origin, 0, text);
        return r;
    }
};

}  // namespace

TEST_CASE("splitter basics") {
    CHECK(contents("One. Two! Three?") == std::vector<std::string>{"One.", "Two!", "Three?"});
    CHECK(contents("Dr. Smith arrived. He sat.") == std::vector<std::string>{"Dr. Smith arrived.", "He sat."});
    CHECK(contents("J. R. R. Tolkien wrote it. Yes.") ==
          std::vector<std::string>{"J. R. R. Tolkien wrote it.", "Yes."});
    CHECK(contents("It costs 3.5 dollars. Cheap.") == std::vector<std::string>{"It costs 3.5 dollars.", "Cheap."});
    CHECK(contents("He said \"Stop.\" Then left.") == std::vector<std::string>{"He said \"Stop.\"", "Then left."});
    CHECK(contents("Items:\n- one\n- two") == std::vector<std::string>{"Items:", "- one", "- two"});
    CHECK(contents("Para one\n\nPara two") == std::vector<std::string>{"Para one", "Para two"});
    CHECK(contents("lowercase. after period") == std::vector<std::string>{"lowercase. after period"});
    CHECK(split_sentences("").empty());
    CHECK(std::find(abbreviations().begin(), abbreviations().end(), "Mr") != abbreviations().end());
}

TEST_CASE("splitter reconstructs its input") {
    std::mt19937_64 rng(8);
    const char* pieces[] = {"Ab", " ", ". ", "?", "\n", "\n\n", "Mr.", "\"", "“", "”", "1.", "x", "é"};
    for (int t = 0; t < 300; ++t) {
        std::string text;
        for (int i = 0; i < 30; ++i) text += pieces[rng() % std::size(pieces)];
        std::string joined;
        std::size_t idx = 0;
        for (const auto& s : split_sentences(text)) {
            CHECK(s.index == idx++);
            joined += s.text;
        }
        CHECK(joined == text);
    }
}

TEST_CASE("fact list parsing") {
    const auto d = parse_fact_list("Here are the facts:\n- A is B.\n* C is D.\n• E.\n-\n");
    CHECK(d.facts == std::vector<std::string>{"A is B.", "C is D.", "E."});
    CHECK_FALSE(d.parse_error);
    CHECK(parse_fact_list("NONE").facts.empty());
    CHECK_FALSE(parse_fact_list("none.").parse_error);
    CHECK_FALSE(parse_fact_list("-").parse_error);
    CHECK(parse_fact_list("Sorry, I can't.").parse_error);
}

TEST_CASE("verdict parsing") {
    CHECK(parse_verdict_reply("True") == Verdict::supported);
    CHECK(parse_verdict_reply("  **false** because") == Verdict::not_supported);
    CHECK(parse_verdict_reply("TRUE.") == Verdict::supported);
    CHECK(parse_verdict_reply("Truely") == Verdict::parse_error);
    CHECK(parse_verdict_reply("It is true") == Verdict::parse_error);
}

TEST_CASE("render supports") {
    const std::vector<Passage> ps = {{"a", "T1", "x", 0, {}}, {"b", "T2", "y", 0, {}}};
    CHECK(render_supports(ps) == "Title: T1\nText: x\n\nTitle: T2\nText: y");
}

TEST_CASE("fact reward counts supported facts") {
    Fixture f;
    const auto r =
        fact_reward(f.response("Newton ok; Newton wrong. He was ok; also ok. Hello there!"), f.x, f.env, f.index,
                    f.identity);
    CHECK(r.n_facts == 4);
    CHECK(r.n_correct == 3);
    CHECK(r.value == 0.75);
    CHECK(r.per_fact[2].sentence_index == 1);
    CHECK_NOTHROW(r.validate());
}

TEST_CASE("fact reward edge cases") {
    Fixture f;
    const auto none = fact_reward(f.response("Hello friend!"), f.x, f.env, f.index, f.identity);
    CHECK_FALSE(none.scoreable());
    CHECK(none.n_facts == 0);

    FactScorer scorer(f.env, f.index, f.identity);
    const auto d = scorer.score(f.response("A weird sentence. Then ok; garbled claim."), f.x);
    CHECK(d.decomposition_failures == std::vector<std::size_t>{0});
    CHECK(d.reward.n_facts == 2);
    CHECK(d.reward.per_fact[1].verdict == Verdict::parse_error);
    CHECK(d.reward.value == 0.5);
    CHECK(d.verifications[0].supports_used == std::vector<std::string>{"d1"});

    Response other = f.response("x");
    other.instruction_id = "someone-else";
    CHECK_THROWS_AS(scorer.score(other, f.x), std::invalid_argument);
}

TEST_CASE("sentence-level reward") {
    Fixture f;
    const auto r = sentence_level_reward(f.response("It is ok. It is wrong. All ok."), f.x, f.env, f.index, f.identity);
    CHECK(r.n_facts == 3);
    CHECK(r.n_correct == 2);
}

TEST_CASE("sentence filter skips non-fact sentences") {
    Fixture f;
    llm::Gateway cgw;
    cgw.register_backend("c", std::make_shared<FnBackend>([](const std::string& p, int) -> std::optional<std::string> {
                             return p.find("Hello") != std::string::npos ? "not fact-based" : "fact-based";
                         }));
    const classify::Classifier c(cgw, {"c", "m", f.lib.get(prompts::kInstructionClassifier).text,
                                       f.lib.get(prompts::kClaimClassifier).text});
    FactRewardOptions opt;
    opt.sentence_filter = true;
    FactScorer scorer(f.env, f.index, f.identity, opt, &c);
    const auto d = scorer.score(f.response("Hello ok; ok. He was ok."), f.x);
    CHECK(d.reward.n_facts == 1);
    CHECK(d.sentences[0].fact_based == false);
    CHECK(d.sentences[1].fact_based == true);
}

TEST_CASE("judge") {
    Fixture f;
    const auto ok = if_judge(f.x, f.response("A fine answer"), f.env);
    REQUIRE(ok.score);
    CHECK(ok.score->samples == std::vector<double>{3, 4, 3});
    CHECK(ok.score->mean == doctest::Approx(10.0 / 3.0));

    const auto partial = if_judge(f.x, f.response("flaky answer"), f.env);
    REQUIRE(partial.score);
    CHECK(partial.score->samples == std::vector<double>{3, 3});
    CHECK(partial.parse_failures == 1);

    const auto none = if_judge(f.x, f.response("silent answer"), f.env);
    CHECK_FALSE(none.score);
    CHECK(none.parse_failures == 3);
    CHECK_THROWS_AS(if_judge(f.x, f.response("x"), f.env, 4), std::invalid_argument);
}
