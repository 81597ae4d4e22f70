#include <doctest.h>

#include "factalign/elicit.hpp"
#include "fn_backend.hpp"
#include "tmpdir.hpp"

using namespace factalign;
using namespace factalign::elicit;
using testing::FnBackend;

namespace {

std::vector<SeedPair> seed_pairs() {
    std::vector<SeedPair> out;
    const char* rows[][2] = {{"Tell me about Paris", "Paris is in France."},
                             {"Tell me about Berlin", "Berlin is in Germany."},
                             {"Write a poem about Paris", "Roses bloom."},
                             {"Cook pasta", "Boil water."}};
    for (const auto& r : rows) out.push_back({Instruction::make(r[0], InstructionSource::seed_ift), r[1]});
    return out;
}

SeedRecord seed(const std::string& text, InstructionKind kind) {
    SeedRecord s;
    s.instruction = Instruction::make(text, InstructionSource::seed_ift, kind);
    s.human.instruction_id = s.instruction.id;
    s.human.text = "human answer";
    s.human.origin = ResponseOrigin::human;
    s.human.id = Response::make_id(s.instruction.id, ResponseOrigin::human, 0, s.human.text);
    return s;
}

Response pt(const Instruction& x, std::size_t i) {
    Response r;
    r.instruction_id = x.id;
    r.text = "pt " + std::to_string(i);
    r.origin = ResponseOrigin::pt_fewshot;
    r.id = Response::make_id(x.id, r.origin, i, r.text);
    r.sampling = SamplingParams{};
    return r;
}

}  // namespace

TEST_CASE("few-shot prompt: nearest demo last, target excluded") {
    const auto pool = seed_pairs();
    const auto x = Instruction::make("What is there to see in Paris", InstructionSource::augmented);
    const auto p = build_fewshot_prompt(x, pool, 2);
    REQUIRE(p.demos.size() == 2);
    for (const auto& d : p.demos) CHECK(d.instruction.find("Paris") != std::string::npos);
    const auto text = p.render();
    CHECK(text.ends_with("### Instruction:\nWhat is there to see in Paris\n\n### Response:\n"));
    CHECK(text.find("### END") != std::string::npos);

    // The target is never its own demo.
    const auto self = build_fewshot_prompt(pool[0].instruction, pool, 3);
    for (const auto& d : self.demos) CHECK(d.instruction_id != pool[0].instruction.id);
    CHECK_THROWS_AS(build_fewshot_prompt(pool[0].instruction, pool, 4), std::invalid_argument);
    CHECK(build_fewshot_prompt(x, pool, 0).render() == x.text);
}

TEST_CASE("rag prompt") {
    const auto x = Instruction::make("Who was Ada Lovelace", InstructionSource::augmented);
    std::vector<Passage> supports;
    for (int i = 0; i < 14; ++i) supports.push_back({"d" + std::to_string(i), "T", "text " + std::to_string(i), 0, {}});
    Demo demo{"other", "Who was Newton", "A physicist.", Passage{"n", "Newton", "Isaac Newton ...", 0, {}}};
    const auto p = build_rag_prompt(x, supports, {demo});
    CHECK(p.rag_supports->size() == 10);
    const auto text = p.render();
    CHECK(text.starts_with("### Passage:\nNewton: Isaac Newton"));
    CHECK(text.find("text 9") != std::string::npos);
    CHECK(text.find("text 10") == std::string::npos);
    demo.instruction_id = x.id;
    CHECK_THROWS_AS(build_rag_prompt(x, supports, {demo}), std::invalid_argument);
}

TEST_CASE("truncation at demo boundaries") {
    CHECK(truncate_at_boundary("  answer text\n### END\n### Instruction:\nmore") == "answer text");
    CHECK(truncate_at_boundary("answer\n### Instruction:\nx") == "answer");
    CHECK(truncate_at_boundary("plain") == "plain");
    CHECK(truncate_at_boundary("### END").empty());
}

TEST_CASE("sampling keeps sample order and reports failures") {
    llm::Gateway gw;
    gw.register_backend("b", std::make_shared<FnBackend>([](const std::string&, int i) -> std::optional<std::string> {
                            if (i == 1) return std::nullopt;
                            if (i == 2) return "### END junk";
                            return "sample " + std::to_string(i) + "\n### END\nrun-on";
                        }));
    const auto x = Instruction::make("Who was Ada Lovelace", InstructionSource::augmented);
    const auto p = build_rag_prompt(x, {{"d", "", "text", 0, {}}}, {});
    const auto r = sample_responses(p, 4, SamplingParams{}, gw, {"b", "base"});
    REQUIRE(r.responses.size() == 2);
    CHECK(r.responses[0].text == "sample 0");
    CHECK(r.responses[1].text == "sample 3");
    CHECK(r.responses[0].origin == ResponseOrigin::pt_rag);
    CHECK(r.responses[0].sampling->n_samples == 4);
    CHECK(r.failures.size() == 2);
    CHECK(r.responses[0].id != r.responses[1].id);

    const auto policy = sample_policy_responses(x, 1, SamplingParams{}, gw, {"b", "chat"});
    CHECK(policy.responses[0].origin == ResponseOrigin::sft_model);
    CHECK(policy.responses[0].text == "sample 0\n### END\nrun-on");

    const auto none = sample_responses(p, 2, SamplingParams{}, gw, {"missing", "m"});
    CHECK(none.failed());
}

TEST_CASE("sft routing") {
    const auto fact = seed("Who was Newton", InstructionKind::fact_based);
    const auto creative = seed("Write a haiku", InstructionKind::non_fact_based);
    const auto starved = seed("Who was Euler", InstructionKind::fact_based);
    std::map<std::string, std::vector<Response>> samples;
    for (std::size_t i = 0; i < 4; ++i) samples[fact.instruction.id].push_back(pt(fact.instruction, i));
    samples[creative.instruction.id].push_back(pt(creative.instruction, 0));
    const std::vector<SeedRecord> seeds = {fact, creative, starved};

    const auto c = build_sft_dataset(seeds, samples, SftPolicy::classifier);
    REQUIRE(c.examples.size() == 5);
    for (const auto& e : c.examples) {
        if (e.instruction_id == fact.instruction.id) {
            CHECK(e.route == Route::pt_response);
            CHECK(e.sampler_weight == 0.25);
        } else {
            CHECK(e.route == Route::human_response);
            CHECK(e.response_id == creative.human.id);
        }
    }
    CHECK(c.excluded == std::vector<std::string>{starved.instruction.id});

    const auto nc = build_sft_dataset(seeds, samples, SftPolicy::no_classifier);
    std::map<std::string, std::pair<double, double>> mass;
    for (const auto& e : nc.examples) {
        auto& m = mass[e.instruction_id];
        (e.route == Route::human_response ? m.first : m.second) += e.sampler_weight;
    }
    CHECK(mass[fact.instruction.id] == std::pair{0.5, 0.5});
    CHECK(mass[creative.instruction.id] == std::pair{0.5, 0.5});
    CHECK(mass[starved.instruction.id] == std::pair{1.0, 0.0});

    auto unclassified = seed("x", InstructionKind::unclassified);
    CHECK_THROWS_AS(build_sft_dataset(std::vector{unclassified}, samples, SftPolicy::classifier),
                    std::invalid_argument);
    CHECK(parse_sft_policy("no_classifier") == SftPolicy::no_classifier);
}

TEST_CASE("sft record round trip") {
    testing::TempDir dir;
    const std::vector<SftRecord> rows = {{{"x1", "r1", Route::pt_response, 0.1}, "instr", "resp"},
                                         {{"x2", "r2", Route::human_response, 1.0}, "instr2", "resp2"}};
    save_dataset(rows, dir / "sft.jsonl");
    const auto back = load_dataset<SftRecord>(dir / "sft.jsonl");
    REQUIRE(back.size() == 2);
    CHECK(back[0].example.route == Route::pt_response);
    CHECK(back[0].example.sampler_weight == 0.1);
    CHECK(back[1].response == "resp2");
}
