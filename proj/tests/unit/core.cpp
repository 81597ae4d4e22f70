#include <doctest.h>

#include <fstream>

#include "factalign/core.hpp"
#include "tmpdir.hpp"

using namespace factalign;
using testing::TempDir;

namespace {

void write_file(const std::filesystem::path& p, const std::string& s) {
    std::ofstream(p, std::ios::binary) << s;
}

Response response_for(const Instruction& x, std::size_t idx, std::string text) {
    Response r;
    r.instruction_id = x.id;
    r.text = std::move(text);
    r.origin = ResponseOrigin::pt_fewshot;
    r.id = Response::make_id(x.id, r.origin, idx, r.text);
    r.sampling = SamplingParams{};
    return r;
}

}  // namespace

TEST_CASE("sha256 known vectors") {
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("digest_fields is not fooled by concatenation") {
    const std::string_view a[] = {"ab", "c"};
    const std::string_view b[] = {"a", "bc"};
    CHECK(digest_fields(a) != digest_fields(b));
}

TEST_CASE("content ids") {
    const auto a = Instruction::make("Tell me about Paris.", InstructionSource::seed_ift);
    const auto b = Instruction::make("Tell me about Paris.", InstructionSource::augmented);
    CHECK(a.id.size() == 32);
    CHECK(a.id != b.id);
    CHECK(a.id == Instruction::make("Tell me about Paris.", InstructionSource::seed_ift).id);
    CHECK_THROWS_AS(content_id("  \n", InstructionSource::external), std::invalid_argument);

    auto tampered = a;
    tampered.text = "Tell me about Rome.";
    CHECK_THROWS_AS(tampered.validate(), InvariantError);
}

TEST_CASE("response ids distinguish identical samples") {
    const auto x = Instruction::make("q", InstructionSource::external);
    CHECK(Response::make_id(x.id, ResponseOrigin::pt_fewshot, 0, "same") !=
          Response::make_id(x.id, ResponseOrigin::pt_fewshot, 1, "same"));
}

TEST_CASE("enum names round trip") {
    for (auto v : {InstructionSource::seed_ift, InstructionSource::seed_eft, InstructionSource::augmented,
                   InstructionSource::bio_entity, InstructionSource::external}) {
        CHECK(parse_instruction_source(to_string(v)) == v);
    }
    for (auto v : {ResponseOrigin::human, ResponseOrigin::pt_fewshot, ResponseOrigin::pt_rag, ResponseOrigin::sft_model,
                   ResponseOrigin::external}) {
        CHECK(parse_response_origin(to_string(v)) == v);
    }
    for (auto v : {PairSelection::max_min, PairSelection::enumeration, PairSelection::composite,
                   PairSelection::factscore_bio}) {
        CHECK(parse_pair_selection(to_string(v)) == v);
    }
    CHECK_THROWS_AS(parse_verdict("maybe"), std::invalid_argument);
}

TEST_CASE("judge score invariants") {
    const auto s = JudgeScore::from_samples({3, 4, 5});
    CHECK(s.mean == 4.0);
    CHECK_THROWS_AS(JudgeScore::from_samples({}), InvariantError);
    CHECK_THROWS_AS(JudgeScore::from_samples({0.5}), InvariantError);
    CHECK_THROWS_AS(JudgeScore::from_samples({1, 2, 3, 4}), InvariantError);
}

TEST_CASE("fact reward from checks") {
    const auto r = FactReward::from_checks({{"a", 0, Verdict::supported},
                                            {"b", 0, Verdict::not_supported},
                                            {"c", 1, Verdict::parse_error},
                                            {"d", 1, Verdict::supported}});
    CHECK(r.n_facts == 4);
    CHECK(r.n_correct == 2);
    CHECK(r.n_error() == 2);
    REQUIRE(r.value);
    CHECK(*r.value == 0.5);
    CHECK_NOTHROW(r.validate());

    const auto empty = FactReward::from_checks({});
    CHECK_FALSE(empty.scoreable());
    CHECK_NOTHROW(empty.validate());

    auto bad = r;
    bad.value = 0.75;
    CHECK_THROWS_AS(bad.validate(), InvariantError);
}

TEST_CASE("preference pair invariants") {
    PreferencePair p{"x", "a", "b", PairKind::fact_pair, 0.9, 0.4, PairSelection::max_min};
    CHECK_NOTHROW(p.validate());
    p.neg_reward = 0.9;
    CHECK_THROWS_AS(p.validate(), InvariantError);
    p.neg_reward = 0.4;
    p.negative_id = "a";
    CHECK_THROWS_AS(p.validate(), InvariantError);
}

TEST_CASE("sampling params") {
    SamplingParams p;
    CHECK(p.temperature == 0.7);
    CHECK(p.top_p == 0.9);
    CHECK(p.max_tokens == 512);
    p.top_p = 0.0;
    CHECK_THROWS_AS(p.validate(), InvariantError);
    CHECK(SamplingParams::greedy().temperature == 0.0);
}

TEST_CASE("human responses carry no sampling") {
    const auto x = Instruction::make("q", InstructionSource::seed_ift);
    auto r = response_for(x, 0, "text");
    r.origin = ResponseOrigin::human;
    CHECK_THROWS_AS(r.validate(), InvariantError);
}

TEST_CASE("training manifest defaults") {
    TrainingManifest m;
    CHECK(m.beta == 0.1);
    CHECK(m.lr == 1e-6);
    CHECK(m.lr_final == 1e-7);
    CHECK(m.steps == 500);
    CHECK(m.sft_batch == 32);
    CHECK(m.dpo_batch == 64);
    CHECK(m.max_seq == 2048);
    TempDir dir;
    m.sft_files = {"sft.jsonl"};
    CHECK_THROWS_AS(m.validate(dir.path()), InvariantError);
    write_file(dir / "sft.jsonl", "");
    CHECK_NOTHROW(m.validate(dir.path()));
}

TEST_CASE("dataset round trip") {
    TempDir dir;
    const auto x = Instruction::make("Describe the Nile.", InstructionSource::augmented, InstructionKind::fact_based);
    auto r = response_for(x, 3, "The Nile flows north. \"Quoted\" and unicode: é 漢字");
    r.if_score = JudgeScore::from_samples({4, 5});
    r.fact = FactReward::from_checks({{"The Nile flows north.", 0, Verdict::supported}});
    save_dataset(std::vector{r}, dir / "r.jsonl");
    const auto back = load_dataset<Response>(dir / "r.jsonl");
    REQUIRE(back.size() == 1);
    CHECK(back[0] == r);

    save_dataset(std::vector{x}, dir / "x.jsonl");
    CHECK(load_dataset<Instruction>(dir / "x.jsonl").at(0) == x);

    const std::vector<PreferencePair> pairs = {
        {x.id, "a", "b", PairKind::if_pair, 4.5, 3.0, PairSelection::max_min}};
    save_dataset(pairs, dir / "p.jsonl");
    CHECK(load_dataset<PreferencePair>(dir / "p.jsonl") == pairs);
}

TEST_CASE("dataset errors carry line numbers") {
    TempDir dir;
    const auto x = Instruction::make("one", InstructionSource::external);
    const auto y = Instruction::make("two", InstructionSource::external);
    const auto line = [](const Instruction& i) { return Json(i).dump() + "\n"; };

    SUBCASE("malformed json") {
        write_file(dir / "d.jsonl", line(x) + "\n{not json\n");
        try {
            load_dataset<Instruction>(dir / "d.jsonl");
            FAIL("expected DatasetError");
        } catch (const DatasetError& e) {
            CHECK(e.kind() == DatasetError::Kind::malformed_json);
            CHECK(e.line() == 3);
        }
    }
    SUBCASE("schema violation") {
        write_file(dir / "d.jsonl", line(x) + R"({"id":"zz","text":"t","source":"nope","kind":"fact_based"})" "\n");
        try {
            load_dataset<Instruction>(dir / "d.jsonl");
            FAIL("expected DatasetError");
        } catch (const DatasetError& e) {
            CHECK(e.kind() == DatasetError::Kind::schema_violation);
            CHECK(e.line() == 2);
        }
    }
    SUBCASE("duplicate id reported at the later line") {
        write_file(dir / "d.jsonl", line(x) + line(y) + line(x));
        try {
            load_dataset<Instruction>(dir / "d.jsonl");
            FAIL("expected DatasetError");
        } catch (const DatasetError& e) {
            CHECK(e.kind() == DatasetError::Kind::duplicate_id);
            CHECK(e.line() == 3);
        }
    }
    SUBCASE("missing file") {
        try {
            load_dataset<Instruction>(dir / "absent.jsonl");
            FAIL("expected DatasetError");
        } catch (const DatasetError& e) {
            CHECK(e.kind() == DatasetError::Kind::io);
            CHECK(e.line() == 0);
        }
    }
}

TEST_CASE("save validates before writing") {
    TempDir dir;
    write_file(dir / "keep.jsonl", "old\n");
    Instruction bad;
    bad.text = "x";
    bad.id = "wrong";
    CHECK_THROWS(save_dataset(std::vector{bad}, dir / "keep.jsonl"));
    std::ifstream in(dir / "keep.jsonl");
    std::string s;
    std::getline(in, s);
    CHECK(s == "old");
}

TEST_CASE("file digest") {
    TempDir dir;
    write_file(dir / "f", "abc");
    CHECK(file_digest(dir / "f") == sha256_hex("abc"));
    CHECK_THROWS_AS(file_digest(dir / "missing"), DatasetError);
}

TEST_CASE("trim") {
    CHECK(trim("  a b \n") == "a b");
    CHECK(trim(" \t ").empty());
}
