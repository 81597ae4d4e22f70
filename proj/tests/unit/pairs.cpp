#include <doctest.h>

#include <fstream>
#include <random>

#include "factalign/pairs.hpp"
#include "oracles.hpp"
#include "tmpdir.hpp"

using namespace factalign;
using namespace factalign::pairs;

namespace {

using C = Candidate;

std::optional<DiscardReason> reason(const PairBatch& b) {
    if (b.discarded.empty()) return std::nullopt;
    return b.discarded.front().reason;
}

}  // namespace

TEST_CASE("if pairs: max and min judge mean, lowest index on ties") {
    const std::vector<C> c = {{"a", 3.0, {}}, {"b", 4.5, {}}, {"c", 4.5, {}}, {"d", 2.0, {}}, {"e", 2.0, {}}};
    const auto b = build_if_pairs("x", c);
    REQUIRE(b.pairs.size() == 1);
    CHECK(b.pairs[0].positive_id == "b");
    CHECK(b.pairs[0].negative_id == "d");
    CHECK(b.pairs[0].kind == PairKind::if_pair);
    CHECK(b.pairs[0].selection == PairSelection::max_min);
    CHECK(b.pairs[0].pos_reward == 4.5);

    CHECK(reason(build_if_pairs("x", std::vector<C>{{"a", 3.0, {}}, {"b", 3.0, {}}})) == DiscardReason::tied_reward);
    CHECK(reason(build_if_pairs("x", std::vector<C>{{"a", 3.0, {}}, {"b", {}, 0.5}})) ==
          DiscardReason::judge_failure);
}

TEST_CASE("fact max-min") {
    const std::vector<C> c = {{"a", 4.0, 0.9}, {"b", 3.8, 0.2}, {"c", {}, 1.0}, {"d", 4.0, {}}};
    const auto b = build_fact_pairs_maxmin("x", c);
    REQUIRE(b.pairs.size() == 1);
    CHECK(b.pairs[0].positive_id == "a");
    CHECK(b.pairs[0].negative_id == "b");
    CHECK(b.pairs[0].kind == PairKind::fact_pair);
    CHECK(reason(build_fact_pairs_maxmin("x", std::vector<C>{{"a", 5.0, 0.9}, {"b", 3.0, 0.2}})) ==
          DiscardReason::if_gap_exceeded);
    CHECK(reason(build_fact_pairs_maxmin("x", std::vector<C>{{"a", 4.0, 0.5}, {"b", 4.0, 0.5}})) ==
          DiscardReason::tied_reward);
    CHECK(reason(build_fact_pairs_maxmin("x", std::vector<C>{{"a", 4.0, 0.5}, {"b", {}, 0.1}})) ==
          DiscardReason::unscoreable);
}

TEST_CASE("fact enumeration") {
    const std::vector<C> c = {{"a", 4.0, 1.0}, {"b", 4.0, 0.5}, {"c", 4.3, 0.4}, {"d", 2.0, 0.0}};
    const auto b = build_fact_pairs_enum("x", c);
    // (a,b) kept, (a,c) kept, (a,d) gap, (b,c) below band, (b,d) gap, (c,d) gap
    REQUIRE(b.pairs.size() == 2);
    CHECK(b.pairs[0].positive_id == "a");
    CHECK(b.pairs[0].negative_id == "b");
    CHECK(b.pairs[1].negative_id == "c");
    CHECK(b.pairs[0].selection == PairSelection::enumeration);
    CHECK(b.rejected_pairs.at(DiscardReason::if_gap_exceeded) == 3);
    CHECK(b.rejected_pairs.at(DiscardReason::below_band) == 1);
    CHECK(b.discarded.empty());

    CHECK(reason(build_fact_pairs_enum("x", std::vector<C>{{"a", 4.0, 0.5}, {"b", 4.0, 0.45}})) ==
          DiscardReason::below_band);
}

TEST_CASE("composite") {
    CHECK(composite_reward(4.0, 0.6) == 7.0);
    CHECK(composite_reward(1.0, 1.0, {0.5, 0.2, 2.0, 1.0}) == 3.0);
    // No IF-gap filter: a large judge difference still pairs.
    const auto b = build_composite_pairs("x", std::vector<C>{{"a", 5.0, 0.2}, {"b", 1.0, 0.9}});
    REQUIRE(b.pairs.size() == 1);
    CHECK(b.pairs[0].positive_id == "a");
    CHECK(b.pairs[0].pos_reward == 6.0);
    CHECK(b.pairs[0].selection == PairSelection::composite);
    CHECK(reason(build_composite_pairs("x", std::vector<C>{{"a", 5.0, 0.2}, {"b", 4.0, 0.4}})) ==
          DiscardReason::tied_reward);
}

TEST_CASE("bio FS pairs") {
    const std::vector<std::string> ids = {"g0", "g1", "g2", "g3"};
    const std::vector<std::optional<double>> fs = {0.5, 0.9, 0.5, std::nullopt};
    const auto b = build_bio_fs_pairs("e", ids, fs);
    REQUIRE(b.pairs.size() == 2);
    CHECK(b.pairs[0].positive_id == "g1");
    CHECK(b.pairs[0].negative_id == "g0");
    CHECK(b.pairs[0].selection == PairSelection::factscore_bio);
    CHECK(b.rejected_pairs.at(DiscardReason::tied_reward) == 1);
    CHECK_THROWS_AS(build_bio_fs_pairs("e", std::vector<std::string>{"g0"}, std::vector<std::optional<double>>{0.1}),
                    std::invalid_argument);
}

TEST_CASE("builders agree with the oracles on random inputs") {
    std::mt19937_64 rng(42);
    for (int t = 0; t < 300; ++t) {
        const auto id = "x" + std::to_string(t);
        const auto c = oracle::random_candidates(rng, 2 + rng() % 5, id, t % 3 != 0);
        CHECK(oracle::same(oracle::if_pairs(id, c), build_if_pairs(id, c)));
        CHECK(oracle::same(oracle::fact_maxmin(id, c), build_fact_pairs_maxmin(id, c)));
        CHECK(oracle::same(oracle::fact_enum(id, c), build_fact_pairs_enum(id, c)));
        CHECK(oracle::same(oracle::composite(id, c), build_composite_pairs(id, c)));
        const PairingParams wide{1.0, 0.3, 2.0, 3.0};
        CHECK(oracle::same(oracle::fact_enum(id, c, 1.0, 0.3), build_fact_pairs_enum(id, c, wide)));
        CHECK(oracle::same(oracle::composite(id, c, 2.0, 3.0), build_composite_pairs(id, c, wide)));
    }
}

TEST_CASE("strategy dispatch and params") {
    const std::vector<C> c = {{"a", 4.0, 1.0}, {"b", 4.0, 0.5}};
    CHECK(build_fact_pairs(Strategy::enumeration, "x", c).pairs[0].selection == PairSelection::enumeration);
    CHECK(build_fact_pairs(Strategy::composite, "x", c).pairs[0].selection == PairSelection::composite);
    CHECK(parse_strategy(to_string(Strategy::max_min)) == Strategy::max_min);
    CHECK_THROWS(parse_strategy("random"));
    CHECK_THROWS_AS((PairingParams{0.0, 0.2, 1.0, 5.0}.validate()), std::invalid_argument);
}

TEST_CASE("batch bookkeeping") {
    PairBatch a = build_fact_pairs_enum("x", std::vector<C>{{"a", 4.0, 1.0}, {"b", 4.0, 0.5}, {"c", 4.0, 0.0}});
    a.append(build_if_pairs("y", std::vector<C>{{"a", 3.0, {}}, {"b", 3.0, {}}}));
    CHECK(a.pairs.size() == 3);
    CHECK(a.paired_instructions() == 1);
    CHECK(a.discarded.size() == 1);
    const auto s = summarize(a, 2);
    CHECK(s.at("pairs") == 3);
    CHECK(s.at("discarded_by_reason").at("tied_reward") == 1);
    CHECK(s.at("candidate_instructions") == 2);
}

TEST_CASE("dpo assembly") {
    testing::TempDir dir;
    const auto x = Instruction::make("Who was Newton", InstructionSource::augmented, InstructionKind::fact_based);
    AssemblyInput in;
    in.instructions[x.id] = x;
    for (const char* id : {"r1", "r2"}) {
        Response r;
        r.id = id;
        r.instruction_id = x.id;
        r.text = std::string("text of ") + id;
        in.responses[id] = r;
    }
    in.if_batch = build_if_pairs(x.id, std::vector<C>{{"r1", 4.0, 0.2}, {"r2", 3.0, 0.9}});
    in.fact_batch = build_fact_pairs_maxmin(x.id, std::vector<C>{{"r1", 4.0, 0.2}, {"r2", 3.8, 0.9}});
    in.if_candidates = in.fact_candidates = 1;
    std::ofstream(dir / "sft.jsonl") << "";
    std::ofstream(dir / "dpo_bio.jsonl") << "stale";
    in.sft_files = {"sft.jsonl"};

    const auto out = assemble_dpo_dataset(in, dir.path());
    CHECK_FALSE(std::filesystem::exists(dir / "dpo_bio.jsonl"));
    const auto fact = load_dataset<DpoRecord>(dir / "dpo_fact.jsonl");
    REQUIRE(fact.size() == 1);
    CHECK(fact[0].positive_text == "text of r2");
    CHECK(fact[0].instruction == x.text);
    CHECK(out.manifest.dpo_files.size() == 2);
    CHECK(out.manifest.beta == 0.1);
    CHECK(out.summary.at("reference").at("if_pairs") == 18454);
    CHECK(out.summary.at("reference").at("fact_pairs") == 3315);
    const auto manifest = load_json(dir / "training_manifest.json");
    CHECK(manifest.at("sft_files").at(0) == "sft.jsonl");

    AssemblyInput empty;
    CHECK_THROWS_AS(assemble_dpo_dataset(empty, dir.path()), std::invalid_argument);
    in.responses.erase("r2");
    CHECK_THROWS_AS(assemble_dpo_dataset(in, dir.path()), std::invalid_argument);
}
