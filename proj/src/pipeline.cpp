#include "factalign/pipeline.hpp"

#include <chrono>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "factalign/classify.hpp"
#include "factalign/elicit.hpp"
#include "factalign/eval.hpp"
#include "factalign/parallel.hpp"
#include "factalign/prompts.hpp"
#include "factalign/retrieval.hpp"
#include "factalign/rewards.hpp"

namespace factalign::cli {

namespace {

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error("invalid configuration:\n  " + join(problems, "\n  ")), problems_(std::move(problems)) {}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

namespace {

class Reader {
  public:
    explicit Reader(std::vector<std::string>& problems) : problems_(problems) {}

    const Json* section(const Json& parent, const char* key, const std::string& where, bool required) {
        if (!parent.contains(key)) {
            if (required) problems_.push_back(where + key + ": missing");
            return nullptr;
        }
        const auto& s = parent.at(key);
        if (!s.is_object()) {
            problems_.push_back(where + key + ": expected an object");
            return nullptr;
        }
        return &s;
    }

    template <typename T>
    bool get(const Json* obj, const char* key, T& out, const std::string& where, bool required = false) {
        if (!obj || !obj->contains(key)) {
            if (required) problems_.push_back(where + key + ": missing");
            return false;
        }
        try {
            out = obj->at(key).get<T>();
            return true;
        } catch (const std::exception&) {
            problems_.push_back(where + key + ": wrong type (" + std::string(obj->at(key).type_name()) + ")");
            return false;
        }
    }

    bool path(const Json* obj, const char* key, std::optional<fs::path>& out, const std::string& where,
              bool required = false) {
        std::string s;
        if (!get(obj, key, s, where, required)) return false;
        if (s.empty()) {
            problems_.push_back(where + key + ": empty path");
            return false;
        }
        out = fs::path(s);
        return true;
    }

    void unknown_keys(const Json* obj, std::initializer_list<std::string_view> known, const std::string& where) {
        if (!obj) return;
        for (const auto& [k, v] : obj->items()) {
            if (std::find(known.begin(), known.end(), k) == known.end()) {
                problems_.push_back(where + k + ": unknown key");
            }
        }
    }

    void check(bool ok, const std::string& message) {
        if (!ok) problems_.push_back(message);
    }

  private:
    std::vector<std::string>& problems_;
};

Json resolved_json(const RunConfig& c) {
    Json backends = Json::object();
    for (const auto& [id, b] : c.backends) {
        Json j{{"model", b.model}, {"max_in_flight", b.max_in_flight}};
        if (b.mock_script) {
            j["mock_script"] = b.mock_script->generic_string();
            j["fallback"] = b.fallback;
            if (b.fallback == "fixed") j["fixed_text"] = b.fixed_text;
        } else {
            j["base_url"] = b.base_url;
            j["timeout_ms"] = b.timeout_ms;
            j["max_retries"] = b.max_retries;
            j["supports_n"] = b.supports_n;
        }
        backends[id] = std::move(j);
    }
    Json roles = Json::object();
    for (const auto& [r, id] : c.roles) roles[r] = id;
    Json inputs{{"seed", c.inputs.seed.generic_string()}, {"dpo_instructions", c.inputs.dpo_instructions.generic_string()}};
    auto opt = [&](const char* k, const std::optional<fs::path>& p) {
        if (p) inputs[k] = p->generic_string();
    };
    opt("bio_instructions", c.inputs.bio_instructions);
    opt("eval_instructions", c.inputs.eval_instructions);
    opt("eval_responses", c.inputs.eval_responses);
    opt("annotations", c.inputs.annotations);
    return Json{{"seed", c.seed},
                {"backends", backends},
                {"roles", roles},
                {"inputs", inputs},
                {"retrieval",
                 {{"corpus_path", c.retrieval.corpus_path.generic_string()},
                  {"k_retrieve", c.retrieval.k_retrieve},
                  {"m_supports", c.retrieval.m_supports},
                  {"reranker", c.retrieval.reranker},
                  {"k1", c.retrieval.k1},
                  {"b", c.retrieval.b}}},
                {"sampling",
                 {{"temperature", c.sampling.temperature},
                  {"top_p", c.sampling.top_p},
                  {"max_tokens", c.sampling.max_tokens}}},
                {"elicit",
                 {{"sft_samples", c.elicit.sft_samples},
                  {"dpo_samples", c.elicit.dpo_samples},
                  {"bio_samples", c.elicit.bio_samples},
                  {"demos", c.elicit.demos},
                  {"sft_policy", c.elicit.sft_policy},
                  {"rag", c.elicit.rag}}},
                {"rewards",
                 {{"sentence_filter", c.rewards.sentence_filter},
                  {"fact_unit", c.rewards.fact_unit},
                  {"judge_samples", c.rewards.judge_samples}}},
                {"pairing",
                 {{"strategy", pairs::to_string(c.strategy)},
                  {"if_gap", c.pairing.if_gap},
                  {"enum_band", c.pairing.enum_band},
                  {"composite_weights", {c.pairing.if_weight, c.pairing.fact_weight}}}},
                {"training", c.training},
                {"eval", {{"dataset_name", c.eval_dataset}}}};
}

}  // namespace

RunConfig RunConfig::from_json(const Json& doc, const fs::path& base_dir) {
    std::vector<std::string> problems;
    if (!doc.is_object()) throw ConfigError({"config: expected a JSON object"});
    Reader rd(problems);
    RunConfig c;
    c.base_dir = base_dir;

    rd.unknown_keys(&doc,
                    {"seed", "out_dir", "cache_dir", "prompts_dir", "workers", "backends", "roles", "inputs",
                     "retrieval", "sampling", "elicit", "rewards", "pairing", "training", "eval"},
                    "");
    rd.get(&doc, "seed", c.seed, "");
    std::optional<fs::path> out;
    if (rd.path(&doc, "out_dir", out, "")) c.out_dir = *out;
    rd.path(&doc, "cache_dir", c.cache_dir, "");
    rd.path(&doc, "prompts_dir", c.prompts_dir, "");
    if (rd.get(&doc, "workers", c.workers, "")) rd.check(c.workers >= 1, "workers: must be at least 1");

    if (const auto* backends = rd.section(doc, "backends", "", true)) {
        for (const auto& [id, j] : backends->items()) {
            const std::string where = "backends." + id + ".";
            if (!j.is_object()) {
                problems.push_back("backends." + id + ": expected an object");
                continue;
            }
            rd.unknown_keys(&j,
                            {"model", "base_url", "mock_script", "fallback", "fixed_text", "timeout_ms", "max_retries",
                             "max_in_flight", "supports_n"},
                            where);
            BackendConfig b;
            rd.get(&j, "model", b.model, where, true);
            rd.get(&j, "base_url", b.base_url, where);
            rd.path(&j, "mock_script", b.mock_script, where);
            rd.check(b.base_url.empty() != !b.mock_script.has_value(),
                     where + "*: exactly one of base_url and mock_script is required");
            if (rd.get(&j, "fallback", b.fallback, where)) {
                try {
                    llm::parse_fallback(b.fallback);
                } catch (const std::exception& e) {
                    problems.push_back(where + "fallback: " + e.what());
                }
            }
            rd.get(&j, "fixed_text", b.fixed_text, where);
            if (rd.get(&j, "timeout_ms", b.timeout_ms, where)) rd.check(b.timeout_ms > 0, where + "timeout_ms: must be positive");
            if (rd.get(&j, "max_retries", b.max_retries, where)) rd.check(b.max_retries >= 0, where + "max_retries: must be >= 0");
            if (rd.get(&j, "max_in_flight", b.max_in_flight, where)) {
                rd.check(b.max_in_flight >= 1, where + "max_in_flight: must be at least 1");
            }
            rd.get(&j, "supports_n", b.supports_n, where);
            c.backends[id] = std::move(b);
        }
        rd.check(!c.backends.empty(), "backends: at least one backend is required");
    }

    if (const auto* roles = rd.section(doc, "roles", "", true)) {
        for (const auto& [role, j] : roles->items()) {
            const bool known = role == "reranker" || std::find_if(std::begin(kRoles), std::end(kRoles), [&](const char* r) {
                                                         return role == r;
                                                     }) != std::end(kRoles);
            if (!known) {
                problems.push_back("roles." + role + ": unknown role");
                continue;
            }
            if (!j.is_string()) {
                problems.push_back("roles." + role + ": expected a backend id");
                continue;
            }
            c.roles[role] = j.get<std::string>();
            rd.check(c.backends.contains(c.roles[role]),
                     "roles." + role + ": backend '" + c.roles[role] + "' is not defined");
        }
        for (const char* r : kRoles) rd.check(c.roles.contains(r), std::string("roles.") + r + ": missing");
    }

    if (const auto* in = rd.section(doc, "inputs", "", true)) {
        rd.unknown_keys(in,
                        {"seed", "dpo_instructions", "bio_instructions", "eval_instructions", "eval_responses",
                         "annotations"},
                        "inputs.");
        std::optional<fs::path> p;
        if (rd.path(in, "seed", p, "inputs.", true)) c.inputs.seed = *p;
        if (rd.path(in, "dpo_instructions", p, "inputs.", true)) c.inputs.dpo_instructions = *p;
        rd.path(in, "bio_instructions", c.inputs.bio_instructions, "inputs.");
        rd.path(in, "eval_instructions", c.inputs.eval_instructions, "inputs.");
        rd.path(in, "eval_responses", c.inputs.eval_responses, "inputs.");
        rd.path(in, "annotations", c.inputs.annotations, "inputs.");
        rd.check(!c.inputs.eval_instructions || c.inputs.eval_responses,
                 "inputs.eval_instructions: requires inputs.eval_responses");
    }

    if (const auto* r = rd.section(doc, "retrieval", "", true)) {
        const std::string w = "retrieval.";
        rd.unknown_keys(r, {"corpus_path", "k_retrieve", "m_supports", "reranker", "k1", "b"}, w);
        std::optional<fs::path> p;
        if (rd.path(r, "corpus_path", p, w, true)) c.retrieval.corpus_path = *p;
        rd.get(r, "k_retrieve", c.retrieval.k_retrieve, w);
        rd.get(r, "m_supports", c.retrieval.m_supports, w);
        rd.check(c.retrieval.m_supports >= 1, w + "m_supports: must be positive");
        rd.check(c.retrieval.k_retrieve >= c.retrieval.m_supports, w + "k_retrieve: must be >= m_supports");
        rd.get(r, "reranker", c.retrieval.reranker, w);
        rd.check(c.retrieval.reranker == "identity" || c.retrieval.reranker == "llm",
                 w + "reranker: must be identity or llm");
        rd.get(r, "k1", c.retrieval.k1, w);
        rd.get(r, "b", c.retrieval.b, w);
        rd.check(c.retrieval.k1 > 0, w + "k1: must be positive");
        rd.check(c.retrieval.b >= 0 && c.retrieval.b <= 1, w + "b: must lie in [0,1]");
    }
    if (c.retrieval.reranker == "llm") {
        rd.check(c.roles.contains("reranker"), "roles.reranker: required when retrieval.reranker is llm");
    }

    if (const auto* s = rd.section(doc, "sampling", "", false)) {
        rd.unknown_keys(s, {"temperature", "top_p", "max_tokens"}, "sampling.");
        rd.get(s, "temperature", c.sampling.temperature, "sampling.");
        rd.get(s, "top_p", c.sampling.top_p, "sampling.");
        rd.get(s, "max_tokens", c.sampling.max_tokens, "sampling.");
        try {
            c.sampling.validate();
        } catch (const std::exception& e) {
            problems.push_back(std::string("sampling: ") + e.what());
        }
    }

    if (const auto* e = rd.section(doc, "elicit", "", false)) {
        const std::string w = "elicit.";
        rd.unknown_keys(e, {"sft_samples", "dpo_samples", "bio_samples", "demos", "sft_policy", "rag"}, w);
        rd.get(e, "sft_samples", c.elicit.sft_samples, w);
        rd.get(e, "dpo_samples", c.elicit.dpo_samples, w);
        rd.get(e, "bio_samples", c.elicit.bio_samples, w);
        rd.get(e, "demos", c.elicit.demos, w);
        rd.get(e, "sft_policy", c.elicit.sft_policy, w);
        rd.get(e, "rag", c.elicit.rag, w);
        rd.check(c.elicit.sft_samples >= 1, w + "sft_samples: must be positive");
        rd.check(c.elicit.dpo_samples >= 2, w + "dpo_samples: pairing needs at least 2");
        rd.check(c.elicit.bio_samples >= 2, w + "bio_samples: pairing needs at least 2");
        try {
            elicit::parse_sft_policy(c.elicit.sft_policy);
        } catch (const std::exception& ex) {
            problems.push_back(w + "sft_policy: " + ex.what());
        }
    }

    if (const auto* r = rd.section(doc, "rewards", "", false)) {
        const std::string w = "rewards.";
        rd.unknown_keys(r, {"sentence_filter", "fact_unit", "judge_samples"}, w);
        rd.get(r, "sentence_filter", c.rewards.sentence_filter, w);
        rd.get(r, "fact_unit", c.rewards.fact_unit, w);
        rd.get(r, "judge_samples", c.rewards.judge_samples, w);
        rd.check(c.rewards.judge_samples >= 1 && c.rewards.judge_samples <= 3, w + "judge_samples: must lie in [1,3]");
        try {
            rewards::parse_fact_unit(c.rewards.fact_unit);
        } catch (const std::exception& ex) {
            problems.push_back(w + "fact_unit: " + ex.what());
        }
    }

    if (const auto* p = rd.section(doc, "pairing", "", false)) {
        const std::string w = "pairing.";
        rd.unknown_keys(p, {"strategy", "if_gap", "enum_band", "composite_weights"}, w);
        std::string strategy = "max_min";
        rd.get(p, "strategy", strategy, w);
        try {
            c.strategy = pairs::parse_strategy(strategy);
        } catch (const std::exception& ex) {
            problems.push_back(w + "strategy: " + ex.what());
        }
        rd.get(p, "if_gap", c.pairing.if_gap, w);
        rd.get(p, "enum_band", c.pairing.enum_band, w);
        std::vector<double> weights;
        if (rd.get(p, "composite_weights", weights, w)) {
            if (weights.size() == 2) {
                c.pairing.if_weight = weights[0];
                c.pairing.fact_weight = weights[1];
            } else {
                problems.push_back(w + "composite_weights: expected [if_weight, fact_weight]");
            }
        }
        rd.check(c.pairing.if_gap > 0, w + "if_gap: must be positive");
        rd.check(c.pairing.enum_band > 0, w + "enum_band: must be positive");
        rd.check(c.pairing.if_weight > 0 && c.pairing.fact_weight > 0, w + "composite_weights: must be positive");
    }

    if (const auto* t = rd.section(doc, "training", "", false)) {
        const std::string w = "training.";
        rd.unknown_keys(t, {"beta", "lr", "lr_final", "steps", "sft_batch", "dpo_batch", "max_seq", "mixing_policy"}, w);
        rd.get(t, "beta", c.training.beta, w);
        rd.get(t, "lr", c.training.lr, w);
        rd.get(t, "lr_final", c.training.lr_final, w);
        rd.get(t, "steps", c.training.steps, w);
        rd.get(t, "sft_batch", c.training.sft_batch, w);
        rd.get(t, "dpo_batch", c.training.dpo_batch, w);
        rd.get(t, "max_seq", c.training.max_seq, w);
        rd.get(t, "mixing_policy", c.training.mixing_policy, w);
        rd.check(c.training.beta > 0 && c.training.lr > 0 && c.training.lr_final > 0,
                 w + "beta, lr and lr_final must be positive");
        rd.check(c.training.steps > 0 && c.training.sft_batch > 0 && c.training.dpo_batch > 0 && c.training.max_seq > 0,
                 w + "steps, batch sizes and max_seq must be positive");
    }

    if (const auto* e = rd.section(doc, "eval", "", false)) {
        rd.unknown_keys(e, {"dataset_name"}, "eval.");
        rd.get(e, "dataset_name", c.eval_dataset, "eval.");
    }

    if (!problems.empty()) throw ConfigError(std::move(problems));
    c.resolved = resolved_json(c);
    return c;
}

RunConfig RunConfig::load(const fs::path& path) {
    Json doc;
    try {
        doc = load_json(path);
    } catch (const std::exception& e) {
        throw ConfigError({path.string() + ": " + e.what()});
    }
    return from_json(doc, fs::absolute(path).parent_path());
}

// ---------------------------------------------------------------------------
// Stage graph
// ---------------------------------------------------------------------------

std::string_view to_string(Stage s) {
    switch (s) {
        case Stage::classify: return "classify";
        case Stage::index: return "index";
        case Stage::elicit: return "elicit";
        case Stage::reward: return "reward";
        case Stage::pairs: return "pairs";
        case Stage::eval: return "eval";
    }
    return "?";
}

Stage parse_stage(std::string_view s) {
    for (auto st : kAllStages) {
        if (to_string(st) == s) return st;
    }
    throw std::invalid_argument("unknown stage '" + std::string(s) + "'");
}

std::string_view to_string(StageStatus s) {
    switch (s) {
        case StageStatus::ran: return "ran";
        case StageStatus::skipped: return "skipped";
        case StageStatus::failed: return "failed";
        case StageStatus::blocked: return "blocked";
        case StageStatus::planned: return "planned";
    }
    return "?";
}

std::vector<Stage> dependencies(Stage s, const RunConfig& c) {
    switch (s) {
        case Stage::classify:
        case Stage::index: return {};
        case Stage::elicit:
            if (c.elicit.rag) return {Stage::classify, Stage::index};
            return {Stage::classify};
        case Stage::reward: return {Stage::classify, Stage::index, Stage::elicit};
        case Stage::pairs: return {Stage::classify, Stage::elicit, Stage::reward};
        case Stage::eval: {
            std::vector<Stage> deps{Stage::index};
            if (!c.inputs.eval_instructions) deps.insert(deps.begin(), Stage::classify);
            if (!c.inputs.eval_responses) deps.push_back(Stage::elicit);
            return deps;
        }
    }
    return {};
}

std::vector<std::string> stage_outputs(Stage s, const RunConfig& c) {
    switch (s) {
        case Stage::classify: return {"classified_seed.jsonl", "classified_dpo.jsonl"};
        case Stage::index: return {"index.faidx"};
        case Stage::elicit: {
            std::vector<std::string> out{"elicited_responses.jsonl", "sft_dataset.jsonl", "policy_responses.jsonl"};
            if (c.inputs.bio_instructions) out.push_back("bio_responses.jsonl");
            return out;
        }
        case Stage::reward: return {"rewards.jsonl"};
        case Stage::pairs: {
            std::vector<std::string> out{"dpo_if.jsonl", "dpo_fact.jsonl"};
            if (c.inputs.bio_instructions) out.push_back("dpo_bio.jsonl");
            out.push_back("training_manifest.json");
            out.push_back("pair_summary.json");
            return out;
        }
        case Stage::eval: {
            std::vector<std::string> out{"eval_report.json", "eval_report.txt"};
            if (c.inputs.annotations) out.push_back("reward_model_validation.json");
            return out;
        }
    }
    return {};
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

namespace {

class Context {
  public:
    Context(const RunConfig& cfg, const RunOptions& opt)
        : cfg(cfg), opt(opt), seed(opt.seed.value_or(cfg.seed)), out(opt.out_dir.value_or(cfg.resolve(cfg.out_dir))) {
        if (cfg.prompts_dir) prompts.load_overrides(cfg.resolve(*cfg.prompts_dir));
    }

    const RunConfig& cfg;
    const RunOptions& opt;
    std::int64_t seed;
    fs::path out;
    prompts::PromptLibrary prompts;

    llm::Gateway& gateway() {
        if (gateway_) return *gateway_;
        auto gw = std::make_unique<llm::Gateway>();
        for (const auto& [id, b] : cfg.backends) {
            std::shared_ptr<llm::Backend> backend;
            if (auto it = opt.backend_overrides.find(id); it != opt.backend_overrides.end()) {
                backend = it->second;
            } else if (b.mock_script) {
                backend = std::make_shared<llm::MockBackend>(
                    llm::MockScript::load(cfg.resolve(*b.mock_script), llm::parse_fallback(b.fallback), b.fixed_text));
            } else {
                llm::HttpBackendConfig hc;
                hc.base_url = b.base_url;
                hc.timeout_ms = b.timeout_ms;
                hc.max_retries = b.max_retries;
                hc.supports_n = b.supports_n;
                backend = std::make_shared<llm::HttpBackend>(hc);
            }
            gw->register_backend(id, std::move(backend), b.max_in_flight);
        }
        if (cfg.cache_dir) gw->set_cache(std::make_shared<llm::ResponseCache>(cfg.resolve(*cfg.cache_dir)));
        gateway_ = std::move(gw);
        return *gateway_;
    }

    [[nodiscard]] std::uint64_t backend_calls() const { return gateway_ ? gateway_->stats().backend_calls : 0; }

    rewards::ModelRef model(const std::string& role) const {
        const auto& id = cfg.roles.at(role);
        return {id, cfg.backends.at(id).model};
    }

    SamplingParams sampling() const {
        auto s = cfg.sampling;
        s.seed = seed;
        return s;
    }

    const retrieval::LexicalIndex& index() {
        if (!index_) index_ = retrieval::LexicalIndex::load(out / "index.faidx");
        return *index_;
    }

    retrieval::Reranker& reranker() {
        if (!reranker_) {
            if (cfg.retrieval.reranker == "llm") {
                const auto m = model("reranker");
                reranker_ = std::make_unique<retrieval::LlmReranker>(gateway(), m.backend_id, m.model,
                                                                     prompts.get(prompts::kRerank).text);
            } else {
                reranker_ = std::make_unique<retrieval::IdentityReranker>();
            }
        }
        return *reranker_;
    }

    classify::Classifier classifier() {
        const auto m = model("classifier");
        return classify::Classifier(gateway(), {m.backend_id, m.model, prompts.get(prompts::kInstructionClassifier).text,
                                                prompts.get(prompts::kClaimClassifier).text});
    }

    rewards::RewardEnv reward_env() {
        return rewards::RewardEnv{gateway(), prompts, model("decomposer"), model("verifier"), model("judge"), seed};
    }

    rewards::FactRewardOptions fact_options() const {
        rewards::FactRewardOptions o;
        o.sentence_filter = cfg.rewards.sentence_filter;
        o.unit = rewards::parse_fact_unit(cfg.rewards.fact_unit);
        o.m_supports = cfg.retrieval.m_supports;
        o.k_retrieve = cfg.retrieval.k_retrieve;
        return o;
    }

    fs::path path(const char* name) const { return out / name; }

  private:
    std::unique_ptr<llm::Gateway> gateway_;
    std::optional<retrieval::LexicalIndex> index_;
    std::unique_ptr<retrieval::Reranker> reranker_;
};

std::map<std::string, std::vector<Response>> group_by_instruction(const std::vector<Response>& responses) {
    std::map<std::string, std::vector<Response>> out;
    for (const auto& r : responses) out[r.instruction_id].push_back(r);
    return out;
}

void run_classify(Context& ctx) {
    auto seeds = load_dataset<SeedRecord>(ctx.cfg.resolve(ctx.cfg.inputs.seed));
    auto dpo = load_dataset<Instruction>(ctx.cfg.resolve(ctx.cfg.inputs.dpo_instructions));
    const auto classifier = ctx.classifier();
    std::vector<Instruction> seed_instructions;
    for (const auto& s : seeds) seed_instructions.push_back(s.instruction);
    classify::classify_all(classifier, seed_instructions, ctx.cfg.workers);
    for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i].instruction.kind = seed_instructions[i].kind;
    classify::classify_all(classifier, dpo, ctx.cfg.workers);
    save_dataset(seeds, ctx.path("classified_seed.jsonl"));
    save_dataset(dpo, ctx.path("classified_dpo.jsonl"));
}

void run_index(Context& ctx) {
    const auto corpus = retrieval::Corpus::load(ctx.cfg.resolve(ctx.cfg.retrieval.corpus_path));
    const auto index = retrieval::LexicalIndex::build(corpus, {ctx.cfg.retrieval.k1, ctx.cfg.retrieval.b});
    index.save(ctx.path("index.faidx"));
    spdlog::info("index: {} passages, {} terms", index.doc_count(), index.terms().size());
}

std::vector<Response> flatten(const std::vector<elicit::SampleResult>& results) {
    std::vector<Response> out;
    for (const auto& r : results) out.insert(out.end(), r.responses.begin(), r.responses.end());
    return out;
}

void run_elicit(Context& ctx) {
    const auto& cfg = ctx.cfg;
    const auto seeds = load_dataset<SeedRecord>(ctx.path("classified_seed.jsonl"));
    const auto policy = elicit::parse_sft_policy(cfg.elicit.sft_policy);
    std::vector<elicit::SeedPair> seed_pairs;
    for (const auto& s : seeds) seed_pairs.push_back({s.instruction, s.human.text});

    std::vector<const SeedRecord*> targets;
    for (const auto& s : seeds) {
        if (policy == elicit::SftPolicy::no_classifier || s.instruction.kind == InstructionKind::fact_based) {
            targets.push_back(&s);
        }
    }
    const std::size_t k = std::min(cfg.elicit.demos, seeds.empty() ? 0 : seeds.size() - 1);
    if (k < cfg.elicit.demos) spdlog::warn("elicit: only {} demonstrations available (configured {})", k, cfg.elicit.demos);

    auto& gw = ctx.gateway();
    const auto base = ctx.model("base");
    const elicit::GenerationTarget base_target{base.backend_id, base.model};
    if (cfg.elicit.rag) ctx.index();
    auto& reranker = ctx.reranker();

    std::vector<elicit::SampleResult> pt(targets.size());
    parallel_for(targets.size(), cfg.workers, [&](std::size_t i) {
        const auto& x = targets[i]->instruction;
        auto prompt = elicit::build_fewshot_prompt(x, seed_pairs, k);
        if (cfg.elicit.rag) {
            const auto& index = ctx.index();
            auto supports = retrieval::top_supports(index, x.text, reranker, elicit::kRagTargetPassages,
                                                    cfg.retrieval.k_retrieve);
            for (auto& d : prompt.demos) {
                auto top = retrieval::top_supports(index, d.instruction, reranker, 1, cfg.retrieval.k_retrieve);
                if (!top.empty()) d.support = std::move(top.front());
            }
            prompt = elicit::build_rag_prompt(x, std::move(supports), std::move(prompt.demos));
        }
        pt[i] = elicit::sample_responses(prompt, cfg.elicit.sft_samples, ctx.sampling(), gw, base_target);
    });

    std::map<std::string, std::vector<Response>> pt_by_instruction;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        pt_by_instruction[targets[i]->instruction.id] = pt[i].responses;
    }
    const auto elicited = flatten(pt);
    const auto sft = elicit::build_sft_dataset(seeds, pt_by_instruction, policy);

    std::map<std::string, const SeedRecord*> seed_by_id;
    for (const auto& s : seeds) seed_by_id[s.instruction.id] = &s;
    std::map<std::string, const Response*> pt_by_id;
    for (const auto& r : elicited) pt_by_id[r.id] = &r;
    std::vector<elicit::SftRecord> rows;
    for (const auto& ex : sft.examples) {
        const auto* seed = seed_by_id.at(ex.instruction_id);
        const auto& text = ex.route == elicit::Route::human_response ? seed->human.text : pt_by_id.at(ex.response_id)->text;
        rows.push_back({ex, seed->instruction.text, text});
    }
    spdlog::info("elicit: {} SFT examples ({} instructions excluded)", rows.size(), sft.excluded.size());

    const auto policy_model = ctx.model("policy");
    const elicit::GenerationTarget policy_target{policy_model.backend_id, policy_model.model};
    const auto dpo = load_dataset<Instruction>(ctx.path("classified_dpo.jsonl"));
    std::vector<elicit::SampleResult> sampled(dpo.size());
    parallel_for(dpo.size(), cfg.workers, [&](std::size_t i) {
        sampled[i] = elicit::sample_policy_responses(dpo[i], cfg.elicit.dpo_samples, ctx.sampling(), gw, policy_target);
    });

    save_dataset(elicited, ctx.path("elicited_responses.jsonl"));
    save_dataset(rows, ctx.path("sft_dataset.jsonl"));
    save_dataset(flatten(sampled), ctx.path("policy_responses.jsonl"));

    if (cfg.inputs.bio_instructions) {
        const auto bio = load_dataset<Instruction>(cfg.resolve(*cfg.inputs.bio_instructions));
        std::vector<elicit::SampleResult> gens(bio.size());
        parallel_for(bio.size(), cfg.workers, [&](std::size_t i) {
            gens[i] = elicit::sample_policy_responses(bio[i], cfg.elicit.bio_samples, ctx.sampling(), gw, policy_target);
        });
        save_dataset(flatten(gens), ctx.path("bio_responses.jsonl"));
    }
}

std::map<std::string, Instruction> by_id(const std::vector<Instruction>& xs) {
    std::map<std::string, Instruction> out;
    for (const auto& x : xs) out[x.id] = x;
    return out;
}

std::vector<Instruction> bio_instructions(const Context& ctx) {
    auto bio = load_dataset<Instruction>(ctx.cfg.resolve(*ctx.cfg.inputs.bio_instructions));
    for (auto& x : bio) x.kind = InstructionKind::fact_based;
    return bio;
}

void run_reward(Context& ctx) {
    const auto& cfg = ctx.cfg;
    const auto dpo = by_id(load_dataset<Instruction>(ctx.path("classified_dpo.jsonl")));
    const auto responses = load_dataset<Response>(ctx.path("policy_responses.jsonl"));
    const auto env = ctx.reward_env();
    std::optional<classify::Classifier> sentence_classifier;
    if (cfg.rewards.sentence_filter) sentence_classifier.emplace(ctx.classifier());
    rewards::FactScorer scorer(env, ctx.index(), ctx.reranker(), ctx.fact_options(),
                               sentence_classifier ? &*sentence_classifier : nullptr);

    std::vector<RewardRecord> records(responses.size());
    parallel_for(responses.size(), cfg.workers, [&](std::size_t i) {
        const auto& r = responses[i];
        const auto& x = dpo.at(r.instruction_id);
        records[i].response_id = r.id;
        records[i].if_score = rewards::if_judge(x, r, env, cfg.rewards.judge_samples).score;
        if (x.kind == InstructionKind::fact_based) records[i].fact = scorer.score(r, x).reward;
    });

    if (cfg.inputs.bio_instructions) {
        const auto bio = by_id(bio_instructions(ctx));
        const auto gens = load_dataset<Response>(ctx.path("bio_responses.jsonl"));
        std::vector<RewardRecord> bio_records(gens.size());
        parallel_for(gens.size(), cfg.workers, [&](std::size_t i) {
            bio_records[i].response_id = gens[i].id;
            bio_records[i].fact = scorer.score(gens[i], bio.at(gens[i].instruction_id)).reward;
        });
        records.insert(records.end(), bio_records.begin(), bio_records.end());
    }
    std::size_t judge_failures = 0;
    std::size_t unscoreable = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (i < responses.size() && !r.if_score) ++judge_failures;
        if (r.fact && !r.fact->scoreable()) ++unscoreable;
    }
    spdlog::info("reward: {} records ({} without a judge score, {} with zero facts)", records.size(), judge_failures,
                 unscoreable);
    save_dataset(records, ctx.path("rewards.jsonl"));
}

void run_pairs(Context& ctx) {
    const auto& cfg = ctx.cfg;
    const auto dpo = load_dataset<Instruction>(ctx.path("classified_dpo.jsonl"));
    const auto responses = load_dataset<Response>(ctx.path("policy_responses.jsonl"));
    std::map<std::string, RewardRecord> rewards;
    for (auto& r : load_dataset<RewardRecord>(ctx.path("rewards.jsonl"))) rewards[r.response_id] = std::move(r);

    pairs::AssemblyInput in;
    auto candidates_for = [&](const std::vector<Response>& rs) {
        std::vector<pairs::Candidate> cands;
        for (const auto& r : rs) {
            pairs::Candidate c{r.id, std::nullopt, std::nullopt};
            if (auto it = rewards.find(r.id); it != rewards.end()) {
                if (it->second.if_score) c.if_mean = it->second.if_score->mean;
                if (it->second.fact) c.fact_value = it->second.fact->value;
            }
            cands.push_back(std::move(c));
        }
        return cands;
    };

    const auto grouped = group_by_instruction(responses);
    static const std::vector<Response> kNone;
    pairs::PairBatch if_batch;
    pairs::PairBatch fact_batch;
    for (const auto& x : dpo) {
        const auto it = grouped.find(x.id);
        const auto cands = candidates_for(it == grouped.end() ? kNone : it->second);
        if_batch.append(pairs::build_if_pairs(x.id, cands));
        ++in.if_candidates;
        if (x.kind == InstructionKind::fact_based) {
            fact_batch.append(pairs::build_fact_pairs(cfg.strategy, x.id, cands, cfg.pairing));
            ++in.fact_candidates;
        }
        in.instructions[x.id] = x;
    }
    for (const auto& r : responses) in.responses[r.id] = r;
    in.if_batch = std::move(if_batch);
    in.fact_batch = std::move(fact_batch);

    if (cfg.inputs.bio_instructions) {
        const auto bio = bio_instructions(ctx);
        const auto gens = load_dataset<Response>(ctx.path("bio_responses.jsonl"));
        const auto bio_grouped = group_by_instruction(gens);
        pairs::PairBatch bio_batch;
        for (const auto& x : bio) {
            const auto it = bio_grouped.find(x.id);
            const auto& rs = it == bio_grouped.end() ? kNone : it->second;
            if (rs.size() < 2) {
                bio_batch.discarded.push_back({x.id, pairs::DiscardReason::unscoreable});
                continue;
            }
            std::vector<std::string> ids;
            std::vector<std::optional<double>> fs;
            for (const auto& r : rs) {
                ids.push_back(r.id);
                const auto rw = rewards.find(r.id);
                fs.push_back(rw != rewards.end() && rw->second.fact ? rw->second.fact->value : std::nullopt);
            }
            bio_batch.append(pairs::build_bio_fs_pairs(x.id, ids, fs));
            in.instructions[x.id] = x;
        }
        for (const auto& r : gens) in.responses[r.id] = r;
        in.bio_batch = std::move(bio_batch);
    }
    if (fs::exists(ctx.path("sft_dataset.jsonl"))) in.sft_files.push_back("sft_dataset.jsonl");
    pairs::assemble_dpo_dataset(in, ctx.out, cfg.training);
}

void run_eval(Context& ctx) {
    const auto& cfg = ctx.cfg;
    std::map<std::string, Instruction> instructions;
    std::vector<Response> responses;
    if (cfg.inputs.eval_responses) {
        responses = load_dataset<Response>(cfg.resolve(*cfg.inputs.eval_responses));
        const auto xs = cfg.inputs.eval_instructions
                            ? load_dataset<Instruction>(cfg.resolve(*cfg.inputs.eval_instructions))
                            : load_dataset<Instruction>(ctx.path("classified_dpo.jsonl"));
        instructions = by_id(xs);
    } else {
        instructions = by_id(load_dataset<Instruction>(ctx.path("classified_dpo.jsonl")));
        for (auto& r : load_dataset<Response>(ctx.path("policy_responses.jsonl"))) {
            if (instructions.at(r.instruction_id).kind == InstructionKind::fact_based) responses.push_back(std::move(r));
        }
    }
    for (const auto& r : responses) {
        if (!instructions.contains(r.instruction_id)) {
            throw std::invalid_argument("eval: response " + r.id + " refers to unknown instruction " + r.instruction_id);
        }
    }

    const auto env = ctx.reward_env();
    std::optional<classify::Classifier> sentence_classifier;
    if (cfg.rewards.sentence_filter) sentence_classifier.emplace(ctx.classifier());
    rewards::FactScorer scorer(env, ctx.index(), ctx.reranker(), ctx.fact_options(),
                               sentence_classifier ? &*sentence_classifier : nullptr);
    std::vector<FactReward> scored(responses.size());
    parallel_for(responses.size(), cfg.workers, [&](std::size_t i) {
        scored[i] = scorer.score(responses[i], instructions.at(responses[i].instruction_id)).reward;
    });

    const auto report = eval::make_report(cfg.eval_dataset, responses, scored);
    const auto lengths =
        eval::length_stats(responses, [](const Response& r) { return std::string(to_string(r.origin)); });
    Json length_json = Json::object();
    eval::LengthCells cells;
    std::vector<std::string> cols;
    for (const auto& [origin, st] : lengths) {
        length_json[origin] = Json{{"mean_chars", st.mean}, {"count", st.count}};
        cells[{cfg.eval_dataset, origin}] = st;
        cols.push_back(origin);
    }
    const std::vector<std::string> rows{cfg.eval_dataset};
    std::string text = eval::render_report(report) + "\nMean response length (characters)\n" +
                       eval::render_length_table(cells, rows, cols);

    Json doc{{"report", report}, {"length_by_origin", length_json}};
    if (cfg.inputs.annotations) {
        const auto annotations = load_dataset<AnnotatedResponse>(cfg.resolve(*cfg.inputs.annotations));
        std::map<std::string, std::size_t> rm_errors;
        std::set<std::string> annotated;
        for (const auto& a : annotations) annotated.insert(a.response_id);
        for (std::size_t i = 0; i < responses.size(); ++i) {
            if (annotated.contains(responses[i].id)) rm_errors[responses[i].id] = scored[i].n_error();
        }
        const auto tau = eval::validate_reward_model(annotations, rm_errors, cfg.rewards.fact_unit, cfg.retrieval.m_supports);
        save_json(Json(tau), ctx.path("reward_model_validation.json"));
        char buf[128];
        std::snprintf(buf, sizeof buf, "\nKendall tau-b vs human error counts: %.4f (n=%zu, %s facts, %zu supports)\n",
                      tau.tau, tau.n, tau.fact_unit.c_str(), tau.m_supports);
        text += buf;
    }
    save_json(doc, ctx.path("eval_report.json"));
    detail::write_atomically(ctx.path("eval_report.txt"), text);
    spdlog::info("eval: FS {:.1f} over {} scoreable responses ({} unscoreable)", report.mean_fs * 100.0,
                 report.scoreable_count(), report.unscoreable_count);
}

void execute(Stage s, Context& ctx) {
    switch (s) {
        case Stage::classify: return run_classify(ctx);
        case Stage::index: return run_index(ctx);
        case Stage::elicit: return run_elicit(ctx);
        case Stage::reward: return run_reward(ctx);
        case Stage::pairs: return run_pairs(ctx);
        case Stage::eval: return run_eval(ctx);
    }
}

// Config sections and files a stage's result depends on.
struct StageInputs {
    Json config;
    std::vector<fs::path> files;
};

StageInputs stage_inputs(Stage s, const Context& ctx) {
    const auto& cfg = ctx.cfg;
    const auto& r = cfg.resolved;
    StageInputs in;
    std::set<std::string> backend_ids;
    auto role = [&](const char* name) {
        if (!cfg.roles.contains(name)) return;
        in.config["roles"][name] = cfg.roles.at(name);
        backend_ids.insert(cfg.roles.at(name));
    };
    auto upstream = [&](Stage u) {
        for (const auto& f : stage_outputs(u, cfg)) {
            if (fs::exists(ctx.out / f)) in.files.push_back(ctx.out / f);
        }
    };
    const bool llm_reranker = cfg.retrieval.reranker == "llm";
    switch (s) {
        case Stage::classify:
            role("classifier");
            in.files = {cfg.resolve(cfg.inputs.seed), cfg.resolve(cfg.inputs.dpo_instructions)};
            break;
        case Stage::index:
            in.config["retrieval"] = Json{{"corpus_path", r["retrieval"]["corpus_path"]},
                                          {"k1", r["retrieval"]["k1"]},
                                          {"b", r["retrieval"]["b"]}};
            in.files = {cfg.resolve(cfg.retrieval.corpus_path)};
            break;
        case Stage::elicit:
            role("base");
            role("policy");
            if (cfg.elicit.rag && llm_reranker) role("reranker");
            in.config["elicit"] = r["elicit"];
            in.config["sampling"] = r["sampling"];
            if (cfg.elicit.rag) in.config["retrieval"] = r["retrieval"];
            upstream(Stage::classify);
            if (cfg.elicit.rag) upstream(Stage::index);
            if (cfg.inputs.bio_instructions) in.files.push_back(cfg.resolve(*cfg.inputs.bio_instructions));
            break;
        case Stage::reward:
        case Stage::eval:
            role("judge");
            role("decomposer");
            role("verifier");
            if (cfg.rewards.sentence_filter) role("classifier");
            if (llm_reranker) role("reranker");
            in.config["rewards"] = r["rewards"];
            in.config["retrieval"] = r["retrieval"];
            upstream(Stage::index);
            if (s == Stage::reward) {
                upstream(Stage::classify);
                upstream(Stage::elicit);
                if (cfg.inputs.bio_instructions) in.files.push_back(cfg.resolve(*cfg.inputs.bio_instructions));
            } else {
                in.config["eval"] = r["eval"];
                for (auto dep : dependencies(s, cfg)) {
                    if (dep != Stage::index) upstream(dep);
                }
                for (const auto& p : {cfg.inputs.eval_instructions, cfg.inputs.eval_responses, cfg.inputs.annotations}) {
                    if (p) in.files.push_back(cfg.resolve(*p));
                }
            }
            break;
        case Stage::pairs:
            in.config["pairing"] = r["pairing"];
            in.config["training"] = r["training"];
            upstream(Stage::classify);
            upstream(Stage::elicit);
            upstream(Stage::reward);
            if (cfg.inputs.bio_instructions) in.files.push_back(cfg.resolve(*cfg.inputs.bio_instructions));
            break;
    }
    for (const auto& id : backend_ids) {
        in.config["backends"][id] = r["backends"][id];
        const auto& b = cfg.backends.at(id);
        if (b.mock_script) in.files.push_back(cfg.resolve(*b.mock_script));
    }
    return in;
}

// nullopt when an input is missing; the stage then always runs.
std::optional<std::string> stage_key(Stage s, const Context& ctx, const std::string& prompts_digest) {
    const auto in = stage_inputs(s, ctx);
    Json files = Json::object();
    for (const auto& f : in.files) {
        if (!fs::exists(f)) return std::nullopt;
        // upstream outputs: relative to the output directory
        const auto rel = f.lexically_relative(ctx.out);
        const bool in_out = !rel.empty() && *rel.begin() != "..";
        const auto name = in_out ? "out/" + rel.generic_string() : f.lexically_relative(ctx.cfg.base_dir).generic_string();
        files[name] = file_digest(f);
    }
    const Json doc{{"stage", to_string(s)},
                   {"tool_version", FACTALIGN_VERSION},
                   {"seed", ctx.seed},
                   {"prompts", prompts_digest},
                   {"config", in.config},
                   {"files", files}};
    return sha256_hex(doc.dump());
}

bool outputs_intact(const Json& entry, const fs::path& out) {
    if (!entry.contains("outputs")) return false;
    for (const auto& [name, digest] : entry.at("outputs").items()) {
        const auto p = out / name;
        if (!fs::exists(p) || file_digest(p) != digest.get<std::string>()) return false;
    }
    return true;
}

}  // namespace

RunResult run_stages(const RunConfig& config, std::span<const Stage> requested, const RunOptions& options) {
    RunResult result;
    Context ctx(config, options);
    result.out_dir = ctx.out;
    const auto prompts_digest = ctx.prompts.digest();

    std::vector<Stage> order;
    for (auto s : kAllStages) {
        if (std::find(requested.begin(), requested.end(), s) != requested.end()) order.push_back(s);
    }

    const auto manifest_path = ctx.out / kManifestFile;
    Json manifest = fs::exists(manifest_path) ? load_json(manifest_path) : Json::object();
    if (!manifest.contains("stages")) manifest["stages"] = Json::object();

    if (options.dry_run) {
        std::ostringstream plan;
        plan << "output directory: " << ctx.out.string() << '\n';
        for (auto s : order) {
            std::vector<std::string> deps;
            for (auto d : dependencies(s, config)) deps.emplace_back(to_string(d));
            std::string action = "run";
            if (options.resume) {
                const auto key = stage_key(s, ctx, prompts_digest);
                const auto& stages = manifest["stages"];
                const auto name = std::string(to_string(s));
                if (key && stages.contains(name) && stages[name].value("key", "") == *key &&
                    outputs_intact(stages[name], ctx.out)) {
                    action = "skip (up to date)";
                }
            }
            plan << to_string(s) << "  <- [" << join(deps, ", ") << "]  " << action << '\n';
            result.stages.push_back({s, StageStatus::planned, action, 0.0});
        }
        result.plan = plan.str();
        return result;
    }

    fs::create_directories(ctx.out);
    std::set<Stage> bad;
    for (auto s : order) {
        const auto name = std::string(to_string(s));
        StageOutcome outcome{s, StageStatus::ran, "", 0.0};
        const auto deps = dependencies(s, config);
        const auto blocker = std::find_if(deps.begin(), deps.end(), [&](Stage d) { return bad.contains(d); });
        if (blocker != deps.end()) {
            outcome.status = StageStatus::blocked;
            outcome.message = "upstream stage " + std::string(to_string(*blocker)) + " did not complete";
            spdlog::error("{}: blocked ({})", name, outcome.message);
            bad.insert(s);
            result.stages.push_back(outcome);
            continue;
        }

        std::optional<std::string> key;
        try {
            key = stage_key(s, ctx, prompts_digest);
        } catch (const std::exception& e) {
            spdlog::warn("{}: cannot digest inputs: {}", name, e.what());
        }
        auto& entry = manifest["stages"][name];
        if (options.resume && key && entry.is_object() && entry.value("key", "") == *key &&
            outputs_intact(entry, ctx.out)) {
            outcome.status = StageStatus::skipped;
            outcome.message = "inputs unchanged";
            spdlog::info("{}: skipped, inputs unchanged", name);
            result.stages.push_back(outcome);
            continue;
        }

        spdlog::info("{}: running", name);
        const auto t0 = std::chrono::steady_clock::now();
        try {
            execute(s, ctx);
        } catch (const std::exception& e) {
            outcome.status = StageStatus::failed;
            outcome.message = e.what();
            spdlog::error("{}: failed: {}", name, e.what());
            bad.insert(s);
            manifest["stages"].erase(name);
            result.stages.push_back(outcome);
            continue;
        }
        outcome.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

        Json outputs = Json::object();
        for (const auto& f : stage_outputs(s, config)) {
            const auto p = ctx.out / f;
            if (!fs::exists(p)) continue;
            outputs[f] = file_digest(p);
            result.written.push_back(p);
        }
        // Key over the inputs as they are now that upstream outputs exist.
        if (!key) key = stage_key(s, ctx, prompts_digest);
        manifest["stages"][name] = Json{{"key", key.value_or("")}, {"outputs", outputs}, {"wall_ms", outcome.wall_ms}};
        manifest["tool_version"] = FACTALIGN_VERSION;
        manifest["config_digest"] = sha256_hex(config.resolved.dump());
        manifest["seed"] = ctx.seed;
        manifest["prompts_digest"] = prompts_digest;
        save_json(manifest, manifest_path);
        result.written.push_back(manifest_path);
        spdlog::info("{}: done in {:.0f} ms", name, outcome.wall_ms);
        result.stages.push_back(outcome);
    }
    result.backend_calls = ctx.backend_calls();
    result.exit_code = bad.empty() ? 0 : 1;
    return result;
}

RunResult run_pipeline(const RunConfig& config, const RunOptions& options) {
    return run_stages(config, kAllStages, options);
}

}  // namespace factalign::cli
