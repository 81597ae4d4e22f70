#include "factalign/elicit.hpp"

#include <algorithm>

#include <spdlog/spdlog.h>

#include "factalign/retrieval.hpp"

namespace factalign::elicit {

namespace {

void render_passage(std::string& out, const Passage& p) {
    out += kPassageHeader;
    out += '\n';
    if (!p.title.empty()) {
        out += p.title;
        out += ": ";
    }
    out += p.text;
    out += "\n\n";
}

}  // namespace

std::string FewShotPrompt::render() const {
    if (demos.empty() && (!rag_supports || rag_supports->empty())) return target_instruction;
    std::string out;
    for (const auto& d : demos) {
        if (d.support) render_passage(out, *d.support);
        out += kInstructionHeader;
        out += '\n';
        out += d.instruction;
        out += "\n\n";
        out += kResponseHeader;
        out += '\n';
        out += d.response;
        out += '\n';
        out += kDemoBoundary;
        out += "\n\n";
    }
    if (rag_supports) {
        for (const auto& p : *rag_supports) render_passage(out, p);
    }
    out += kInstructionHeader;
    out += '\n';
    out += target_instruction;
    out += "\n\n";
    out += kResponseHeader;
    out += '\n';
    return out;
}

FewShotPrompt build_fewshot_prompt(const Instruction& x, std::span<const SeedPair> seed_pairs, std::size_t k) {
    std::vector<Instruction> pool;
    pool.reserve(seed_pairs.size());
    for (const auto& s : seed_pairs) {
        if (s.instruction.id != x.id) pool.push_back(s.instruction);
    }
    if (k > pool.size()) {
        throw std::invalid_argument("build_fewshot_prompt: k=" + std::to_string(k) + " exceeds the " +
                                    std::to_string(pool.size()) + " available demonstrations");
    }
    FewShotPrompt prompt;
    prompt.target_id = x.id;
    prompt.target_instruction = x.text;
    if (k == 0) return prompt;

    auto nearest = retrieval::similar_instructions(pool, x, k);
    std::reverse(nearest.begin(), nearest.end());
    for (const auto& n : nearest) {
        const auto it = std::find_if(seed_pairs.begin(), seed_pairs.end(),
                                     [&](const SeedPair& s) { return s.instruction.id == n.id; });
        prompt.demos.push_back(Demo{n.id, n.text, it->response, std::nullopt});
    }
    return prompt;
}

FewShotPrompt build_rag_prompt(const Instruction& x, std::vector<Passage> supports, std::vector<Demo> demos) {
    for (const auto& d : demos) {
        if (d.instruction_id == x.id) throw std::invalid_argument("build_rag_prompt: target appears among its demos");
    }
    if (supports.empty()) spdlog::warn("rag prompt for {}: no supports retrieved", x.id);
    if (supports.size() > kRagTargetPassages) supports.resize(kRagTargetPassages);
    FewShotPrompt prompt;
    prompt.target_id = x.id;
    prompt.target_instruction = x.text;
    prompt.demos = std::move(demos);
    prompt.rag_supports = std::move(supports);
    return prompt;
}

std::string truncate_at_boundary(std::string_view generated) {
    auto cut = generated.size();
    for (auto marker : {kDemoBoundary, kInstructionHeader}) {
        cut = std::min(cut, generated.find(marker));
    }
    return std::string(trim(generated.substr(0, cut)));
}

namespace {

SampleResult collect(std::string_view instruction_id, ResponseOrigin origin, const llm::ChatRequest& request,
                     llm::Gateway& gateway, bool truncate) {
    SampleResult result;
    const int n = request.sampling.n_samples;
    std::vector<llm::Completion> completions;
    try {
        completions = gateway.cached_complete(request);
    } catch (const llm::GatewayError& e) {
        spdlog::warn("sampling {}: {}", instruction_id, e.what());
        for (int i = 0; i < n; ++i) result.failures.push_back({i, e.what()});
        return result;
    }
    for (const auto& c : completions) {
        if (!c.ok()) {
            result.failures.push_back({c.sample_index, "backend error"});
            continue;
        }
        auto text = truncate ? truncate_at_boundary(c.text) : std::string(trim(c.text));
        if (text.empty()) {
            result.failures.push_back({c.sample_index, "empty generation"});
            continue;
        }
        Response r;
        r.id = Response::make_id(instruction_id, origin, static_cast<std::size_t>(c.sample_index), text);
        r.instruction_id = std::string(instruction_id);
        r.text = std::move(text);
        r.origin = origin;
        r.sampling = request.sampling;
        result.responses.push_back(std::move(r));
    }
    if (!result.failures.empty()) {
        spdlog::warn("sampling {}: {} of {} samples failed", instruction_id, result.failures.size(), n);
    }
    return result;
}

}  // namespace

SampleResult sample_responses(const FewShotPrompt& prompt, int n, SamplingParams sampling, llm::Gateway& gateway,
                              const GenerationTarget& target) {
    sampling.n_samples = n;
    const auto origin = prompt.rag_supports ? ResponseOrigin::pt_rag : ResponseOrigin::pt_fewshot;
    const auto request = llm::ChatRequest::user_prompt(target.backend_id, target.model, prompt.render(), sampling);
    return collect(prompt.target_id, origin, request, gateway, true);
}

SampleResult sample_policy_responses(const Instruction& x, int n, SamplingParams sampling, llm::Gateway& gateway,
                                     const GenerationTarget& target) {
    sampling.n_samples = n;
    const auto request = llm::ChatRequest::user_prompt(target.backend_id, target.model, x.text, sampling);
    return collect(x.id, ResponseOrigin::sft_model, request, gateway, false);
}

std::string_view to_string(Route r) { return r == Route::human_response ? "human_response" : "pt_response"; }

std::string_view to_string(SftPolicy p) { return p == SftPolicy::classifier ? "classifier" : "no_classifier"; }

SftPolicy parse_sft_policy(std::string_view s) {
    if (s == "classifier" || s == "default") return SftPolicy::classifier;
    if (s == "no_classifier") return SftPolicy::no_classifier;
    throw std::invalid_argument("unknown SFT policy '" + std::string(s) + "'");
}

SftBuild build_sft_dataset(std::span<const SeedRecord> classified_seed,
                           const std::map<std::string, std::vector<Response>>& pt_samples, SftPolicy policy) {
    SftBuild out;
    static const std::vector<Response> kNone;
    for (const auto& seed : classified_seed) {
        const auto& x = seed.instruction;
        const auto it = pt_samples.find(x.id);
        const auto& samples = it == pt_samples.end() ? kNone : it->second;

        if (policy == SftPolicy::no_classifier) {
            const double human_weight = samples.empty() ? 1.0 : 0.5;
            out.examples.push_back({x.id, seed.human.id, Route::human_response, human_weight});
            for (const auto& r : samples) {
                out.examples.push_back(
                    {x.id, r.id, Route::pt_response, 0.5 / static_cast<double>(samples.size())});
            }
            continue;
        }

        switch (x.kind) {
            case InstructionKind::non_fact_based:
                out.examples.push_back({x.id, seed.human.id, Route::human_response, 1.0});
                break;
            case InstructionKind::fact_based:
                if (samples.empty()) {
                    spdlog::warn("sft: fact-based instruction {} has no PT samples; excluded", x.id);
                    out.excluded.push_back(x.id);
                    break;
                }
                for (const auto& r : samples) {
                    out.examples.push_back({x.id, r.id, Route::pt_response, 1.0 / static_cast<double>(samples.size())});
                }
                break;
            case InstructionKind::unclassified:
                throw std::invalid_argument("build_sft_dataset: instruction " + x.id + " is unclassified");
        }
    }
    return out;
}

void to_json(Json& j, const SftRecord& v) {
    j = Json{{"instruction_id", v.example.instruction_id},
             {"response_id", v.example.response_id},
             {"route", to_string(v.example.route)},
             {"sampler_weight", v.example.sampler_weight},
             {"instruction", v.instruction},
             {"response", v.response}};
}

void from_json(const Json& j, SftRecord& v) {
    v.example.instruction_id = j.at("instruction_id").get<std::string>();
    v.example.response_id = j.at("response_id").get<std::string>();
    const auto route = j.at("route").get<std::string>();
    if (route == "human_response") {
        v.example.route = Route::human_response;
    } else if (route == "pt_response") {
        v.example.route = Route::pt_response;
    } else {
        throw std::invalid_argument("unknown route '" + route + "'");
    }
    v.example.sampler_weight = j.value("sampler_weight", 1.0);
    v.instruction = j.at("instruction").get<std::string>();
    v.response = j.at("response").get<std::string>();
}

std::string record_key(const SftRecord& v) { return v.example.response_id; }

void validate_record(const SftRecord& v) {
    if (v.example.instruction_id.empty() || v.example.response_id.empty()) {
        throw InvariantError("sft example has an empty id");
    }
    if (!(v.example.sampler_weight > 0.0 && v.example.sampler_weight <= 1.0)) {
        throw InvariantError("sampler_weight must lie in (0,1]");
    }
}

}  // namespace factalign::elicit
