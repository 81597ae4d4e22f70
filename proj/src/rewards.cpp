#include "factalign/rewards.hpp"

#include <algorithm>
#include <array>
#include <cctype>

#include <spdlog/spdlog.h>

namespace factalign::rewards {

// ---------------------------------------------------------------------------
// Sentence splitting
// ---------------------------------------------------------------------------

namespace {

constexpr std::array<std::string_view, 58> kAbbreviations = {
    "Mr",    "Mrs",  "Ms",   "Dr",   "Prof", "Sr",   "Jr",   "St",   "Mt",   "Ft",   "Gen",  "Gov",
    "Sen",   "Rep",  "Rev",  "Capt", "Col",  "Lt",   "Sgt",  "Maj",  "Hon",  "Pres", "Supt", "Messrs",
    "Jan",   "Feb",  "Mar",  "Apr",  "Jun",  "Jul",  "Aug",  "Sep",  "Sept", "Oct",  "Nov",  "Dec",
    "No",    "Nos",  "Vol",  "vol",  "pp",   "p",    "Fig",  "fig",  "vs",   "cf",   "al",   "approx",
    "ca",    "est",  "Ave",  "Blvd", "Rd",   "Univ", "Dept", "Assn", "Bros", "Op"};

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }
bool is_upper(char c) { return c >= 'A' && c <= 'Z'; }
bool is_digit(char c) { return c >= '0' && c <= '9'; }
bool is_alpha(char c) { return (c >= 'a' && c <= 'z') || is_upper(c); }

// Byte length of a closing quote/bracket at p, 0 if none.
std::size_t closer_len(std::string_view t, std::size_t p) {
    const char c = t[p];
    if (c == '"' || c == '\'' || c == ')' || c == ']') return 1;
    if (t.substr(p).starts_with("”") || t.substr(p).starts_with("’")) return 3;
    if (t.substr(p).starts_with("»")) return 2;
    return 0;
}

std::size_t opener_len(std::string_view t, std::size_t p) {
    const char c = t[p];
    if (c == '"' || c == '\'' || c == '(' || c == '[') return 1;
    if (t.substr(p).starts_with("“") || t.substr(p).starts_with("‘")) return 3;
    if (t.substr(p).starts_with("«")) return 2;
    return 0;
}

// Uppercase letter or digit, possibly after opening quotes. Latin-1 capitals
// (U+00C0..U+00DE except U+00D7) count as uppercase.
bool starts_sentence(std::string_view t, std::size_t p) {
    while (p < t.size()) {
        const auto n = opener_len(t, p);
        if (n == 0) break;
        p += n;
    }
    if (p >= t.size()) return false;
    const char c = t[p];
    if (is_upper(c) || is_digit(c)) return true;
    if (static_cast<unsigned char>(c) == 0xC3 && p + 1 < t.size()) {
        const auto c2 = static_cast<unsigned char>(t[p + 1]);
        return c2 >= 0x80 && c2 <= 0x9E && c2 != 0x97;
    }
    return false;
}

std::size_t line_start(std::string_view t, std::size_t p) {
    while (p > 0 && t[p - 1] != '\n') --p;
    return p;
}

// "- x", "* x", "+ x", bullet, "# heading", "12. x", "3) x", "a) x".
bool is_list_item(std::string_view t, std::size_t p) {
    while (p < t.size() && (t[p] == ' ' || t[p] == '\t')) ++p;
    if (p >= t.size()) return false;
    const auto rest = t.substr(p);
    if (rest.starts_with("- ") || rest.starts_with("* ") || rest.starts_with("+ ") || rest.starts_with("#") ||
        rest.starts_with("•")) {
        return true;
    }
    std::size_t q = p;
    while (q < t.size() && is_digit(t[q])) ++q;
    if (q == p && q < t.size() && is_alpha(t[q])) q = p + 1;
    return q > p && q + 1 < t.size() && (t[q] == '.' || t[q] == ')') && is_space(t[q + 1]);
}

// Acronyms written with periods: U.S, e.g, a.m, Ph.D.
bool dotted_acronym(std::string_view tok) {
    if (tok.find('.') == std::string_view::npos) return false;
    std::size_t run = 0;
    for (char c : tok) {
        if (c == '.') {
            if (run == 0 || run > 2) return false;
            run = 0;
        } else if (is_alpha(c)) {
            ++run;
        } else {
            return false;
        }
    }
    return run >= 1 && run <= 2;
}

// Whether the period at `dot` belongs to an abbreviation, an initial, or a
// list marker rather than ending a sentence.
bool period_suppressed(std::string_view t, std::size_t dot) {
    std::size_t b = dot;
    while (b > 0 && !is_space(t[b - 1])) --b;
    while (b < dot && opener_len(t, b) > 0) b += opener_len(t, b);
    const auto tok = t.substr(b, dot - b);
    if (tok.empty()) return false;
    if (std::find(kAbbreviations.begin(), kAbbreviations.end(), tok) != kAbbreviations.end()) return true;
    if (tok.size() == 1 && is_upper(tok[0])) return true;
    if (dotted_acronym(tok)) return true;
    const bool at_line_start = trim(t.substr(line_start(t, b), b - line_start(t, b))).empty();
    if (at_line_start && std::all_of(tok.begin(), tok.end(), [](char c) { return is_digit(c); })) return true;
    return false;
}

}  // namespace

std::span<const std::string_view> abbreviations() { return kAbbreviations; }

std::vector<Sentence> split_sentences(std::string_view text) {
    std::vector<std::size_t> cuts;
    const std::size_t n = text.size();
    std::size_t last_cut = 0;
    auto has_content_since_cut = [&](std::size_t upto) {
        for (std::size_t p = last_cut; p < upto; ++p) {
            if (!is_space(text[p])) return true;
        }
        return false;
    };
    auto cut = [&](std::size_t at) {
        cuts.push_back(at);
        last_cut = at;
    };

    std::size_t i = 0;
    while (i < n) {
        const char c = text[i];
        if (c == '.' || c == '!' || c == '?') {
            std::size_t j = i;
            while (j < n && (text[j] == '.' || text[j] == '!' || text[j] == '?')) ++j;
            std::size_t k = j;
            while (k < n) {
                const auto len = closer_len(text, k);
                if (len == 0) break;
                k += len;
            }
            std::size_t ws = k;
            std::size_t newlines = 0;
            while (ws < n && is_space(text[ws])) newlines += text[ws++] == '\n';
            if (ws == n) break;
            if (ws == k) {
                i = j;
                continue;
            }
            const bool paragraph = newlines >= 2 || (newlines == 1 && (is_list_item(text, ws) ||
                                                                       is_list_item(text, line_start(text, i))));
            const bool single_period = c == '.' && j == i + 1;
            if (paragraph || (starts_sentence(text, ws) && !(single_period && period_suppressed(text, i)))) {
                cut(ws);
            }
            i = ws;
            continue;
        }
        if (c == '\n') {
            std::size_t ws = i;
            std::size_t newlines = 0;
            while (ws < n && is_space(text[ws])) newlines += text[ws++] == '\n';
            if (ws == n) break;
            const bool boundary = newlines >= 2 || is_list_item(text, line_start(text, i)) || is_list_item(text, ws);
            if (boundary && has_content_since_cut(i)) cut(ws);
            i = ws;
            continue;
        }
        ++i;
    }

    std::vector<Sentence> out;
    if (n == 0) return out;
    std::size_t start = 0;
    cuts.push_back(n);
    for (auto end : cuts) {
        out.push_back(Sentence{out.size(), std::string(text.substr(start, end - start)), std::nullopt});
        start = end;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Decomposition and verification
// ---------------------------------------------------------------------------

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::optional<std::string> first_reply(llm::Gateway& gateway, const ModelRef& model, std::string prompt,
                                       std::string_view what) {
    try {
        const auto replies = gateway.cached_complete(
            llm::ChatRequest::user_prompt(model.backend_id, model.model, std::move(prompt), SamplingParams::greedy()));
        if (!replies.empty() && replies.front().ok()) return replies.front().text;
        spdlog::warn("{}: backend returned an error", what);
    } catch (const llm::GatewayError& e) {
        spdlog::warn("{}: {}", what, e.what());
    }
    return std::nullopt;
}

}  // namespace

Decomposition parse_fact_list(std::string_view reply) {
    Decomposition d;
    d.raw_reply = std::string(reply);
    bool saw_item = false;
    std::size_t pos = 0;
    while (pos <= reply.size()) {
        auto eol = reply.find('\n', pos);
        if (eol == std::string_view::npos) eol = reply.size();
        auto line = trim(reply.substr(pos, eol - pos));
        pos = eol + 1;
        std::size_t marker = 0;
        if (line.starts_with("- ") || line.starts_with("* ")) {
            marker = 2;
        } else if (line.starts_with("•")) {
            marker = 3;
        } else if (line == "-") {
            marker = 1;
        }
        if (marker == 0) continue;
        saw_item = true;
        const auto fact = trim(line.substr(marker));
        if (!fact.empty()) d.facts.emplace_back(fact);
    }
    if (saw_item) return d;
    const auto t = lower(trim(reply));
    for (std::string_view empty : {"none", "none.", "[]", "no facts", "no facts."}) {
        if (t == empty) return d;
    }
    d.parse_error = true;
    return d;
}

Decomposition decompose_facts(std::string_view sentence, const RewardEnv& env) {
    if (trim(sentence).empty()) throw std::invalid_argument("decompose_facts: empty sentence");
    const auto prompt =
        prompts::render(env.prompts.get(prompts::kAtomicFacts).text, {{"sentence", std::string(trim(sentence))}});
    const auto reply = first_reply(env.gateway, env.decomposer, prompt, "decompose");
    if (!reply) {
        Decomposition d;
        d.parse_error = true;
        return d;
    }
    return parse_fact_list(*reply);
}

Verdict parse_verdict_reply(std::string_view reply) {
    auto t = trim(reply);
    while (!t.empty() && (t.front() == '*' || t.front() == '"' || t.front() == '\'')) t.remove_prefix(1);
    const auto head = lower(t.substr(0, std::min<std::size_t>(t.size(), 6)));
    auto token_ends = [&](std::size_t len) {
        return t.size() == len || !std::isalnum(static_cast<unsigned char>(t[len]));
    };
    if (head.starts_with("true") && token_ends(4)) return Verdict::supported;
    if (head.starts_with("false") && token_ends(5)) return Verdict::not_supported;
    return Verdict::parse_error;
}

std::string render_supports(std::span<const Passage> supports) {
    std::string out;
    for (std::size_t i = 0; i < supports.size(); ++i) {
        if (i) out += "\n\n";
        out += "Title: ";
        out += supports[i].title;
        out += "\nText: ";
        out += supports[i].text;
    }
    return out;
}

VerificationRecord verify_claim(std::string_view fact, std::span<const Passage> supports, const RewardEnv& env) {
    if (supports.size() > retrieval::kDefaultSupports) supports = supports.first(retrieval::kDefaultSupports);
    VerificationRecord rec;
    rec.fact_text = std::string(fact);
    for (const auto& p : supports) rec.supports_used.push_back(p.doc_id);
    const auto prompt = prompts::render(env.prompts.get(prompts::kFactCheck).text,
                                        {{"supports", render_supports(supports)}, {"claim", std::string(fact)}});
    const auto reply = first_reply(env.gateway, env.verifier, prompt, "verify");
    if (!reply) return rec;
    rec.raw_reply = *reply;
    rec.verdict = parse_verdict_reply(*reply);
    return rec;
}

std::string_view to_string(FactUnit u) { return u == FactUnit::atomic ? "atomic" : "sentence"; }

FactUnit parse_fact_unit(std::string_view s) {
    if (s == "atomic") return FactUnit::atomic;
    if (s == "sentence") return FactUnit::sentence;
    throw std::invalid_argument("unknown fact unit '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Fact scoring
// ---------------------------------------------------------------------------

FactScorer::FactScorer(const RewardEnv& env, const retrieval::LexicalIndex& index, retrieval::Reranker& reranker,
                       FactRewardOptions options, const classify::Classifier* sentence_classifier)
    : env_(env),
      index_(index),
      reranker_(reranker),
      options_(options),
      sentence_classifier_(sentence_classifier) {
    if (options_.sentence_filter && !sentence_classifier_) {
        throw std::invalid_argument("sentence_filter requires a sentence classifier");
    }
}

std::vector<Passage> FactScorer::supports_for(const Instruction& instruction) {
    {
        std::lock_guard lock(mu_);
        if (auto it = supports_.find(instruction.id); it != supports_.end()) return it->second;
    }
    auto supports =
        retrieval::top_supports(index_, instruction.text, reranker_, options_.m_supports, options_.k_retrieve);
    std::lock_guard lock(mu_);
    return supports_.try_emplace(instruction.id, std::move(supports)).first->second;
}

FactRewardDetail FactScorer::score(const Response& response, const Instruction& instruction) {
    if (response.instruction_id != instruction.id) {
        throw std::invalid_argument("fact reward: response " + response.id + " does not answer " + instruction.id);
    }
    FactRewardDetail out;
    out.sentences = split_sentences(response.text);
    const auto supports = supports_for(instruction);

    std::vector<FactCheck> checks;
    for (auto& s : out.sentences) {
        const auto content = s.content();
        if (content.empty()) continue;
        if (options_.sentence_filter) {
            const auto verdict = sentence_classifier_->classify_sentence(content, instruction.text);
            s.fact_based = verdict.label == classify::Label::fact_based;
            if (!*s.fact_based) continue;
        }
        std::vector<std::string> units;
        if (options_.unit == FactUnit::sentence) {
            units.emplace_back(content);
        } else {
            auto d = decompose_facts(content, env_);
            if (d.parse_error) out.decomposition_failures.push_back(s.index);
            units = std::move(d.facts);
        }
        for (auto& u : units) {
            auto rec = verify_claim(u, supports, env_);
            checks.push_back(FactCheck{u, s.index, rec.verdict});
            out.verifications.push_back(std::move(rec));
        }
    }
    out.reward = FactReward::from_checks(std::move(checks));
    return out;
}

FactReward fact_reward(const Response& response, const Instruction& instruction, const RewardEnv& env,
                       const retrieval::LexicalIndex& index, retrieval::Reranker& reranker, FactRewardOptions options,
                       const classify::Classifier* sentence_classifier) {
    options.unit = FactUnit::atomic;
    FactScorer scorer(env, index, reranker, options, sentence_classifier);
    return scorer.score(response, instruction).reward;
}

FactReward sentence_level_reward(const Response& response, const Instruction& instruction, const RewardEnv& env,
                                 const retrieval::LexicalIndex& index, retrieval::Reranker& reranker,
                                 std::size_t m_supports) {
    FactRewardOptions options;
    options.unit = FactUnit::sentence;
    options.m_supports = m_supports;
    FactScorer scorer(env, index, reranker, options);
    return scorer.score(response, instruction).reward;
}

// ---------------------------------------------------------------------------
// Instruction-following judge
// ---------------------------------------------------------------------------

JudgeOutcome if_judge(const Instruction& instruction, const Response& response, const RewardEnv& env, int samples) {
    if (samples < 1 || samples > kJudgeSamples) throw std::invalid_argument("if_judge: samples must be in [1,3]");
    SamplingParams sampling;
    sampling.n_samples = samples;
    sampling.seed = env.seed;
    const auto prompt = prompts::render(env.prompts.get(prompts::kSelfRewarding).text,
                                        {{"instruction", instruction.text}, {"response", response.text}});
    JudgeOutcome out;
    std::vector<double> parsed;
    try {
        const auto replies = env.gateway.cached_complete(
            llm::ChatRequest::user_prompt(env.judge.backend_id, env.judge.model, prompt, sampling));
        for (const auto& r : replies) {
            out.raw_replies.push_back(r.text);
            std::optional<double> v;
            if (r.ok()) v = llm::parse_scalar_score(r.text);
            if (v) {
                parsed.push_back(*v);
            } else {
                ++out.parse_failures;
            }
        }
    } catch (const llm::GatewayError& e) {
        spdlog::warn("judge {}: {}", response.id, e.what());
        out.parse_failures = static_cast<std::size_t>(samples);
    }
    if (parsed.empty()) {
        spdlog::warn("judge failure for response {}: no parseable score", response.id);
        return out;
    }
    out.score = JudgeScore::from_samples(std::move(parsed));
    return out;
}

}  // namespace factalign::rewards
