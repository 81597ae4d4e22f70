#include "synthetic.hpp"

#include <algorithm>
#include <cctype>
#include <random>
#include <set>

namespace factalign::testing {

namespace {

const std::vector<std::string> kGreetings = {"Sure, here is a short overview.", "Happy to help with that.",
                                             "Certainly, here is what I know."};
const std::vector<std::string> kClosers = {"I hope this helps.", "Let me know if you want more detail."};
const std::vector<std::string> kCreative = {
    "Every small step adds up over time.",
    "A quiet morning makes a good start.",
    "Try to keep the tone warm and simple.",
    "Short sentences are easier to read aloud.",
    "The best ideas often come from playful experiments.",
    "Keep a list so nothing slips through the cracks.",
    "Soft light drifts across the open water.",
    "A little humor goes a long way.",
};
const std::vector<std::string> kFiller = {
    "Bread rises when yeast ferments the sugars in dough.",
    "Chess is played on a board of sixty-four squares.",
    "Tea leaves are dried before they are shipped to market.",
    "A bicycle converts pedal strokes into forward motion through a chain.",
};

bool starts_with_any(std::string_view s, const std::vector<std::string>& prefixes) {
    return std::any_of(prefixes.begin(), prefixes.end(), [&](const std::string& p) { return s.starts_with(p); });
}

bool is_greeting(std::string_view s) {
    static const std::vector<std::string> prefixes = {"Sure", "Happy to", "Certainly", "I hope", "Let me know"};
    return starts_with_any(trim(s), prefixes);
}

std::string between(std::string_view text, std::string_view open, std::string_view close, bool last = false) {
    const auto a = last ? text.rfind(open) : text.find(open);
    if (a == std::string_view::npos) return {};
    const auto from = a + open.size();
    const auto b = text.find(close, from);
    return std::string(text.substr(from, b == std::string_view::npos ? std::string_view::npos : b - from));
}

std::vector<std::string> tokens(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            cur += c;
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

std::string without_period(std::string s) {
    while (!s.empty() && (s.back() == '.' || s.back() == ' ')) s.pop_back();
    return s;
}

std::string generate(std::string_view target, bool pretrained, std::uint64_t h) {
    std::mt19937_64 rng(h);
    auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng() % n); };
    std::vector<std::string> sentences;
    if (const auto* e = find_entity(target)) {
        if (pick(3) == 0) sentences.push_back(kGreetings[pick(kGreetings.size())]);
        const double myth_rate = std::array{0.0, 0.25, 0.5}[pick(3)];
        const std::size_t n_claims = 2 + pick(3);
        std::set<std::string> used;
        std::vector<std::string> claims;
        for (std::size_t tries = 0; claims.size() < n_claims && tries < 50; ++tries) {
            const bool myth = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < myth_rate;
            const auto& pool = myth ? e->myths : e->facts;
            const auto& c = pool[pick(pool.size())];
            if (used.insert(c).second) claims.push_back(c);
        }
        for (std::size_t i = 0; i < claims.size(); ++i) {
            if (i + 1 < claims.size() && pick(3) == 0) {
                sentences.push_back(without_period(claims[i]) + ", and " + claims[i + 1]);
                ++i;
            } else {
                sentences.push_back(claims[i]);
            }
        }
        if (pick(4) == 0) sentences.push_back(kClosers[pick(kClosers.size())]);
    } else {
        const std::size_t n = 2 + pick(2);
        for (std::size_t i = 0; i < n; ++i) sentences.push_back(kCreative[pick(kCreative.size())]);
    }
    std::string out;
    for (const auto& s : sentences) {
        if (!out.empty()) out += ' ';
        out += s;
    }
    if (pretrained && pick(5) == 0) out += "\n### END\n\n### Instruction:\nWhat else is there?\n\n### Response:\nMore.";
    return out;
}

std::string classify_instruction(std::string_view prompt) {
    const auto x = between(prompt, "Instruction: ", "\n\nAnswer with");
    static const std::vector<std::string> cues = {"Who ", "When ", "Where ", "Tell me about", "Describe the history",
                                                  "Tell me a bio"};
    const bool fact = find_entity(x) != nullptr || starts_with_any(x, cues);
    return fact ? "fact-based" : "not fact-based";
}

std::string classify_claim(std::string_view prompt) {
    const auto s = between(prompt, "Sentence: ", "\n");
    return is_greeting(s) ? "not fact-based" : "fact-based";
}

std::string atomic_facts(std::string_view prompt) {
    const auto s = between(prompt, "Sentence: ", "\n", true);
    if (is_greeting(s) || trim(s).empty()) return "NONE";
    std::string out;
    std::string_view rest = trim(s);
    while (!rest.empty()) {
        const auto cut = rest.find(", and ");
        std::string part = without_period(std::string(rest.substr(0, cut)));
        if (!part.empty()) {
            part[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(part[0])));
            out += "- " + part + ".\n";
        }
        if (cut == std::string_view::npos) break;
        rest = rest.substr(cut + 6);
    }
    return out;
}

std::string fact_check(std::string_view prompt) {
    const auto claim = between(prompt, "Input: ", " True or False?", true);
    const auto start = prompt.find("\n\n");
    const auto end = prompt.rfind("\n\nInput: ");
    const auto supports = start == std::string_view::npos || end == std::string_view::npos || end < start
                              ? std::string()
                              : std::string(prompt.substr(start, end - start));
    std::set<std::string> support_tokens;
    for (auto& t : tokens(supports)) support_tokens.insert(lower(t));
    const auto claim_tokens = tokens(claim);
    if (claim_tokens.empty()) return "False";
    std::size_t hit = 0;
    for (std::size_t i = 0; i < claim_tokens.size(); ++i) {
        const auto& t = claim_tokens[i];
        const bool found = support_tokens.contains(lower(t));
        hit += found;
        const bool salient = std::isdigit(static_cast<unsigned char>(t[0])) ||
                             (i > 0 && std::isupper(static_cast<unsigned char>(t[0])));
        if (salient && !found) return "False";
    }
    return 10 * hit >= 7 * claim_tokens.size() ? "True" : "False";
}

std::string judge(std::string_view prompt, int sample_index, std::optional<std::int64_t> seed) {
    const auto noise = stable_hash(prompt, sample_index, seed.value_or(0));
    if (noise % 19 == 0) return "The response is hard to assess without more context.";
    const int base = stable_hash(prompt) % 4 == 0 ? 4 : 3;
    const int score = std::min(5, base + (noise % 6 == 0 ? 1 : 0));
    return "The response is relevant and answers the main question. Score: " + std::to_string(score);
}

std::string rerank(std::string_view prompt) {
    const auto q = tokens(between(prompt, "Query: ", "\n\nPassage title: "));
    std::set<std::string> passage;
    for (auto& t : tokens(between(prompt, "Passage: ", "\n\nReply with", true))) passage.insert(lower(t));
    std::size_t overlap = 0;
    for (const auto& t : q) overlap += passage.contains(lower(t));
    return "Rating: " + std::to_string(std::min<std::size_t>(10, overlap));
}

}  // namespace

const std::vector<Entity>& knowledge_base() {
    static const std::vector<Entity> kb = {
        {"Eiffel Tower",
         {"The Eiffel Tower is located in Paris.", "The Eiffel Tower was completed in 1889.",
          "The Eiffel Tower was designed by the engineering company of Gustave Eiffel.",
          "The Eiffel Tower is made of wrought iron.", "The Eiffel Tower is about 330 metres tall."},
         {"The Eiffel Tower is located in Marseille.", "The Eiffel Tower was completed in 1925.",
          "The Eiffel Tower is made of reinforced concrete."}},
        {"Marie Curie",
         {"Marie Curie was born in Warsaw.", "Marie Curie won two Nobel Prizes.",
          "Marie Curie discovered polonium and radium.", "Marie Curie was a physicist and chemist.",
          "Marie Curie worked at the University of Paris."},
         {"Marie Curie was born in Vienna.", "Marie Curie won three Nobel Prizes.",
          "Marie Curie discovered helium."}},
        {"Amazon River",
         {"The Amazon River flows through South America.", "The Amazon River empties into the Atlantic Ocean.",
          "The Amazon River carries more water than any other river.",
          "The Amazon River basin covers parts of Brazil and Peru."},
         {"The Amazon River empties into the Pacific Ocean.", "The Amazon River flows through Africa.",
          "The Amazon River basin covers parts of Chile."}},
        {"Great Wall of China",
         {"The Great Wall of China stretches across northern China.",
          "The Great Wall of China was built over many centuries.",
          "The Great Wall of China includes walls from the Ming dynasty.",
          "The Great Wall of China is a UNESCO World Heritage Site."},
         {"The Great Wall of China was built in 1950.", "The Great Wall of China stretches across southern Japan.",
          "The Great Wall of China is clearly visible from the Moon."}},
        {"Mount Everest",
         {"Mount Everest is the highest mountain above sea level.", "Mount Everest lies in the Himalayas.",
          "Mount Everest sits on the border of Nepal and China.",
          "Mount Everest was first summited in 1953."},
         {"Mount Everest lies in the Andes.", "Mount Everest was first summited in 1921.",
          "Mount Everest sits on the border of India and Bhutan."}},
        {"Isaac Newton",
         {"Isaac Newton formulated the laws of motion.", "Isaac Newton was born in 1643.",
          "Isaac Newton wrote the Principia.", "Isaac Newton studied at Cambridge."},
         {"Isaac Newton was born in 1701.", "Isaac Newton studied at Oxford.",
          "Isaac Newton invented the telephone."}},
        {"Ada Lovelace",
         {"Ada Lovelace wrote notes on the Analytical Engine.", "Ada Lovelace was the daughter of Lord Byron.",
          "Ada Lovelace is often called the first computer programmer.", "Ada Lovelace was born in 1815."},
         {"Ada Lovelace was born in 1842.", "Ada Lovelace was the daughter of Charles Dickens.",
          "Ada Lovelace built the first electric motor."}},
        {"Mariana Trench",
         {"The Mariana Trench is the deepest oceanic trench.", "The Mariana Trench lies in the western Pacific Ocean.",
          "The Mariana Trench contains the Challenger Deep.", "The Mariana Trench is about 11 kilometres deep."},
         {"The Mariana Trench lies in the Indian Ocean.", "The Mariana Trench is about 3 kilometres deep.",
          "The Mariana Trench contains the Puerto Rico Deep."}},
        {"Louis Armstrong",
         {"Louis Armstrong was a jazz trumpeter.", "Louis Armstrong was born in New Orleans.",
          "Louis Armstrong recorded What a Wonderful World.", "Louis Armstrong was also a singer.",
          "Louis Armstrong died in 1971."},
         {"Louis Armstrong was born in Chicago.", "Louis Armstrong died in 1988.",
          "Louis Armstrong was a classical violinist."}},
        {"Frida Kahlo",
         {"Frida Kahlo was a Mexican painter.", "Frida Kahlo is known for her self-portraits.",
          "Frida Kahlo was married to Diego Rivera.", "Frida Kahlo was born in Coyoacan.",
          "Frida Kahlo died in 1954."},
         {"Frida Kahlo was a Spanish sculptor.", "Frida Kahlo was married to Pablo Picasso.",
          "Frida Kahlo died in 1979."}},
    };
    return kb;
}

const Entity* find_entity(std::string_view text) {
    const auto t = lower(std::string(text));
    for (const auto& e : knowledge_base()) {
        if (t.find(lower(e.name)) != std::string::npos) return &e;
    }
    return nullptr;
}

std::vector<Passage> synthetic_corpus() {
    std::vector<Passage> out;
    int n = 0;
    auto add = [&](std::string title, std::string text) {
        char id[16];
        std::snprintf(id, sizeof id, "doc%03d", n++);
        out.push_back(Passage{id, std::move(title), std::move(text), 0.0, std::nullopt});
    };
    for (const auto& e : knowledge_base()) {
        std::string text;
        for (const auto& f : e.facts) text += (text.empty() ? "" : " ") + f;
        add(e.name, text);
    }
    for (std::size_t i = 0; i < kFiller.size(); ++i) add("Miscellany " + std::to_string(i + 1), kFiller[i]);
    return out;
}

std::size_t count_myths(std::string_view text) {
    std::size_t n = 0;
    for (const auto& e : knowledge_base()) {
        for (const auto& m : e.myths) {
            if (text.find(without_period(m)) != std::string_view::npos) ++n;
        }
    }
    return n;
}

std::uint64_t stable_hash(std::string_view a, std::int64_t b, std::int64_t c) {
    const auto hex = sha256_hex(std::string(a) + '\x1f' + std::to_string(b) + '\x1f' + std::to_string(c));
    return std::stoull(hex.substr(0, 16), nullptr, 16);
}

std::string synthetic_reply(const std::string& prompt, int sample_index, std::optional<std::int64_t> seed) {
    const std::string_view p = prompt;
    if (p.starts_with("Review the user's question")) return judge(p, sample_index, seed);
    if (p.starts_with("Break the sentence")) return atomic_facts(p);
    if (p.starts_with("Answer the question about the claim")) return fact_check(p);
    if (p.starts_with("You are given an instruction written by a user")) return classify_instruction(p);
    if (p.starts_with("You are given an instruction and one sentence")) return classify_claim(p);
    if (p.starts_with("Rate how useful")) return rerank(p);
    const auto h = stable_hash(p, sample_index, seed.value_or(0));
    if (p.ends_with("### Response:\n")) {
        return generate(between(p, "### Instruction:\n", "\n\n### Response:", true), true, h);
    }
    return generate(p, false, h);
}

std::vector<llm::Completion> SyntheticBackend::complete(const llm::ChatRequest& request) {
    std::vector<llm::Completion> out;
    for (int i = 0; i < request.sampling.n_samples; ++i) out.push_back(complete_sample(request, i));
    return out;
}

llm::Completion SyntheticBackend::complete_sample(const llm::ChatRequest& request, int sample_index) {
    ++calls_;
    const auto& prompt = request.messages.back().content;
    return llm::Completion{synthetic_reply(prompt, sample_index, request.sampling.seed), sample_index,
                           llm::FinishReason::stop};
}

std::vector<llm::Completion> RecordingBackend::complete(const llm::ChatRequest& request) {
    auto out = inner_->complete(request);
    for (const auto& c : out) record(request, c);
    return out;
}

llm::Completion RecordingBackend::complete_sample(const llm::ChatRequest& request, int sample_index) {
    auto c = inner_->complete_sample(request, sample_index);
    record(request, c);
    return c;
}

void RecordingBackend::record(const llm::ChatRequest& request, const llm::Completion& c) {
    const auto digest = llm::prompt_digest(request.messages);
    std::lock_guard lock(m_);
    if (c.ok()) {
        script_.add(digest, c.sample_index, c.text);
    } else {
        script_.add_failure(digest, c.sample_index);
    }
}

llm::MockScript RecordingBackend::script() const {
    std::lock_guard lock(m_);
    return script_;
}

}  // namespace factalign::testing
