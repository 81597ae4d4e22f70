#include "factalign/retrieval.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_set>

#include <spdlog/spdlog.h>

#include "factalign/kernels.hpp"
#include "factalign/prompts.hpp"

namespace factalign::retrieval {

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

namespace {

constexpr char32_t kInvalid = 0xFFFD;

// Decodes one code point at `pos`; malformed sequences yield U+FFFD and
// consume a single byte.
char32_t decode(std::string_view s, std::size_t& pos) {
    const auto b0 = static_cast<unsigned char>(s[pos]);
    if (b0 < 0x80) {
        ++pos;
        return b0;
    }
    int len = 0;
    char32_t cp = 0;
    if ((b0 & 0xE0) == 0xC0) {
        len = 2;
        cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
        len = 3;
        cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
        len = 4;
        cp = b0 & 0x07;
    } else {
        ++pos;
        return kInvalid;
    }
    if (pos + static_cast<std::size_t>(len) > s.size()) {
        ++pos;
        return kInvalid;
    }
    for (int i = 1; i < len; ++i) {
        const auto b = static_cast<unsigned char>(s[pos + static_cast<std::size_t>(i)]);
        if ((b & 0xC0) != 0x80) {
            ++pos;
            return kInvalid;
        }
        cp = (cp << 6) | (b & 0x3F);
    }
    pos += static_cast<std::size_t>(len);
    return cp;
}

void encode(char32_t cp, std::string& out) {
    if (cp < 0x80) {
        out += static_cast<char>(cp);
    } else if (cp < 0x800) {
        out += static_cast<char>(0xC0 | (cp >> 6));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
        out += static_cast<char>(0xE0 | (cp >> 12));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
        out += static_cast<char>(0xF0 | (cp >> 18));
        out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    }
}

bool in(char32_t cp, char32_t lo, char32_t hi) { return cp >= lo && cp <= hi; }

bool is_word_char(char32_t cp) {
    if (cp < 0x80) {
        return (cp >= '0' && cp <= '9') || (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z');
    }
    if (cp == kInvalid) return false;
    if (in(cp, 0x80, 0xBF)) {
        // Latin-1 punctuation and symbols, except ordinal indicators,
        // superscript digits, micro sign and vulgar fractions.
        return cp == 0xAA || cp == 0xB2 || cp == 0xB3 || cp == 0xB5 || cp == 0xB9 || cp == 0xBA ||
               in(cp, 0xBC, 0xBE);
    }
    if (cp == 0xD7 || cp == 0xF7) return false;
    if (in(cp, 0x2000, 0x206F)) return false;  // general punctuation
    if (in(cp, 0x20A0, 0x20CF)) return false;  // currency
    if (in(cp, 0x2190, 0x2BFF)) return false;  // arrows, math operators, box drawing, symbols
    if (in(cp, 0x3000, 0x303F)) return false;  // CJK punctuation
    if (in(cp, 0xFE00, 0xFE0F)) return false;  // variation selectors
    if (in(cp, 0xFE30, 0xFE4F)) return false;
    if (in(cp, 0xFF00, 0xFF0F) || in(cp, 0xFF1A, 0xFF20) || in(cp, 0xFF3B, 0xFF40) || in(cp, 0xFF5B, 0xFF65)) {
        return false;
    }
    if (in(cp, 0x1F000, 0x1FAFF)) return false;  // emoji and pictographs
    return true;
}

char32_t to_lower(char32_t cp) {
    if (cp < 0x80) return (cp >= 'A' && cp <= 'Z') ? cp + 0x20 : cp;
    if (in(cp, 0xC0, 0xDE) && cp != 0xD7) return cp + 0x20;
    if (in(cp, 0x100, 0x17F)) {
        if (cp == 0x130) return 'i';
        if (cp == 0x178) return 0xFF;
        if (in(cp, 0x139, 0x148) || in(cp, 0x179, 0x17E)) return (cp % 2 == 1) ? cp + 1 : cp;
        if (cp == 0x131 || cp == 0x138 || cp == 0x149 || cp == 0x17F) return cp;
        return (cp % 2 == 0) ? cp + 1 : cp;
    }
    if (in(cp, 0x391, 0x3A9) && cp != 0x3A2) return cp + 0x20;
    if (cp == 0x386) return 0x3AC;
    if (in(cp, 0x388, 0x38A)) return cp + 0x25;
    if (cp == 0x38C) return 0x3CC;
    if (in(cp, 0x38E, 0x38F)) return cp + 0x3F;
    if (in(cp, 0x410, 0x42F)) return cp + 0x20;
    if (in(cp, 0x400, 0x40F)) return cp + 0x50;
    if (in(cp, 0x460, 0x481) || in(cp, 0x48A, 0x4BF)) return (cp % 2 == 0) ? cp + 1 : cp;
    return cp;
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const char32_t cp = decode(text, pos);
        if (is_word_char(cp)) {
            encode(to_lower(cp), current);
        } else if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> document_tokens(const Passage& p) {
    auto tokens = tokenize(p.title);
    auto body = tokenize(p.text);
    tokens.insert(tokens.end(), std::make_move_iterator(body.begin()), std::make_move_iterator(body.end()));
    return tokens;
}

}  // namespace

Corpus Corpus::from_passages(std::vector<Passage> passages) {
    if (passages.empty()) throw InvariantError("corpus is empty");
    std::unordered_set<std::string> ids;
    Corpus c;
    for (auto& p : passages) {
        p.validate();
        if (!ids.insert(p.doc_id).second) throw InvariantError("duplicate doc_id " + p.doc_id);
        p.retrieval_score = 0.0;
        p.rerank_score.reset();
        c.stats.total_terms += document_tokens(p).size();
    }
    c.stats.doc_count = passages.size();
    c.stats.avg_doc_len = static_cast<double>(c.stats.total_terms) / static_cast<double>(c.stats.doc_count);
    c.passages = std::move(passages);
    return c;
}

Corpus Corpus::load(const std::filesystem::path& path) {
    auto passages = load_dataset<Passage>(path);
    if (passages.empty()) throw InvariantError("corpus " + path.string() + " is empty");
    return from_passages(std::move(passages));
}

std::string Corpus::digest() const {
    std::string bytes;
    for (const auto& p : passages) {
        const std::array<std::string_view, 3> fields{p.doc_id, p.title, p.text};
        bytes += digest_fields(fields);
    }
    return sha256_hex(bytes);
}

double bm25_idf(std::size_t doc_count, std::size_t doc_freq) {
    const auto n = static_cast<double>(doc_count);
    const auto df = static_cast<double>(doc_freq);
    return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
}

// ---------------------------------------------------------------------------
// Index
// ---------------------------------------------------------------------------

LexicalIndex LexicalIndex::build(const Corpus& corpus, Bm25Params params) {
    if (corpus.passages.empty()) throw InvariantError("cannot index an empty corpus");
    LexicalIndex idx;
    idx.params_ = params;
    idx.corpus_digest_ = corpus.digest();
    idx.docs_ = corpus.passages;

    std::map<std::string, std::vector<Posting>> inverted;
    idx.doc_lengths_.reserve(idx.docs_.size());
    for (std::size_t d = 0; d < idx.docs_.size(); ++d) {
        const auto tokens = document_tokens(idx.docs_[d]);
        idx.doc_lengths_.push_back(static_cast<std::uint32_t>(tokens.size()));
        std::map<std::string_view, std::uint32_t> tf;
        for (const auto& t : tokens) ++tf[t];
        for (const auto& [term, count] : tf) {
            inverted[std::string(term)].push_back({static_cast<std::uint32_t>(d), count});
        }
    }
    idx.term_offsets_.push_back(0);
    for (auto& [term, plist] : inverted) {
        idx.terms_.push_back(term);
        for (const auto& p : plist) {
            idx.post_doc_.push_back(p.doc);
            idx.post_tf_.push_back(p.tf);
        }
        idx.term_offsets_.push_back(static_cast<std::uint32_t>(idx.post_doc_.size()));
    }
    idx.finalize();
    return idx;
}

void LexicalIndex::finalize() {
    std::uint64_t total = 0;
    for (auto len : doc_lengths_) total += len;
    avg_doc_len_ = docs_.empty() ? 0.0 : static_cast<double>(total) / static_cast<double>(docs_.size());
    length_norm_.resize(docs_.size());
    for (std::size_t d = 0; d < docs_.size(); ++d) {
        const double rel = avg_doc_len_ > 0.0 ? static_cast<double>(doc_lengths_[d]) / avg_doc_len_ : 0.0;
        length_norm_[d] = params_.k1 * (1.0 - params_.b + params_.b * rel);
    }
    term_ids_.clear();
    term_ids_.reserve(terms_.size());
    for (std::size_t t = 0; t < terms_.size(); ++t) term_ids_.emplace(terms_[t], static_cast<std::uint32_t>(t));
}

std::optional<std::uint32_t> LexicalIndex::term_id(const std::string& term) const {
    if (auto it = term_ids_.find(term); it != term_ids_.end()) return it->second;
    return std::nullopt;
}

std::vector<Posting> LexicalIndex::postings(std::string_view term) const {
    std::vector<Posting> out;
    if (auto t = term_id(std::string(term))) {
        for (auto i = term_offsets_[*t]; i < term_offsets_[*t + 1]; ++i) out.push_back({post_doc_[i], post_tf_[i]});
    }
    return out;
}

std::vector<double> LexicalIndex::score_all(std::string_view query) const {
    std::vector<double> acc(docs_.size(), 0.0);
    std::map<std::string, std::uint32_t> qtf;
    for (auto& t : tokenize(query)) ++qtf[std::move(t)];
    std::vector<double> contrib;
    for (const auto& [term, count] : qtf) {
        const auto t = term_id(term);
        if (!t) continue;
        const auto begin = term_offsets_[*t];
        const auto len = term_offsets_[*t + 1] - begin;
        const double weight = bm25_idf(docs_.size(), len) * (params_.k1 + 1.0) * static_cast<double>(count);
        contrib.resize(len);
        kernels::bm25_posting_weights(std::span(post_doc_).subspan(begin, len),
                                      std::span(post_tf_).subspan(begin, len), length_norm_, weight, contrib);
        for (std::uint32_t i = 0; i < len; ++i) acc[post_doc_[begin + i]] += contrib[i];
    }
    return acc;
}

std::vector<Passage> LexicalIndex::search(std::string_view query, std::size_t k) const {
    if (k == 0) throw std::invalid_argument("search: k must be at least 1");
    const auto scores = score_all(query);
    std::vector<bool> matched(docs_.size(), false);
    {
        std::unordered_set<std::string> seen;
        for (auto& term : tokenize(query)) {
            if (!seen.insert(term).second) continue;
            if (auto t = term_id(term)) {
                for (auto i = term_offsets_[*t]; i < term_offsets_[*t + 1]; ++i) matched[post_doc_[i]] = true;
            }
        }
    }
    std::vector<std::uint32_t> hits;
    for (std::size_t d = 0; d < docs_.size(); ++d) {
        if (matched[d]) hits.push_back(static_cast<std::uint32_t>(d));
    }
    const auto better = [&](std::uint32_t a, std::uint32_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return docs_[a].doc_id < docs_[b].doc_id;
    };
    const auto take = std::min(k, hits.size());
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(take), hits.end(), better);
    std::vector<Passage> out;
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
        Passage p = docs_[hits[i]];
        p.retrieval_score = scores[hits[i]];
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Persistence: little-endian, length-prefixed strings.
// ---------------------------------------------------------------------------

namespace {

constexpr std::string_view kMagic{"FAIDX\0\0\0", 8};

class Writer {
  public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_ += static_cast<char>((v >> (8 * i)) & 0xFF);
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out_ += static_cast<char>((v >> (8 * i)) & 0xFF);
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        out_ += s;
    }
    void raw(std::string_view s) { out_ += s; }
    std::string take() { return std::move(out_); }

  private:
    std::string out_;
};

class Reader {
  public:
    explicit Reader(std::string_view in) : in_(in) {}
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in_[pos_++])) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_++])) << (8 * i);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const auto n = u32();
        need(n);
        std::string s(in_.substr(pos_, n));
        pos_ += n;
        return s;
    }
    std::string_view raw(std::size_t n) {
        need(n);
        auto s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    [[nodiscard]] bool done() const { return pos_ == in_.size(); }

  private:
    void need(std::size_t n) const {
        if (in_.size() - pos_ < n) throw IndexFormatError("index file is truncated");
    }
    std::string_view in_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string LexicalIndex::serialize() const {
    Writer w;
    w.raw(kMagic);
    w.u32(kFormatVersion);
    w.f64(params_.k1);
    w.f64(params_.b);
    w.str(corpus_digest_);
    w.u32(static_cast<std::uint32_t>(docs_.size()));
    for (std::size_t d = 0; d < docs_.size(); ++d) {
        w.str(docs_[d].doc_id);
        w.str(docs_[d].title);
        w.str(docs_[d].text);
        w.u32(doc_lengths_[d]);
    }
    w.u32(static_cast<std::uint32_t>(terms_.size()));
    for (std::size_t t = 0; t < terms_.size(); ++t) {
        w.str(terms_[t]);
        const auto begin = term_offsets_[t];
        const auto end = term_offsets_[t + 1];
        w.u32(end - begin);
        for (auto i = begin; i < end; ++i) {
            w.u32(post_doc_[i]);
            w.u32(post_tf_[i]);
        }
    }
    return w.take();
}

LexicalIndex LexicalIndex::deserialize(std::string_view bytes) {
    Reader r(bytes);
    if (r.raw(kMagic.size()) != kMagic) throw IndexFormatError("not an index file");
    if (const auto v = r.u32(); v != kFormatVersion) {
        throw IndexFormatError("unsupported index version " + std::to_string(v));
    }
    LexicalIndex idx;
    idx.params_.k1 = r.f64();
    idx.params_.b = r.f64();
    idx.corpus_digest_ = r.str();
    const auto n_docs = r.u32();
    for (std::uint32_t d = 0; d < n_docs; ++d) {
        Passage p;
        p.doc_id = r.str();
        p.title = r.str();
        p.text = r.str();
        idx.docs_.push_back(std::move(p));
        idx.doc_lengths_.push_back(r.u32());
    }
    const auto n_terms = r.u32();
    idx.term_offsets_.push_back(0);
    for (std::uint32_t t = 0; t < n_terms; ++t) {
        idx.terms_.push_back(r.str());
        const auto n_post = r.u32();
        for (std::uint32_t i = 0; i < n_post; ++i) {
            const auto doc = r.u32();
            if (doc >= n_docs) throw IndexFormatError("posting refers to unknown document");
            idx.post_doc_.push_back(doc);
            idx.post_tf_.push_back(r.u32());
        }
        idx.term_offsets_.push_back(static_cast<std::uint32_t>(idx.post_doc_.size()));
    }
    if (!r.done()) throw IndexFormatError("trailing bytes after index");
    idx.finalize();
    return idx;
}

void LexicalIndex::save(const std::filesystem::path& path) const { detail::write_atomically(path, serialize()); }

LexicalIndex LexicalIndex::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IndexFormatError("cannot open index " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return deserialize(ss.str());
}

std::string LexicalIndex::digest() const { return sha256_hex(serialize()); }

// ---------------------------------------------------------------------------
// Re-ranking and supports
// ---------------------------------------------------------------------------

LlmReranker::LlmReranker(llm::Gateway& gateway, std::string backend_id, std::string model,
                         std::string prompt_template)
    : gateway_(gateway),
      backend_id_(std::move(backend_id)),
      model_(std::move(model)),
      template_(std::move(prompt_template)) {}

std::optional<double> LlmReranker::score(std::string_view query, const Passage& passage) {
    static const llm::ScorePatternSet kRating{
        {std::regex(R"((?:rating|score)\s*:\s*([0-9]+(?:\.[0-9]+)?))", std::regex::icase | std::regex::ECMAScript)},
        0.0,
        10.0};
    const auto prompt = prompts::render(template_, {{"query", std::string(query)},
                                                    {"title", passage.title},
                                                    {"text", passage.text}});
    const auto replies = gateway_.cached_complete(
        llm::ChatRequest::user_prompt(backend_id_, model_, prompt, SamplingParams::greedy()));
    if (replies.empty() || !replies.front().ok()) return std::nullopt;
    return llm::parse_scalar_score(replies.front().text, kRating);
}

std::vector<Passage> rerank(std::string_view query, std::vector<Passage> passages, Reranker& reranker) {
    for (auto& p : passages) {
        std::optional<double> s;
        try {
            s = reranker.score(query, p);
        } catch (const std::exception& e) {
            spdlog::warn("rerank: {} failed on {}: {}", reranker.name(), p.doc_id, e.what());
        }
        if (!s || !std::isfinite(*s)) {
            if (!s) spdlog::warn("rerank: {} produced no score for {}; keeping retrieval score", reranker.name(), p.doc_id);
            s = p.retrieval_score;
        }
        p.rerank_score = *s;
    }
    std::stable_sort(passages.begin(), passages.end(),
                     [](const Passage& a, const Passage& b) { return *a.rerank_score > *b.rerank_score; });
    return passages;
}

std::vector<Passage> top_supports(const LexicalIndex& index, std::string_view query, Reranker& reranker,
                                  std::size_t m, std::size_t k_retrieve) {
    auto ranked = rerank(query, index.search(query, k_retrieve), reranker);
    if (ranked.size() > m) ranked.resize(m);
    return ranked;
}

std::vector<Instruction> similar_instructions(std::span<const Instruction> seeds, const Instruction& query,
                                              std::size_t k) {
    for (const auto& s : seeds) {
        if (s.id == query.id) {
            throw std::invalid_argument("similar_instructions: seed set contains the query instruction " + query.id);
        }
    }
    if (seeds.empty() || k == 0) return {};
    if (seeds.size() < k) {
        spdlog::warn("similar_instructions: only {} seeds available for k={}", seeds.size(), k);
    }
    std::vector<Passage> docs;
    docs.reserve(seeds.size());
    for (const auto& s : seeds) docs.push_back(Passage{s.id, "", s.text, 0.0, std::nullopt});
    const auto index = LexicalIndex::build(Corpus::from_passages(std::move(docs)));
    const auto scores = index.score_all(query.text);

    std::vector<std::size_t> order(seeds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    // Index ordinals follow seed order.
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return seeds[a].id < seeds[b].id;
    });
    order.resize(std::min(k, order.size()));
    std::vector<Instruction> out;
    out.reserve(order.size());
    for (auto i : order) out.push_back(seeds[i]);
    return out;
}

}  // namespace factalign::retrieval
