#pragma once

// Lexical passage retrieval (BM25), pluggable re-ranking, support selection
// for claim verification and instruction similarity for demo selection.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "factalign/core.hpp"
#include "factalign/llm_gateway.hpp"

namespace factalign::retrieval {

inline constexpr std::size_t kDefaultRetrieveK = 20;
inline constexpr std::size_t kDefaultSupports = 10;
inline constexpr std::size_t kDefaultDemos = 5;

/// Lowercased alphanumeric words. Case folding covers ASCII, Latin-1,
/// Latin Extended-A, Greek and Cyrillic; any other non-punctuation code point
/// is kept as a word character unchanged. No stemming, no stopwords.
std::vector<std::string> tokenize(std::string_view text);

struct CorpusStats {
    std::size_t doc_count = 0;
    std::uint64_t total_terms = 0;
    double avg_doc_len = 0.0;
};

struct Corpus {
    std::vector<Passage> passages;
    CorpusStats stats;

    /// Throws InvariantError on an empty corpus, duplicate doc ids or an
    /// invalid passage.
    static Corpus from_passages(std::vector<Passage> passages);
    /// JSONL of {doc_id, title, text}.
    static Corpus load(const std::filesystem::path& path);

    [[nodiscard]] std::string digest() const;
};

struct Bm25Params {
    double k1 = 1.2;
    double b = 0.75;
};

/// Lucene-style non-negative idf: ln(1 + (N - df + 0.5) / (df + 0.5)).
double bm25_idf(std::size_t doc_count, std::size_t doc_freq);

struct Posting {
    std::uint32_t doc = 0;
    std::uint32_t tf = 0;
    bool operator==(const Posting&) const = default;
};

class IndexFormatError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Immutable inverted index. Title and text are both indexed (title first).
class LexicalIndex {
  public:
    static constexpr std::uint32_t kFormatVersion = 1;

    static LexicalIndex build(const Corpus& corpus, Bm25Params params = {});

    /// Top-k documents containing at least one query term, by descending
    /// BM25 score, ties by ascending doc_id.
    [[nodiscard]] std::vector<Passage> search(std::string_view query, std::size_t k = kDefaultRetrieveK) const;

    /// BM25 score of every document (0 for non-matching ones); ordinal order.
    [[nodiscard]] std::vector<double> score_all(std::string_view query) const;

    [[nodiscard]] std::size_t doc_count() const noexcept { return docs_.size(); }
    [[nodiscard]] double avg_doc_len() const noexcept { return avg_doc_len_; }
    [[nodiscard]] std::span<const std::uint32_t> doc_lengths() const noexcept { return doc_lengths_; }
    [[nodiscard]] const Passage& passage(std::size_t ordinal) const { return docs_.at(ordinal); }
    [[nodiscard]] const std::vector<std::string>& terms() const noexcept { return terms_; }
    [[nodiscard]] std::vector<Posting> postings(std::string_view term) const;
    [[nodiscard]] const std::string& built_from() const noexcept { return corpus_digest_; }
    [[nodiscard]] const Bm25Params& params() const noexcept { return params_; }

    void save(const std::filesystem::path& path) const;
    static LexicalIndex load(const std::filesystem::path& path);
    [[nodiscard]] std::string serialize() const;
    static LexicalIndex deserialize(std::string_view bytes);
    [[nodiscard]] std::string digest() const;

  private:
    void finalize();
    [[nodiscard]] std::optional<std::uint32_t> term_id(const std::string& term) const;

    Bm25Params params_;
    std::string corpus_digest_;
    std::vector<Passage> docs_;
    std::vector<std::uint32_t> doc_lengths_;
    double avg_doc_len_ = 0.0;
    std::vector<std::string> terms_;           // sorted
    std::vector<std::uint32_t> term_offsets_;  // CSR: postings of term t are [off[t], off[t+1])
    std::vector<std::uint32_t> post_doc_;
    std::vector<std::uint32_t> post_tf_;

    std::vector<double> length_norm_;  // k1 * (1 - b + b * len / avg)
    std::unordered_map<std::string, std::uint32_t> term_ids_;
};

// ---------------------------------------------------------------------------
// Re-ranking
// ---------------------------------------------------------------------------

class Reranker {
  public:
    virtual ~Reranker() = default;
    [[nodiscard]] virtual std::string_view name() const = 0;
    /// nullopt (or an exception) means scoring failed for this passage.
    virtual std::optional<double> score(std::string_view query, const Passage& passage) = 0;
};

class IdentityReranker final : public Reranker {
  public:
    [[nodiscard]] std::string_view name() const override { return "identity"; }
    std::optional<double> score(std::string_view, const Passage& passage) override {
        return passage.retrieval_score;
    }
};

/// Asks a chat model for a 0-10 relevance rating ("Rating: <n>").
class LlmReranker final : public Reranker {
  public:
    LlmReranker(llm::Gateway& gateway, std::string backend_id, std::string model, std::string prompt_template);

    [[nodiscard]] std::string_view name() const override { return "llm"; }
    std::optional<double> score(std::string_view query, const Passage& passage) override;

  private:
    llm::Gateway& gateway_;
    std::string backend_id_;
    std::string model_;
    std::string template_;
};

/// Stable sort by rerank score, descending. A passage whose scoring fails
/// keeps its retrieval score as rerank score.
std::vector<Passage> rerank(std::string_view query, std::vector<Passage> passages, Reranker& reranker);

/// take(m, rerank(query, search(query, k_retrieve))).
std::vector<Passage> top_supports(const LexicalIndex& index, std::string_view query, Reranker& reranker,
                                  std::size_t m = kDefaultSupports, std::size_t k_retrieve = kDefaultRetrieveK);

/// BM25 over the seed texts; returns min(k, |seeds|) seeds ordered by
/// descending score, ties by ascending id. Throws std::invalid_argument if
/// the query's id is among the seeds.
std::vector<Instruction> similar_instructions(std::span<const Instruction> seeds, const Instruction& query,
                                              std::size_t k = kDefaultDemos);

}  // namespace factalign::retrieval
