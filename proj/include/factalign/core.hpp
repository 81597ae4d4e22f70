#pragma once

// Domain types, JSONL persistence and content hashing shared by every stage.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace factalign {

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Raised when a record breaks one of its type invariants.
class InvariantError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Raised by load_dataset; carries the 1-based line number of the bad record
/// (0 when the failure is not tied to a line, e.g. the file is missing).
class DatasetError : public std::runtime_error {
  public:
    enum class Kind { io, malformed_json, schema_violation, duplicate_id };

    DatasetError(Kind kind, std::size_t line, const std::string& what);

    [[nodiscard]] Kind kind() const noexcept { return kind_; }
    [[nodiscard]] std::size_t line() const noexcept { return line_; }

  private:
    Kind kind_;
    std::size_t line_;
};

// ---------------------------------------------------------------------------
// Enumerations
// ---------------------------------------------------------------------------

enum class InstructionSource { seed_ift, seed_eft, augmented, bio_entity, external };
enum class InstructionKind { fact_based, non_fact_based, unclassified };
enum class ResponseOrigin { human, pt_fewshot, pt_rag, sft_model, external };
enum class Verdict { supported, not_supported, parse_error };
enum class PairKind { if_pair, fact_pair };
enum class PairSelection { max_min, enumeration, composite, factscore_bio };

std::string_view to_string(InstructionSource v);
std::string_view to_string(InstructionKind v);
std::string_view to_string(ResponseOrigin v);
std::string_view to_string(Verdict v);
std::string_view to_string(PairKind v);
std::string_view to_string(PairSelection v);

// Parsers throw std::invalid_argument on unknown names.
InstructionSource parse_instruction_source(std::string_view s);
InstructionKind parse_instruction_kind(std::string_view s);
ResponseOrigin parse_response_origin(std::string_view s);
Verdict parse_verdict(std::string_view s);
PairKind parse_pair_kind(std::string_view s);
PairSelection parse_pair_selection(std::string_view s);

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

/// Lower-case hex SHA-256 of arbitrary bytes.
std::string sha256_hex(std::string_view bytes);

/// SHA-256 of a file's contents; throws DatasetError(io) if unreadable.
std::string file_digest(const std::filesystem::path& path);

/// Stable id for an instruction: SHA-256 over a domain-separated encoding of
/// (source, text), truncated to 128 bits. Throws std::invalid_argument on
/// text that is empty after trimming.
std::string content_id(std::string_view text, InstructionSource source);

/// Digest over an ordered list of length-prefixed fields.
std::string digest_fields(std::span<const std::string_view> fields);

std::string_view trim(std::string_view s);

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct SamplingParams {
    double temperature = 0.7;
    double top_p = 0.9;
    int n_samples = 1;
    std::optional<std::int64_t> seed;
    int max_tokens = 512;

    void validate() const;
    bool operator==(const SamplingParams&) const = default;

    /// Greedy single-sample decoding used by the classifiers.
    static SamplingParams greedy();
};

struct Instruction {
    std::string id;
    std::string text;
    InstructionSource source = InstructionSource::external;
    InstructionKind kind = InstructionKind::unclassified;

    static Instruction make(std::string text, InstructionSource source,
                            InstructionKind kind = InstructionKind::unclassified);
    void validate() const;
    bool operator==(const Instruction&) const = default;
};

/// RM_IF: mean of up to three parsed judge samples on the 1-5 scale.
struct JudgeScore {
    std::vector<double> samples;
    double mean = 0.0;

    /// Throws InvariantError on an empty list or out-of-range sample.
    static JudgeScore from_samples(std::vector<double> samples);
    void validate() const;
    bool operator==(const JudgeScore&) const = default;
};

struct FactCheck {
    std::string fact_text;
    std::size_t sentence_index = 0;
    Verdict verdict = Verdict::parse_error;
    bool operator==(const FactCheck&) const = default;
};

/// RM_fact: proportion of supported atomic facts. `value` is absent when the
/// response produced no facts; such a response is unscoreable.
struct FactReward {
    std::size_t n_facts = 0;
    std::size_t n_correct = 0;
    std::optional<double> value;
    std::vector<FactCheck> per_fact;

    static FactReward from_checks(std::vector<FactCheck> checks);
    [[nodiscard]] bool scoreable() const noexcept { return value.has_value(); }
    [[nodiscard]] std::size_t n_error() const noexcept { return n_facts - n_correct; }
    void validate() const;
    bool operator==(const FactReward&) const = default;
};

struct Response {
    std::string id;
    std::string instruction_id;
    std::string text;
    ResponseOrigin origin = ResponseOrigin::external;
    std::optional<SamplingParams> sampling;
    std::optional<JudgeScore> if_score;
    std::optional<FactReward> fact;

    /// Id over (instruction_id, origin, sample_index, text); two identical
    /// samples for one instruction still receive distinct ids.
    static std::string make_id(std::string_view instruction_id, ResponseOrigin origin,
                               std::size_t sample_index, std::string_view text);
    void validate() const;
    bool operator==(const Response&) const = default;
};

struct PreferencePair {
    std::string instruction_id;
    std::string positive_id;
    std::string negative_id;
    PairKind kind = PairKind::if_pair;
    double pos_reward = 0.0;
    double neg_reward = 0.0;
    PairSelection selection = PairSelection::max_min;

    void validate() const;
    bool operator==(const PreferencePair&) const = default;
};

struct Passage {
    std::string doc_id;
    std::string title;
    std::string text;
    double retrieval_score = 0.0;
    std::optional<double> rerank_score;

    void validate() const;
    bool operator==(const Passage&) const = default;
};

struct DpoFileEntry {
    std::string path;
    PairKind kind = PairKind::if_pair;
    bool operator==(const DpoFileEntry&) const = default;
};

/// Settings handed to an external trainer; nothing here is executed.
struct TrainingManifest {
    std::vector<std::string> sft_files;
    std::vector<DpoFileEntry> dpo_files;
    std::string mixing_policy = "uniform over pair kinds";
    double beta = 0.1;
    double lr = 1e-6;
    double lr_final = 1e-7;
    int steps = 500;
    int sft_batch = 32;
    int dpo_batch = 64;
    int max_seq = 2048;

    /// Every listed file must exist relative to `base`.
    void validate(const std::filesystem::path& base) const;
    bool operator==(const TrainingManifest&) const = default;
};

/// Seed input row: an instruction together with its human-written response.
struct SeedRecord {
    Instruction instruction;
    Response human;
    bool operator==(const SeedRecord&) const = default;
};

/// Output row of the reward stage.
struct RewardRecord {
    std::string response_id;
    std::optional<JudgeScore> if_score;
    std::optional<FactReward> fact;
    bool operator==(const RewardRecord&) const = default;
};

/// Trainer-facing DPO row: ids plus the texts they refer to.
struct DpoRecord {
    PreferencePair pair;
    std::string instruction;
    std::string positive_text;
    std::string negative_text;
    bool operator==(const DpoRecord&) const = default;
};

/// Human-annotated error count for one response.
struct AnnotatedResponse {
    std::string response_id;
    std::size_t human_error_count = 0;
    bool operator==(const AnnotatedResponse&) const = default;
};

// ---------------------------------------------------------------------------
// JSON mapping. Field names match the type definitions exactly.
// ---------------------------------------------------------------------------

void to_json(Json& j, const SamplingParams& v);
void from_json(const Json& j, SamplingParams& v);
void to_json(Json& j, const Instruction& v);
void from_json(const Json& j, Instruction& v);
void to_json(Json& j, const JudgeScore& v);
void from_json(const Json& j, JudgeScore& v);
void to_json(Json& j, const FactCheck& v);
void from_json(const Json& j, FactCheck& v);
void to_json(Json& j, const FactReward& v);
void from_json(const Json& j, FactReward& v);
void to_json(Json& j, const Response& v);
void from_json(const Json& j, Response& v);
void to_json(Json& j, const PreferencePair& v);
void from_json(const Json& j, PreferencePair& v);
void to_json(Json& j, const Passage& v);
void from_json(const Json& j, Passage& v);
void to_json(Json& j, const TrainingManifest& v);
void from_json(const Json& j, TrainingManifest& v);
void to_json(Json& j, const SeedRecord& v);
void from_json(const Json& j, SeedRecord& v);
void to_json(Json& j, const RewardRecord& v);
void from_json(const Json& j, RewardRecord& v);
void to_json(Json& j, const DpoRecord& v);
void from_json(const Json& j, DpoRecord& v);
void to_json(Json& j, const AnnotatedResponse& v);
void from_json(const Json& j, AnnotatedResponse& v);

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

enum class Schema { instruction, seed, response, preference_pair, passage, reward, dpo, annotation };

/// Record id used for duplicate detection; empty means "no identity".
std::string record_key(const Instruction& v);
std::string record_key(const SeedRecord& v);
std::string record_key(const Response& v);
std::string record_key(const PreferencePair& v);
std::string record_key(const Passage& v);
std::string record_key(const RewardRecord& v);
std::string record_key(const DpoRecord& v);
std::string record_key(const AnnotatedResponse& v);

void validate_record(const Instruction& v);
void validate_record(const SeedRecord& v);
void validate_record(const Response& v);
void validate_record(const PreferencePair& v);
void validate_record(const Passage& v);
void validate_record(const RewardRecord& v);
void validate_record(const DpoRecord& v);
void validate_record(const AnnotatedResponse& v);

namespace detail {
std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_atomically(const std::filesystem::path& path, const std::string& bytes);
std::string describe_json_error(const std::exception& e);
}  // namespace detail

/// Reads a JSONL file of `T`. Blank lines are skipped; failures carry the
/// 1-based line number.
template <typename T>
std::vector<T> load_dataset(const std::filesystem::path& path) {
    auto lines = detail::read_lines(path);
    std::vector<T> out;
    out.reserve(lines.size());
    std::vector<std::pair<std::string, std::size_t>> keyed;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const auto line_no = i + 1;
        if (trim(lines[i]).empty()) continue;
        Json j;
        try {
            j = Json::parse(lines[i]);
        } catch (const std::exception& e) {
            throw DatasetError(DatasetError::Kind::malformed_json, line_no,
                               path.string() + ":" + std::to_string(line_no) + ": malformed JSON: " +
                                   detail::describe_json_error(e));
        }
        T rec;
        try {
            if (!j.is_object()) throw InvariantError("expected a JSON object");
            rec = j.get<T>();
            validate_record(rec);
        } catch (const std::exception& e) {
            throw DatasetError(DatasetError::Kind::schema_violation, line_no,
                               path.string() + ":" + std::to_string(line_no) + ": schema violation: " +
                                   detail::describe_json_error(e));
        }
        if (auto key = record_key(rec); !key.empty()) keyed.emplace_back(std::move(key), line_no);
        out.push_back(std::move(rec));
    }
    // Duplicates are reported at the later occurrence.
    std::stable_sort(keyed.begin(), keyed.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    for (std::size_t i = 1; i < keyed.size(); ++i) {
        if (keyed[i].first == keyed[i - 1].first) {
            throw DatasetError(DatasetError::Kind::duplicate_id, keyed[i].second,
                               path.string() + ":" + std::to_string(keyed[i].second) +
                                   ": duplicate id " + keyed[i].first);
        }
    }
    return out;
}

/// Serializes one record per line. All records are validated before anything
/// is written; the file is published atomically.
template <typename T>
std::string serialize_dataset(std::span<const T> records) {
    std::string bytes;
    for (const auto& r : records) {
        validate_record(r);
        Json j = r;
        bytes += j.dump(-1, ' ', false, nlohmann::ordered_json::error_handler_t::strict);
        bytes += '\n';
    }
    return bytes;
}

template <typename T>
void save_dataset(std::span<const T> records, const std::filesystem::path& path) {
    detail::write_atomically(path, serialize_dataset(records));
}

template <typename T>
void save_dataset(const std::vector<T>& records, const std::filesystem::path& path) {
    save_dataset(std::span<const T>(records), path);
}

/// Writes pretty JSON atomically (reports, manifests).
void save_json(const Json& j, const std::filesystem::path& path);
Json load_json(const std::filesystem::path& path);

}  // namespace factalign
