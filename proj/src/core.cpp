#include "factalign/core.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <system_error>

#include <openssl/evp.h>

namespace factalign {

DatasetError::DatasetError(Kind kind, std::size_t line, const std::string& what)
    : std::runtime_error(what), kind_(kind), line_(line) {}

// ---------------------------------------------------------------------------
// Enumerations
// ---------------------------------------------------------------------------

namespace {

template <typename E, std::size_t N>
struct EnumNames {
    std::array<std::pair<E, std::string_view>, N> entries;

    [[nodiscard]] std::string_view name(E v) const {
        for (const auto& [e, n] : entries) {
            if (e == v) return n;
        }
        return "?";
    }

    [[nodiscard]] E parse(std::string_view s, std::string_view what) const {
        for (const auto& [e, n] : entries) {
            if (n == s) return e;
        }
        throw std::invalid_argument("unknown " + std::string(what) + " '" + std::string(s) + "'");
    }
};

constexpr EnumNames<InstructionSource, 5> kSourceNames{{{
    {InstructionSource::seed_ift, "seed_ift"},
    {InstructionSource::seed_eft, "seed_eft"},
    {InstructionSource::augmented, "augmented"},
    {InstructionSource::bio_entity, "bio_entity"},
    {InstructionSource::external, "external"},
}}};

constexpr EnumNames<InstructionKind, 3> kKindNames{{{
    {InstructionKind::fact_based, "fact_based"},
    {InstructionKind::non_fact_based, "non_fact_based"},
    {InstructionKind::unclassified, "unclassified"},
}}};

constexpr EnumNames<ResponseOrigin, 5> kOriginNames{{{
    {ResponseOrigin::human, "human"},
    {ResponseOrigin::pt_fewshot, "pt_fewshot"},
    {ResponseOrigin::pt_rag, "pt_rag"},
    {ResponseOrigin::sft_model, "sft_model"},
    {ResponseOrigin::external, "external"},
}}};

constexpr EnumNames<Verdict, 3> kVerdictNames{{{
    {Verdict::supported, "supported"},
    {Verdict::not_supported, "not_supported"},
    {Verdict::parse_error, "parse_error"},
}}};

constexpr EnumNames<PairKind, 2> kPairKindNames{{{
    {PairKind::if_pair, "if_pair"},
    {PairKind::fact_pair, "fact_pair"},
}}};

constexpr EnumNames<PairSelection, 4> kSelectionNames{{{
    {PairSelection::max_min, "max_min"},
    {PairSelection::enumeration, "enumeration"},
    {PairSelection::composite, "composite"},
    {PairSelection::factscore_bio, "factscore_bio"},
}}};

}  // namespace

std::string_view to_string(InstructionSource v) { return kSourceNames.name(v); }
std::string_view to_string(InstructionKind v) { return kKindNames.name(v); }
std::string_view to_string(ResponseOrigin v) { return kOriginNames.name(v); }
std::string_view to_string(Verdict v) { return kVerdictNames.name(v); }
std::string_view to_string(PairKind v) { return kPairKindNames.name(v); }
std::string_view to_string(PairSelection v) { return kSelectionNames.name(v); }

InstructionSource parse_instruction_source(std::string_view s) { return kSourceNames.parse(s, "source"); }
InstructionKind parse_instruction_kind(std::string_view s) { return kKindNames.parse(s, "kind"); }
ResponseOrigin parse_response_origin(std::string_view s) { return kOriginNames.parse(s, "origin"); }
Verdict parse_verdict(std::string_view s) { return kVerdictNames.parse(s, "verdict"); }
PairKind parse_pair_kind(std::string_view s) { return kPairKindNames.parse(s, "pair kind"); }
PairSelection parse_pair_selection(std::string_view s) { return kSelectionNames.parse(s, "selection"); }

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

namespace {

std::string to_hex(const unsigned char* data, std::size_t n) {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out(n * 2, '0');
    for (std::size_t i = 0; i < n; ++i) {
        out[2 * i] = kDigits[data[i] >> 4];
        out[2 * i + 1] = kDigits[data[i] & 0xF];
    }
    return out;
}

class Sha256 {
  public:
    Sha256() : ctx_(EVP_MD_CTX_new()) {
        if (ctx_ == nullptr || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) {
            EVP_MD_CTX_free(ctx_);
            throw std::runtime_error("SHA-256 initialization failed");
        }
    }
    ~Sha256() { EVP_MD_CTX_free(ctx_); }
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(std::string_view bytes) { EVP_DigestUpdate(ctx_, bytes.data(), bytes.size()); }

    std::string hex() {
        std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_, md.data(), &len);
        return to_hex(md.data(), len);
    }

  private:
    EVP_MD_CTX* ctx_;
};

}  // namespace

std::string sha256_hex(std::string_view bytes) {
    Sha256 h;
    h.update(bytes);
    return h.hex();
}

std::string file_digest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DatasetError(DatasetError::Kind::io, 0, "cannot read " + path.string());
    }
    Sha256 h;
    std::array<char, 1 << 16> buf{};
    while (in) {
        in.read(buf.data(), buf.size());
        h.update(std::string_view(buf.data(), static_cast<std::size_t>(in.gcount())));
    }
    return h.hex();
}

std::string digest_fields(std::span<const std::string_view> fields) {
    Sha256 h;
    for (auto f : fields) {
        const auto len = std::to_string(f.size());
        h.update(len);
        h.update(std::string_view(":", 1));
        h.update(f);
    }
    return h.hex();
}

std::string_view trim(std::string_view s) {
    constexpr std::string_view kWs = " \t\n\r\f\v";
    const auto b = s.find_first_not_of(kWs);
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(kWs);
    return s.substr(b, e - b + 1);
}

std::string content_id(std::string_view text, InstructionSource source) {
    if (trim(text).empty()) throw std::invalid_argument("content_id: text is empty");
    const std::array<std::string_view, 3> fields{"factalign/instruction/v1", to_string(source), text};
    return digest_fields(fields).substr(0, 32);
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

void SamplingParams::validate() const {
    if (!(temperature >= 0.0 && temperature <= 2.0)) throw InvariantError("temperature must lie in [0,2]");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw InvariantError("top_p must lie in (0,1]");
    if (n_samples < 1) throw InvariantError("n_samples must be positive");
    if (max_tokens < 1) throw InvariantError("max_tokens must be positive");
}

SamplingParams SamplingParams::greedy() {
    SamplingParams p;
    p.temperature = 0.0;
    p.top_p = 1.0;
    p.n_samples = 1;
    return p;
}

Instruction Instruction::make(std::string text, InstructionSource source, InstructionKind kind) {
    Instruction x;
    x.id = content_id(text, source);
    x.text = std::move(text);
    x.source = source;
    x.kind = kind;
    return x;
}

void Instruction::validate() const {
    if (trim(text).empty()) throw InvariantError("instruction text is empty");
    if (id != content_id(text, source)) throw InvariantError("instruction id does not match content hash");
}

JudgeScore JudgeScore::from_samples(std::vector<double> samples) {
    JudgeScore s;
    s.samples = std::move(samples);
    double sum = 0.0;
    for (double v : s.samples) sum += v;
    s.mean = s.samples.empty() ? 0.0 : sum / static_cast<double>(s.samples.size());
    s.validate();
    return s;
}

void JudgeScore::validate() const {
    if (samples.empty() || samples.size() > 3) throw InvariantError("judge score needs 1 to 3 samples");
    double sum = 0.0;
    for (double v : samples) {
        if (!(v >= 1.0 && v <= 5.0)) throw InvariantError("judge sample outside [1,5]");
        sum += v;
    }
    if (std::abs(mean - sum / static_cast<double>(samples.size())) > 1e-9) {
        throw InvariantError("judge mean does not match samples");
    }
}

FactReward FactReward::from_checks(std::vector<FactCheck> checks) {
    FactReward r;
    r.per_fact = std::move(checks);
    r.n_facts = r.per_fact.size();
    for (const auto& c : r.per_fact) {
        if (c.verdict == Verdict::supported) ++r.n_correct;
    }
    if (r.n_facts > 0) r.value = static_cast<double>(r.n_correct) / static_cast<double>(r.n_facts);
    return r;
}

void FactReward::validate() const {
    if (n_correct > n_facts) throw InvariantError("n_correct exceeds n_facts");
    if (per_fact.size() != n_facts) throw InvariantError("per_fact length differs from n_facts");
    std::size_t supported = 0;
    for (const auto& c : per_fact) {
        if (c.verdict == Verdict::supported) ++supported;
    }
    if (supported != n_correct) throw InvariantError("n_correct differs from supported verdicts");
    if (n_facts == 0) {
        if (value) throw InvariantError("fact reward value must be absent when there are no facts");
        return;
    }
    if (!value) throw InvariantError("fact reward value missing");
    if (*value != static_cast<double>(n_correct) / static_cast<double>(n_facts)) {
        throw InvariantError("fact reward value is not n_correct / n_facts");
    }
}

std::string Response::make_id(std::string_view instruction_id, ResponseOrigin origin,
                              std::size_t sample_index, std::string_view text) {
    const auto idx = std::to_string(sample_index);
    const std::array<std::string_view, 5> fields{"factalign/response/v1", instruction_id,
                                                 to_string(origin), idx, text};
    return digest_fields(fields).substr(0, 32);
}

void Response::validate() const {
    if (id.empty()) throw InvariantError("response id is empty");
    if (instruction_id.empty()) throw InvariantError("response instruction_id is empty");
    if (origin == ResponseOrigin::human && sampling) {
        throw InvariantError("human responses carry no sampling parameters");
    }
    if (sampling) sampling->validate();
    if (if_score) if_score->validate();
    if (fact) fact->validate();
}

void PreferencePair::validate() const {
    if (instruction_id.empty() || positive_id.empty() || negative_id.empty()) {
        throw InvariantError("preference pair has an empty id");
    }
    if (positive_id == negative_id) throw InvariantError("positive and negative are the same response");
    if (!(pos_reward > neg_reward)) throw InvariantError("pos_reward must strictly exceed neg_reward");
}

void Passage::validate() const {
    if (doc_id.empty()) throw InvariantError("passage doc_id is empty");
    if (trim(text).empty()) throw InvariantError("passage text is empty");
    if (!std::isfinite(retrieval_score)) throw InvariantError("retrieval_score is not finite");
    if (rerank_score && !std::isfinite(*rerank_score)) throw InvariantError("rerank_score is not finite");
}

void TrainingManifest::validate(const std::filesystem::path& base) const {
    for (const auto& f : sft_files) {
        if (!std::filesystem::exists(base / f)) throw InvariantError("manifest lists missing file " + f);
    }
    for (const auto& f : dpo_files) {
        if (!std::filesystem::exists(base / f.path)) throw InvariantError("manifest lists missing file " + f.path);
    }
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

void to_json(Json& j, const SamplingParams& v) {
    j = Json{{"temperature", v.temperature}, {"top_p", v.top_p}, {"n_samples", v.n_samples}};
    if (v.seed) j["seed"] = *v.seed;
    j["max_tokens"] = v.max_tokens;
}

void from_json(const Json& j, SamplingParams& v) {
    v = SamplingParams{};
    v.temperature = j.value("temperature", v.temperature);
    v.top_p = j.value("top_p", v.top_p);
    v.n_samples = j.value("n_samples", v.n_samples);
    if (j.contains("seed") && !j.at("seed").is_null()) v.seed = j.at("seed").get<std::int64_t>();
    v.max_tokens = j.value("max_tokens", v.max_tokens);
}

void to_json(Json& j, const Instruction& v) {
    j = Json{{"id", v.id}, {"text", v.text}, {"source", to_string(v.source)}, {"kind", to_string(v.kind)}};
}

void from_json(const Json& j, Instruction& v) {
    v.text = j.at("text").get<std::string>();
    v.source = j.contains("source") ? parse_instruction_source(j.at("source").get<std::string>())
                                    : InstructionSource::external;
    v.kind = j.contains("kind") ? parse_instruction_kind(j.at("kind").get<std::string>())
                                : InstructionKind::unclassified;
    if (trim(v.text).empty()) throw InvariantError("instruction text is empty");
    v.id = j.contains("id") ? j.at("id").get<std::string>() : content_id(v.text, v.source);
}

void to_json(Json& j, const JudgeScore& v) { j = Json{{"samples", v.samples}, {"mean", v.mean}}; }

void from_json(const Json& j, JudgeScore& v) {
    v.samples = j.at("samples").get<std::vector<double>>();
    v.mean = j.at("mean").get<double>();
}

void to_json(Json& j, const FactCheck& v) {
    j = Json{{"fact_text", v.fact_text}, {"sentence_index", v.sentence_index}, {"verdict", to_string(v.verdict)}};
}

void from_json(const Json& j, FactCheck& v) {
    v.fact_text = j.at("fact_text").get<std::string>();
    v.sentence_index = j.at("sentence_index").get<std::size_t>();
    v.verdict = parse_verdict(j.at("verdict").get<std::string>());
}

void to_json(Json& j, const FactReward& v) {
    j = Json{{"n_facts", v.n_facts}, {"n_correct", v.n_correct}};
    if (v.value) j["value"] = *v.value;
    j["per_fact"] = v.per_fact;
}

void from_json(const Json& j, FactReward& v) {
    v.n_facts = j.at("n_facts").get<std::size_t>();
    v.n_correct = j.at("n_correct").get<std::size_t>();
    v.value.reset();
    if (j.contains("value") && !j.at("value").is_null()) v.value = j.at("value").get<double>();
    v.per_fact = j.at("per_fact").get<std::vector<FactCheck>>();
}

void to_json(Json& j, const Response& v) {
    j = Json{{"id", v.id}, {"instruction_id", v.instruction_id}, {"text", v.text}, {"origin", to_string(v.origin)}};
    if (v.sampling) j["sampling"] = *v.sampling;
    if (v.if_score || v.fact) {
        Json r = Json::object();
        if (v.if_score) r["if_score"] = *v.if_score;
        if (v.fact) r["fact"] = *v.fact;
        j["rewards"] = std::move(r);
    }
}

void from_json(const Json& j, Response& v) {
    v = Response{};
    v.instruction_id = j.at("instruction_id").get<std::string>();
    v.text = j.at("text").get<std::string>();
    v.origin = parse_response_origin(j.at("origin").get<std::string>());
    if (j.contains("sampling") && !j.at("sampling").is_null()) v.sampling = j.at("sampling").get<SamplingParams>();
    v.id = j.contains("id") ? j.at("id").get<std::string>() : Response::make_id(v.instruction_id, v.origin, 0, v.text);
    if (j.contains("rewards")) {
        const auto& r = j.at("rewards");
        if (r.contains("if_score")) v.if_score = r.at("if_score").get<JudgeScore>();
        if (r.contains("fact")) v.fact = r.at("fact").get<FactReward>();
    }
}

void to_json(Json& j, const PreferencePair& v) {
    j = Json{{"instruction_id", v.instruction_id}, {"positive_id", v.positive_id},
             {"negative_id", v.negative_id},       {"kind", to_string(v.kind)},
             {"pos_reward", v.pos_reward},         {"neg_reward", v.neg_reward},
             {"selection", to_string(v.selection)}};
}

void from_json(const Json& j, PreferencePair& v) {
    v.instruction_id = j.at("instruction_id").get<std::string>();
    v.positive_id = j.at("positive_id").get<std::string>();
    v.negative_id = j.at("negative_id").get<std::string>();
    v.kind = parse_pair_kind(j.at("kind").get<std::string>());
    v.pos_reward = j.at("pos_reward").get<double>();
    v.neg_reward = j.at("neg_reward").get<double>();
    v.selection = parse_pair_selection(j.at("selection").get<std::string>());
}

void to_json(Json& j, const Passage& v) {
    j = Json{{"doc_id", v.doc_id}, {"title", v.title}, {"text", v.text}, {"retrieval_score", v.retrieval_score}};
    if (v.rerank_score) j["rerank_score"] = *v.rerank_score;
}

void from_json(const Json& j, Passage& v) {
    v = Passage{};
    v.doc_id = j.at("doc_id").get<std::string>();
    v.title = j.value("title", std::string{});
    v.text = j.at("text").get<std::string>();
    v.retrieval_score = j.value("retrieval_score", 0.0);
    if (j.contains("rerank_score") && !j.at("rerank_score").is_null()) {
        v.rerank_score = j.at("rerank_score").get<double>();
    }
}

void to_json(Json& j, const TrainingManifest& v) {
    Json dpo = Json::array();
    for (const auto& f : v.dpo_files) dpo.push_back(Json{{"path", f.path}, {"kind", to_string(f.kind)}});
    j = Json{{"sft_files", v.sft_files},
             {"dpo_files", std::move(dpo)},
             {"mixing_policy", v.mixing_policy},
             {"recorded_hyperparams",
              Json{{"beta", v.beta},
                   {"lr", v.lr},
                   {"lr_final", v.lr_final},
                   {"steps", v.steps},
                   {"sft_batch", v.sft_batch},
                   {"dpo_batch", v.dpo_batch},
                   {"max_seq", v.max_seq}}}};
}

void from_json(const Json& j, TrainingManifest& v) {
    v = TrainingManifest{};
    v.sft_files = j.at("sft_files").get<std::vector<std::string>>();
    for (const auto& f : j.at("dpo_files")) {
        v.dpo_files.push_back({f.at("path").get<std::string>(), parse_pair_kind(f.at("kind").get<std::string>())});
    }
    v.mixing_policy = j.at("mixing_policy").get<std::string>();
    const auto& h = j.at("recorded_hyperparams");
    v.beta = h.at("beta").get<double>();
    v.lr = h.at("lr").get<double>();
    v.lr_final = h.at("lr_final").get<double>();
    v.steps = h.at("steps").get<int>();
    v.sft_batch = h.at("sft_batch").get<int>();
    v.dpo_batch = h.at("dpo_batch").get<int>();
    v.max_seq = h.at("max_seq").get<int>();
}

void to_json(Json& j, const SeedRecord& v) {
    j = v.instruction;
    j["response"] = v.human.text;
}

void from_json(const Json& j, SeedRecord& v) {
    v.instruction = j.get<Instruction>();
    v.human = Response{};
    v.human.instruction_id = v.instruction.id;
    v.human.text = j.at("response").get<std::string>();
    v.human.origin = ResponseOrigin::human;
    v.human.id = Response::make_id(v.instruction.id, ResponseOrigin::human, 0, v.human.text);
}

void to_json(Json& j, const RewardRecord& v) {
    j = Json{{"response_id", v.response_id}};
    if (v.if_score) j["if_score"] = *v.if_score;
    if (v.fact) j["fact"] = *v.fact;
}

void from_json(const Json& j, RewardRecord& v) {
    v = RewardRecord{};
    v.response_id = j.at("response_id").get<std::string>();
    if (j.contains("if_score")) v.if_score = j.at("if_score").get<JudgeScore>();
    if (j.contains("fact")) v.fact = j.at("fact").get<FactReward>();
}

void to_json(Json& j, const DpoRecord& v) {
    j = Json{{"instruction_id", v.pair.instruction_id},
             {"instruction", v.instruction},
             {"positive_id", v.pair.positive_id},
             {"positive_text", v.positive_text},
             {"negative_id", v.pair.negative_id},
             {"negative_text", v.negative_text},
             {"kind", to_string(v.pair.kind)},
             {"pos_reward", v.pair.pos_reward},
             {"neg_reward", v.pair.neg_reward},
             {"selection", to_string(v.pair.selection)}};
}

void from_json(const Json& j, DpoRecord& v) {
    v.pair = j.get<PreferencePair>();
    v.instruction = j.at("instruction").get<std::string>();
    v.positive_text = j.at("positive_text").get<std::string>();
    v.negative_text = j.at("negative_text").get<std::string>();
}

void to_json(Json& j, const AnnotatedResponse& v) {
    j = Json{{"response_id", v.response_id}, {"human_error_count", v.human_error_count}};
}

void from_json(const Json& j, AnnotatedResponse& v) {
    v.response_id = j.at("response_id").get<std::string>();
    const auto& c = j.at("human_error_count");
    if (!c.is_number_integer() || c.get<std::int64_t>() < 0) {
        throw InvariantError("human_error_count must be a non-negative integer");
    }
    v.human_error_count = c.get<std::size_t>();
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

std::string record_key(const Instruction& v) { return v.id; }
std::string record_key(const SeedRecord& v) { return v.instruction.id; }
std::string record_key(const Response& v) { return v.id; }
std::string record_key(const PreferencePair&) { return {}; }
std::string record_key(const Passage& v) { return v.doc_id; }
std::string record_key(const RewardRecord& v) { return v.response_id; }
std::string record_key(const DpoRecord&) { return {}; }
std::string record_key(const AnnotatedResponse& v) { return v.response_id; }

void validate_record(const Instruction& v) { v.validate(); }
void validate_record(const SeedRecord& v) {
    v.instruction.validate();
    v.human.validate();
    if (v.human.origin != ResponseOrigin::human) throw InvariantError("seed response must be human");
}
void validate_record(const Response& v) { v.validate(); }
void validate_record(const PreferencePair& v) { v.validate(); }
void validate_record(const Passage& v) { v.validate(); }
void validate_record(const RewardRecord& v) {
    if (v.response_id.empty()) throw InvariantError("reward record response_id is empty");
    if (v.if_score) v.if_score->validate();
    if (v.fact) v.fact->validate();
}
void validate_record(const DpoRecord& v) { v.pair.validate(); }
void validate_record(const AnnotatedResponse& v) {
    if (v.response_id.empty()) throw InvariantError("annotation response_id is empty");
}

namespace detail {

std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DatasetError(DatasetError::Kind::io, 0, "cannot open " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(std::move(line));
    }
    return lines;
}

void write_atomically(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DatasetError(DatasetError::Kind::io, 0, "cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw DatasetError(DatasetError::Kind::io, 0, "write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw DatasetError(DatasetError::Kind::io, 0, "cannot publish " + path.string() + ": " + ec.message());
}

std::string describe_json_error(const std::exception& e) {
    std::string msg = e.what();
    // nlohmann prefixes messages with "[json.exception.<kind>.<id>] ".
    if (msg.rfind("[json.exception.", 0) == 0) {
        if (auto p = msg.find("] "); p != std::string::npos) msg = msg.substr(p + 2);
    }
    return msg;
}

}  // namespace detail

void save_json(const Json& j, const std::filesystem::path& path) {
    detail::write_atomically(path, j.dump(2) + "\n");
}

Json load_json(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DatasetError(DatasetError::Kind::io, 0, "cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return Json::parse(ss.str());
    } catch (const std::exception& e) {
        throw DatasetError(DatasetError::Kind::malformed_json, 0,
                           path.string() + ": malformed JSON: " + detail::describe_json_error(e));
    }
}

}  // namespace factalign
