#include "factalign/pairs.hpp"

#include <cmath>
#include <set>

#include <spdlog/spdlog.h>

namespace factalign::pairs {

std::string_view to_string(DiscardReason r) {
    switch (r) {
        case DiscardReason::tied_reward: return "tied_reward";
        case DiscardReason::if_gap_exceeded: return "if_gap_exceeded";
        case DiscardReason::below_band: return "below_band";
        case DiscardReason::unscoreable: return "unscoreable";
        case DiscardReason::judge_failure: return "judge_failure";
    }
    return "?";
}

DiscardReason parse_discard_reason(std::string_view s) {
    for (auto r : {DiscardReason::tied_reward, DiscardReason::if_gap_exceeded, DiscardReason::below_band,
                   DiscardReason::unscoreable, DiscardReason::judge_failure}) {
        if (to_string(r) == s) return r;
    }
    throw std::invalid_argument("unknown discard reason '" + std::string(s) + "'");
}

void PairBatch::append(PairBatch&& other) {
    pairs.insert(pairs.end(), std::make_move_iterator(other.pairs.begin()), std::make_move_iterator(other.pairs.end()));
    discarded.insert(discarded.end(), other.discarded.begin(), other.discarded.end());
    for (const auto& [reason, n] : other.rejected_pairs) rejected_pairs[reason] += n;
}

std::size_t PairBatch::paired_instructions() const {
    std::set<std::string_view> ids;
    for (const auto& p : pairs) ids.insert(p.instruction_id);
    return ids.size();
}

void PairingParams::validate() const {
    std::vector<std::string> errors;
    if (!(if_gap > 0)) errors.push_back("if_gap must be positive");
    if (!(enum_band > 0)) errors.push_back("enum_band must be positive");
    if (!(if_weight > 0) || !(fact_weight > 0)) errors.push_back("composite weights must be positive");
    if (errors.empty()) return;
    std::string msg = "invalid pairing parameters:";
    for (const auto& e : errors) msg += " " + e + ";";
    throw std::invalid_argument(msg);
}

namespace {

struct Scored {
    std::size_t index;
    double key;
};

PreferencePair make_pair(const std::string& instruction_id, const Candidate& pos, const Candidate& neg, PairKind kind,
                         double pos_reward, double neg_reward, PairSelection selection) {
    PreferencePair p{instruction_id, pos.response_id, neg.response_id, kind, pos_reward, neg_reward, selection};
    p.validate();
    return p;
}

PairBatch discard(const std::string& instruction_id, DiscardReason reason) {
    PairBatch b;
    b.discarded.push_back({instruction_id, reason});
    return b;
}

// First index of the maximum and of the minimum.
std::pair<std::size_t, std::size_t> arg_extremes(const std::vector<Scored>& s) {
    std::size_t hi = 0;
    std::size_t lo = 0;
    for (std::size_t i = 1; i < s.size(); ++i) {
        if (s[i].key > s[hi].key) hi = i;
        if (s[i].key < s[lo].key) lo = i;
    }
    return {hi, lo};
}

bool both_channels(const Candidate& c) { return c.if_mean.has_value() && c.fact_value.has_value(); }

}  // namespace

PairBatch build_if_pairs(const std::string& instruction_id, std::span<const Candidate> candidates) {
    std::vector<Scored> s;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (candidates[i].if_mean) s.push_back({i, *candidates[i].if_mean});
    }
    if (s.size() < 2) return discard(instruction_id, DiscardReason::judge_failure);
    const auto [hi, lo] = arg_extremes(s);
    if (s[hi].key == s[lo].key) return discard(instruction_id, DiscardReason::tied_reward);
    PairBatch b;
    b.pairs.push_back(make_pair(instruction_id, candidates[s[hi].index], candidates[s[lo].index], PairKind::if_pair,
                                s[hi].key, s[lo].key, PairSelection::max_min));
    return b;
}

PairBatch build_fact_pairs_maxmin(const std::string& instruction_id, std::span<const Candidate> candidates,
                                  const PairingParams& params) {
    std::vector<Scored> s;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (both_channels(candidates[i])) s.push_back({i, *candidates[i].fact_value});
    }
    if (s.size() < 2) return discard(instruction_id, DiscardReason::unscoreable);
    const auto [hi, lo] = arg_extremes(s);
    if (s[hi].key == s[lo].key) return discard(instruction_id, DiscardReason::tied_reward);
    const auto& pos = candidates[s[hi].index];
    const auto& neg = candidates[s[lo].index];
    if (std::abs(*pos.if_mean - *neg.if_mean) > params.if_gap + kThresholdTolerance) {
        return discard(instruction_id, DiscardReason::if_gap_exceeded);
    }
    PairBatch b;
    b.pairs.push_back(
        make_pair(instruction_id, pos, neg, PairKind::fact_pair, s[hi].key, s[lo].key, PairSelection::max_min));
    return b;
}

PairBatch build_fact_pairs_enum(const std::string& instruction_id, std::span<const Candidate> candidates,
                                const PairingParams& params) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (both_channels(candidates[i])) idx.push_back(i);
    }
    if (idx.size() < 2) return discard(instruction_id, DiscardReason::unscoreable);
    PairBatch b;
    for (std::size_t a = 0; a < idx.size(); ++a) {
        for (std::size_t c = a + 1; c < idx.size(); ++c) {
            const auto& x = candidates[idx[a]];
            const auto& y = candidates[idx[c]];
            const double delta = *x.fact_value - *y.fact_value;
            if (std::abs(delta) < params.enum_band - kThresholdTolerance) {
                ++b.rejected_pairs[DiscardReason::below_band];
                continue;
            }
            if (std::abs(*x.if_mean - *y.if_mean) > params.if_gap + kThresholdTolerance) {
                ++b.rejected_pairs[DiscardReason::if_gap_exceeded];
                continue;
            }
            const bool x_wins = delta > 0;
            const auto& pos = x_wins ? x : y;
            const auto& neg = x_wins ? y : x;
            b.pairs.push_back(make_pair(instruction_id, pos, neg, PairKind::fact_pair, *pos.fact_value,
                                        *neg.fact_value, PairSelection::enumeration));
        }
    }
    if (b.pairs.empty()) {
        // Report the furthest filter any pair reached.
        const auto reason = b.rejected_pairs.contains(DiscardReason::if_gap_exceeded) ? DiscardReason::if_gap_exceeded
                                                                                      : DiscardReason::below_band;
        b.discarded.push_back({instruction_id, reason});
    }
    return b;
}

double composite_reward(double if_mean, double fact_value, const PairingParams& params) {
    if (!(if_mean >= 1.0 && if_mean <= 5.0)) throw std::invalid_argument("composite_reward: if_mean outside [1,5]");
    if (!(fact_value >= 0.0 && fact_value <= 1.0)) {
        throw std::invalid_argument("composite_reward: fact_value outside [0,1]");
    }
    return params.if_weight * if_mean + params.fact_weight * fact_value;
}

PairBatch build_composite_pairs(const std::string& instruction_id, std::span<const Candidate> candidates,
                                const PairingParams& params) {
    std::vector<Scored> s;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto& c = candidates[i];
        if (both_channels(c)) s.push_back({i, composite_reward(*c.if_mean, *c.fact_value, params)});
    }
    if (s.size() < 2) return discard(instruction_id, DiscardReason::unscoreable);
    const auto [hi, lo] = arg_extremes(s);
    if (s[hi].key == s[lo].key) return discard(instruction_id, DiscardReason::tied_reward);
    PairBatch b;
    b.pairs.push_back(make_pair(instruction_id, candidates[s[hi].index], candidates[s[lo].index], PairKind::fact_pair,
                                s[hi].key, s[lo].key, PairSelection::composite));
    return b;
}

PairBatch build_bio_fs_pairs(const std::string& instruction_id, std::span<const std::string> response_ids,
                             std::span<const std::optional<double>> fs_values) {
    if (response_ids.size() != fs_values.size()) {
        throw std::invalid_argument("build_bio_fs_pairs: ids and FS values differ in length");
    }
    if (response_ids.size() < 2) throw std::invalid_argument("build_bio_fs_pairs: fewer than two generations");
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < fs_values.size(); ++i) {
        if (fs_values[i]) idx.push_back(i);
    }
    if (idx.size() < 2) return discard(instruction_id, DiscardReason::unscoreable);
    PairBatch b;
    for (std::size_t a = 0; a < idx.size(); ++a) {
        for (std::size_t c = a + 1; c < idx.size(); ++c) {
            const double fx = *fs_values[idx[a]];
            const double fy = *fs_values[idx[c]];
            if (fx == fy) {
                ++b.rejected_pairs[DiscardReason::tied_reward];
                continue;
            }
            const bool x_wins = fx > fy;
            const auto pos = x_wins ? idx[a] : idx[c];
            const auto neg = x_wins ? idx[c] : idx[a];
            b.pairs.push_back(PreferencePair{instruction_id, response_ids[pos], response_ids[neg], PairKind::fact_pair,
                                             *fs_values[pos], *fs_values[neg], PairSelection::factscore_bio});
            b.pairs.back().validate();
        }
    }
    if (b.pairs.empty()) b.discarded.push_back({instruction_id, DiscardReason::tied_reward});
    return b;
}

std::string_view to_string(Strategy s) {
    switch (s) {
        case Strategy::max_min: return "max_min";
        case Strategy::enumeration: return "enumeration";
        case Strategy::composite: return "composite";
    }
    return "?";
}

Strategy parse_strategy(std::string_view s) {
    for (auto v : {Strategy::max_min, Strategy::enumeration, Strategy::composite}) {
        if (to_string(v) == s) return v;
    }
    throw std::invalid_argument("unknown pairing strategy '" + std::string(s) + "'");
}

PairBatch build_fact_pairs(Strategy strategy, const std::string& instruction_id, std::span<const Candidate> candidates,
                           const PairingParams& params) {
    switch (strategy) {
        case Strategy::max_min: return build_fact_pairs_maxmin(instruction_id, candidates, params);
        case Strategy::enumeration: return build_fact_pairs_enum(instruction_id, candidates, params);
        case Strategy::composite: return build_composite_pairs(instruction_id, candidates, params);
    }
    throw std::logic_error("unreachable");
}

Json summarize(const PairBatch& batch, std::size_t candidates) {
    std::map<DiscardReason, std::size_t> counts;
    for (const auto& d : batch.discarded) ++counts[d.reason];
    Json discarded = Json::object();
    for (auto r : {DiscardReason::tied_reward, DiscardReason::if_gap_exceeded, DiscardReason::below_band,
                   DiscardReason::unscoreable, DiscardReason::judge_failure}) {
        discarded[std::string(to_string(r))] = counts[r];
    }
    Json rejected = Json::object();
    for (const auto& [reason, n] : batch.rejected_pairs) rejected[std::string(to_string(reason))] = n;
    return Json{{"pairs", batch.pairs.size()},
                {"candidate_instructions", candidates},
                {"paired_instructions", batch.paired_instructions()},
                {"discarded_instructions", batch.discarded.size()},
                {"discarded_by_reason", discarded},
                {"rejected_pairs_by_reason", rejected}};
}

namespace {

std::vector<DpoRecord> join_texts(const PairBatch& batch, const AssemblyInput& input) {
    std::vector<DpoRecord> out;
    out.reserve(batch.pairs.size());
    for (const auto& p : batch.pairs) {
        const auto x = input.instructions.find(p.instruction_id);
        const auto pos = input.responses.find(p.positive_id);
        const auto neg = input.responses.find(p.negative_id);
        if (x == input.instructions.end() || pos == input.responses.end() || neg == input.responses.end()) {
            throw std::invalid_argument("assemble_dpo_dataset: pair for " + p.instruction_id +
                                        " references an unknown instruction or response");
        }
        out.push_back(DpoRecord{p, x->second.text, pos->second.text, neg->second.text});
    }
    return out;
}

}  // namespace

AssemblyOutput assemble_dpo_dataset(const AssemblyInput& input, const std::filesystem::path& dir,
                                    TrainingManifest base) {
    struct Kind {
        const char* file;
        const std::optional<PairBatch>* batch;
        PairKind kind;
    };
    const Kind kinds[] = {{"dpo_if.jsonl", &input.if_batch, PairKind::if_pair},
                          {"dpo_fact.jsonl", &input.fact_batch, PairKind::fact_pair},
                          {"dpo_bio.jsonl", &input.bio_batch, PairKind::fact_pair}};
    std::size_t total = 0;
    for (const auto& k : kinds) {
        if (*k.batch) total += (*k.batch)->pairs.size();
    }
    if (total == 0) throw std::invalid_argument("assemble_dpo_dataset: no preference pairs to write");

    std::filesystem::create_directories(dir);
    AssemblyOutput out;
    out.manifest = std::move(base);
    out.manifest.sft_files = input.sft_files;
    out.manifest.dpo_files.clear();
    for (const auto& k : kinds) {
        const auto path = dir / k.file;
        if (!*k.batch || (*k.batch)->pairs.empty()) {
            if (std::filesystem::remove(path)) spdlog::info("pairs: removed stale {}", path.string());
            continue;
        }
        save_dataset(join_texts(**k.batch, input), path);
        out.files.push_back(path);
        out.manifest.dpo_files.push_back({k.file, k.kind});
    }
    out.manifest.validate(dir);

    out.summary = Json::object();
    if (input.if_batch) out.summary["if"] = summarize(*input.if_batch, input.if_candidates);
    if (input.fact_batch) out.summary["fact"] = summarize(*input.fact_batch, input.fact_candidates);
    if (input.bio_batch) out.summary["bio"] = summarize(*input.bio_batch, input.bio_batch->paired_instructions() +
                                                                              input.bio_batch->discarded.size());
    const Reference ref;
    out.summary["reference"] = Json{{"if_pairs", ref.if_pairs}, {"fact_pairs", ref.fact_pairs}};

    const auto manifest_path = dir / "training_manifest.json";
    const auto summary_path = dir / "pair_summary.json";
    save_json(Json(out.manifest), manifest_path);
    save_json(out.summary, summary_path);
    out.files.push_back(manifest_path);
    out.files.push_back(summary_path);
    spdlog::info("pairs: {} IF pairs, {} fact pairs (reference scale: {} IF / {} fact)",
                 input.if_batch ? input.if_batch->pairs.size() : 0,
                 input.fact_batch ? input.fact_batch->pairs.size() : 0, ref.if_pairs, ref.fact_pairs);
    return out;
}

}  // namespace factalign::pairs
