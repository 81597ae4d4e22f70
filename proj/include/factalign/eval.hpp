#pragma once

// Factuality metrics (FS without length penalty, correct/error fact counts),
// reward-model validation by Kendall tau-b, and response length statistics.

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "factalign/core.hpp"
#include "factalign/rewards.hpp"

namespace factalign::eval {

struct FsResult {
    std::optional<double> fs;  // absent: no facts, unscoreable
    std::size_t n_correct = 0;
    std::size_t n_error = 0;  // not_supported + parse_error
};

FsResult factscore(const FactReward& reward);
FsResult factscore(const Response& response, const Instruction& instruction, rewards::FactScorer& scorer);

struct EvalReport {
    std::string dataset_name;
    std::size_t n_instructions = 0;
    std::size_t n_responses = 0;
    double mean_fs = 0.0;  // over scoreable responses
    double mean_correct = 0.0;
    double mean_error = 0.0;
    double mean_length_chars = 0.0;  // over all responses
    std::size_t unscoreable_count = 0;

    [[nodiscard]] std::size_t scoreable_count() const noexcept { return n_responses - unscoreable_count; }
    bool operator==(const EvalReport&) const = default;
};

void to_json(Json& j, const EvalReport& v);
void from_json(const Json& j, EvalReport& v);

/// `rewards[i]` belongs to `responses[i]`.
EvalReport make_report(std::string dataset_name, std::span<const Response> responses,
                       std::span<const FactReward> rewards);

/// Kendall tau is undefined when one list has every value tied.
class UndefinedCorrelation : public std::domain_error {
  public:
    using std::domain_error::domain_error;
};

/// Tie-adjusted tau-b from exact pair counts. Throws std::invalid_argument on
/// a length mismatch or fewer than two items, UndefinedCorrelation when
/// either list is constant.
double kendall_tau(std::span<const double> a, std::span<const double> b);

struct TauReport {
    double tau = 0.0;
    std::size_t n = 0;
    std::string fact_unit;
    std::size_t m_supports = 0;
};

void to_json(Json& j, const TauReport& v);

/// Correlates human error counts with reward-model error counts (keyed by
/// response id). The id sets must match exactly.
TauReport validate_reward_model(std::span<const AnnotatedResponse> annotations,
                                const std::map<std::string, std::size_t>& rm_error_counts,
                                std::string_view fact_unit, std::size_t m_supports);

/// Number of Unicode scalar values in UTF-8 text.
std::size_t unicode_length(std::string_view text);

struct LengthStat {
    double mean = 0.0;
    std::size_t count = 0;
};

/// Mean length per group. Groups without responses are absent.
std::map<std::string, LengthStat> length_stats(std::span<const Response> responses,
                                               const std::function<std::string(const Response&)>& group);

using LengthCells = std::map<std::pair<std::string, std::string>, LengthStat>;  // (row, column)

/// Plain-text table with the given row and column order; a missing cell is
/// shown as "-".
std::string render_length_table(const LengthCells& cells, std::span<const std::string> rows,
                                 std::span<const std::string> cols);

struct MetricDelta {
    std::string metric;
    double a = 0.0;
    double b = 0.0;
    double delta = 0.0;  // a - b
};

struct RunComparison {
    std::string dataset_name;
    std::vector<MetricDelta> deltas;
};

/// Throws std::invalid_argument when the reports cover different datasets.
RunComparison compare_runs(const EvalReport& a, const EvalReport& b);

/// FS is shown on the 0-100 scale.
std::string render_comparison(const RunComparison& c, std::string_view label_a = "A", std::string_view label_b = "B");

std::string render_report(const EvalReport& r);

}  // namespace factalign::eval
