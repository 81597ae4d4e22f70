#include "factalign/eval.hpp"

#include <cmath>
#include <cstdio>
#include <set>

#include "factalign/kernels.hpp"

namespace factalign::eval {

FsResult factscore(const FactReward& reward) {
    return FsResult{reward.value, reward.n_correct, reward.n_error()};
}

FsResult factscore(const Response& response, const Instruction& instruction, rewards::FactScorer& scorer) {
    return factscore(scorer.score(response, instruction).reward);
}

void to_json(Json& j, const EvalReport& v) {
    j = Json{{"dataset_name", v.dataset_name},
             {"n_instructions", v.n_instructions},
             {"n_responses", v.n_responses},
             {"mean_fs", v.mean_fs},
             {"mean_correct", v.mean_correct},
             {"mean_error", v.mean_error},
             {"mean_length_chars", v.mean_length_chars},
             {"unscoreable_count", v.unscoreable_count}};
}

void from_json(const Json& j, EvalReport& v) {
    v.dataset_name = j.at("dataset_name").get<std::string>();
    v.n_instructions = j.at("n_instructions").get<std::size_t>();
    v.n_responses = j.at("n_responses").get<std::size_t>();
    v.mean_fs = j.at("mean_fs").get<double>();
    v.mean_correct = j.at("mean_correct").get<double>();
    v.mean_error = j.at("mean_error").get<double>();
    v.mean_length_chars = j.at("mean_length_chars").get<double>();
    v.unscoreable_count = j.at("unscoreable_count").get<std::size_t>();
}

EvalReport make_report(std::string dataset_name, std::span<const Response> responses,
                       std::span<const FactReward> rewards) {
    if (responses.size() != rewards.size()) throw std::invalid_argument("make_report: one reward per response");
    EvalReport r;
    r.dataset_name = std::move(dataset_name);
    r.n_responses = responses.size();
    std::set<std::string_view> instructions;
    double fs_sum = 0.0;
    double correct_sum = 0.0;
    double error_sum = 0.0;
    double length_sum = 0.0;
    for (std::size_t i = 0; i < responses.size(); ++i) {
        instructions.insert(responses[i].instruction_id);
        length_sum += static_cast<double>(unicode_length(responses[i].text));
        const auto fs = factscore(rewards[i]);
        if (!fs.fs) {
            ++r.unscoreable_count;
            continue;
        }
        fs_sum += *fs.fs;
        correct_sum += static_cast<double>(fs.n_correct);
        error_sum += static_cast<double>(fs.n_error);
    }
    r.n_instructions = instructions.size();
    if (const auto n = r.scoreable_count(); n > 0) {
        r.mean_fs = fs_sum / static_cast<double>(n);
        r.mean_correct = correct_sum / static_cast<double>(n);
        r.mean_error = error_sum / static_cast<double>(n);
    }
    if (r.n_responses > 0) r.mean_length_chars = length_sum / static_cast<double>(r.n_responses);
    return r;
}

double kendall_tau(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("kendall_tau: lists differ in length (" + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()) + ")");
    }
    if (a.size() < 2) throw std::invalid_argument("kendall_tau: need at least two items");
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::isnan(a[i]) || std::isnan(b[i])) throw std::invalid_argument("kendall_tau: NaN input");
    }
    const auto c = kernels::count_pairs(a, b);
    const auto untied_a = c.concordant + c.discordant + c.tied_b_only;
    const auto untied_b = c.concordant + c.discordant + c.tied_a_only;
    if (untied_a == 0 || untied_b == 0) throw UndefinedCorrelation("kendall_tau: every value in one list is tied");
    const double num = static_cast<double>(c.concordant) - static_cast<double>(c.discordant);
    return num / std::sqrt(static_cast<double>(untied_a) * static_cast<double>(untied_b));
}

void to_json(Json& j, const TauReport& v) {
    j = Json{{"tau", v.tau}, {"n", v.n}, {"fact_unit", v.fact_unit}, {"m_supports", v.m_supports}};
}

TauReport validate_reward_model(std::span<const AnnotatedResponse> annotations,
                                const std::map<std::string, std::size_t>& rm_error_counts,
                                std::string_view fact_unit, std::size_t m_supports) {
    std::vector<double> human;
    std::vector<double> rm;
    std::set<std::string_view> seen;
    for (const auto& a : annotations) {
        if (!seen.insert(a.response_id).second) {
            throw std::invalid_argument("validate_reward_model: duplicate annotation for " + a.response_id);
        }
        const auto it = rm_error_counts.find(a.response_id);
        if (it == rm_error_counts.end()) {
            throw std::invalid_argument("validate_reward_model: no reward-model count for " + a.response_id);
        }
        human.push_back(static_cast<double>(a.human_error_count));
        rm.push_back(static_cast<double>(it->second));
    }
    if (seen.size() != rm_error_counts.size()) {
        throw std::invalid_argument("validate_reward_model: reward-model counts include unannotated responses");
    }
    return TauReport{kendall_tau(human, rm), human.size(), std::string(fact_unit), m_supports};
}

std::size_t unicode_length(std::string_view text) {
    std::size_t n = 0;
    for (char c : text) n += (static_cast<unsigned char>(c) & 0xC0) != 0x80;
    return n;
}

std::map<std::string, LengthStat> length_stats(std::span<const Response> responses,
                                               const std::function<std::string(const Response&)>& group) {
    std::map<std::string, std::pair<double, std::size_t>> acc;
    for (const auto& r : responses) {
        auto& [sum, count] = acc[group(r)];
        sum += static_cast<double>(unicode_length(r.text));
        ++count;
    }
    std::map<std::string, LengthStat> out;
    for (const auto& [g, sc] : acc) out[g] = LengthStat{sc.first / static_cast<double>(sc.second), sc.second};
    return out;
}

namespace {

std::string fixed(double v, int decimals, bool sign = false) {
    char buf[64];
    std::snprintf(buf, sizeof buf, sign ? "%+.*f" : "%.*f", decimals, v);
    return buf;
}

std::string pad(std::string_view s, std::size_t width, bool left_align) {
    const auto len = unicode_length(s);
    if (len >= width) return std::string(s);
    const std::string fill(width - len, ' ');
    return left_align ? std::string(s) + fill : fill + std::string(s);
}

std::string render_grid(const std::vector<std::vector<std::string>>& grid) {
    std::vector<std::size_t> widths;
    for (const auto& row : grid) {
        widths.resize(std::max(widths.size(), row.size()), 0);
        for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], unicode_length(row[c]));
    }
    std::string out;
    for (std::size_t r = 0; r < grid.size(); ++r) {
        for (std::size_t c = 0; c < grid[r].size(); ++c) {
            if (c) out += "  ";
            out += pad(grid[r][c], widths[c], c == 0);
        }
        while (!out.empty() && out.back() == ' ') out.pop_back();
        out += '\n';
        if (r == 0) {
            std::size_t total = 0;
            for (auto w : widths) total += w;
            out += std::string(total + 2 * (widths.size() - 1), '-') + '\n';
        }
    }
    return out;
}

}  // namespace

std::string render_length_table(const LengthCells& cells, std::span<const std::string> rows,
                                std::span<const std::string> cols) {
    std::vector<std::vector<std::string>> grid;
    grid.emplace_back();
    grid.back().push_back("");
    for (const auto& c : cols) grid.back().push_back(c);
    for (const auto& r : rows) {
        grid.emplace_back();
        grid.back().push_back(r);
        for (const auto& c : cols) {
            const auto it = cells.find({r, c});
            grid.back().push_back(it == cells.end() || it->second.count == 0 ? "-" : fixed(it->second.mean, 1));
        }
    }
    return render_grid(grid);
}

RunComparison compare_runs(const EvalReport& a, const EvalReport& b) {
    if (a.dataset_name != b.dataset_name) {
        throw std::invalid_argument("compare_runs: reports cover different datasets (" + a.dataset_name + " vs " +
                                    b.dataset_name + ")");
    }
    RunComparison c;
    c.dataset_name = a.dataset_name;
    auto add = [&](std::string metric, double x, double y) { c.deltas.push_back({std::move(metric), x, y, x - y}); };
    add("fs", a.mean_fs, b.mean_fs);
    add("correct", a.mean_correct, b.mean_correct);
    add("error", a.mean_error, b.mean_error);
    add("length", a.mean_length_chars, b.mean_length_chars);
    add("unscoreable", static_cast<double>(a.unscoreable_count), static_cast<double>(b.unscoreable_count));
    return c;
}

std::string render_comparison(const RunComparison& c, std::string_view label_a, std::string_view label_b) {
    std::vector<std::vector<std::string>> grid;
    grid.push_back({c.dataset_name, std::string(label_a), std::string(label_b), "delta"});
    for (const auto& d : c.deltas) {
        const bool fs = d.metric == "fs";
        const double scale = fs ? 100.0 : 1.0;
        const int decimals = d.metric == "unscoreable" ? 0 : 1;
        grid.push_back({d.metric, fixed(d.a * scale, decimals), fixed(d.b * scale, decimals),
                        fixed(d.delta * scale, decimals, true)});
    }
    return render_grid(grid);
}

std::string render_report(const EvalReport& r) {
    std::vector<std::vector<std::string>> grid;
    grid.push_back({"metric", r.dataset_name});
    grid.push_back({"instructions", std::to_string(r.n_instructions)});
    grid.push_back({"responses", std::to_string(r.n_responses)});
    grid.push_back({"FS", fixed(r.mean_fs * 100.0, 1)});
    grid.push_back({"# correct", fixed(r.mean_correct, 1)});
    grid.push_back({"# error", fixed(r.mean_error, 1)});
    grid.push_back({"length", fixed(r.mean_length_chars, 1)});
    grid.push_back({"unscoreable", std::to_string(r.unscoreable_count)});
    return render_grid(grid);
}

}  // namespace factalign::eval
