#pragma once

// Run configuration, stage orchestration and the run manifest behind the
// command-line tool.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "factalign/core.hpp"
#include "factalign/llm_gateway.hpp"
#include "factalign/pairs.hpp"

namespace factalign::cli {

namespace fs = std::filesystem;

/// Lists every problem found in a configuration, not just the first.
class ConfigError : public std::runtime_error {
  public:
    explicit ConfigError(std::vector<std::string> problems);
    [[nodiscard]] const std::vector<std::string>& problems() const noexcept { return problems_; }

  private:
    std::vector<std::string> problems_;
};

struct BackendConfig {
    std::string model;
    // Exactly one of the two.
    std::string base_url;
    std::optional<fs::path> mock_script;
    std::string fallback = "error";  // mock miss policy: error | echo | fixed
    std::string fixed_text;
    int timeout_ms = 60000;
    int max_retries = 3;
    int max_in_flight = 8;
    bool supports_n = true;
};

inline constexpr const char* kRoles[] = {"classifier", "base", "policy", "judge", "decomposer", "verifier"};

struct RunConfig {
    fs::path base_dir;  // relative paths in the file resolve against this
    std::int64_t seed = 0;
    fs::path out_dir = "out";
    std::optional<fs::path> cache_dir;
    std::optional<fs::path> prompts_dir;
    std::size_t workers = 4;

    std::map<std::string, BackendConfig> backends;
    std::map<std::string, std::string> roles;  // role -> backend id; "reranker" optional

    struct Inputs {
        fs::path seed;
        fs::path dpo_instructions;
        std::optional<fs::path> bio_instructions;
        std::optional<fs::path> eval_instructions;
        std::optional<fs::path> eval_responses;
        std::optional<fs::path> annotations;
    } inputs;

    struct Retrieval {
        fs::path corpus_path;
        std::size_t k_retrieve = 20;
        std::size_t m_supports = 10;
        std::string reranker = "identity";  // identity | llm
        double k1 = 1.2;
        double b = 0.75;
    } retrieval;

    SamplingParams sampling;

    struct Elicit {
        int sft_samples = 10;
        int dpo_samples = 4;
        int bio_samples = 10;
        std::size_t demos = 5;
        std::string sft_policy = "classifier";
        bool rag = false;
    } elicit;

    struct Rewards {
        bool sentence_filter = false;
        std::string fact_unit = "atomic";
        int judge_samples = 3;
    } rewards;

    pairs::Strategy strategy = pairs::Strategy::max_min;
    pairs::PairingParams pairing;
    TrainingManifest training;
    std::string eval_dataset = "policy";

    /// The parsed document with defaults filled in; hashed for stage keys.
    Json resolved;

    /// Throws ConfigError listing every violation.
    static RunConfig from_json(const Json& doc, const fs::path& base_dir);
    static RunConfig load(const fs::path& path);

    [[nodiscard]] fs::path resolve(const fs::path& p) const { return p.is_absolute() ? p : base_dir / p; }
};

enum class Stage { classify, index, elicit, reward, pairs, eval };
inline constexpr Stage kAllStages[] = {Stage::classify, Stage::index, Stage::elicit,
                                       Stage::reward,   Stage::pairs, Stage::eval};

std::string_view to_string(Stage s);
Stage parse_stage(std::string_view s);
/// Stages whose outputs `s` reads under this configuration.
std::vector<Stage> dependencies(Stage s, const RunConfig& config);
/// Files `s` writes, relative to the output directory.
std::vector<std::string> stage_outputs(Stage s, const RunConfig& config);

struct RunOptions {
    bool resume = false;
    bool dry_run = false;
    std::optional<std::int64_t> seed;
    std::optional<fs::path> out_dir;
    /// Replaces configured backends by id (tests and fixture generation).
    std::map<std::string, std::shared_ptr<llm::Backend>> backend_overrides;
};

enum class StageStatus { ran, skipped, failed, blocked, planned };
std::string_view to_string(StageStatus s);

struct StageOutcome {
    Stage stage = Stage::classify;
    StageStatus status = StageStatus::planned;
    std::string message;
    double wall_ms = 0.0;
};

struct RunResult {
    int exit_code = 0;
    std::vector<StageOutcome> stages;
    std::uint64_t backend_calls = 0;
    std::vector<fs::path> written;  // output files and manifest, in write order
    std::string plan;               // dry-run rendering
    fs::path out_dir;
};

/// Runs the requested stages in dependency order. Without `resume` every
/// requested stage runs; with it a stage whose key (config section, inputs,
/// upstream outputs) matches the manifest and whose outputs are intact is
/// skipped. A failed stage blocks only its dependents.
RunResult run_stages(const RunConfig& config, std::span<const Stage> requested, const RunOptions& options);

RunResult run_pipeline(const RunConfig& config, const RunOptions& options);

inline constexpr const char* kManifestFile = "run_manifest.json";

}  // namespace factalign::cli
