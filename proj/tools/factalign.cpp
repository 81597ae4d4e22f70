#include <cstdio>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "factalign/pipeline.hpp"

namespace cli = factalign::cli;

int main(int argc, char** argv) {
    CLI::App app{"factalign: factuality-aware alignment data pipeline"};
    app.require_subcommand(1, 1);
    app.fallthrough();

    std::string config_path;
    std::optional<std::int64_t> seed;
    std::optional<std::string> out_dir;
    bool resume = false;
    bool dry_run = false;
    std::string log_level = "info";
    app.add_option("--config", config_path, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "override the configured seed");
    app.add_option("--out", out_dir, "override the output directory");
    app.add_flag("--resume", resume, "skip stages whose inputs are unchanged");
    app.add_flag("--dry-run", dry_run, "print the planned stage graph and exit");
    app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

    std::vector<cli::Stage> stages;
    for (auto s : cli::kAllStages) {
        const std::string name(cli::to_string(s));
        app.add_subcommand(name, "run the " + name + " stage")->callback([&stages, s] { stages = {s}; });
    }
    app.add_subcommand("pipeline", "run every stage in dependency order")->callback([&stages] {
        stages.assign(std::begin(cli::kAllStages), std::end(cli::kAllStages));
    });

    CLI11_PARSE(app, argc, argv);

    auto logger = spdlog::stderr_color_mt("factalign");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::from_str(log_level));
    spdlog::set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");

    cli::RunConfig config;
    try {
        config = cli::RunConfig::load(config_path);
    } catch (const cli::ConfigError& e) {
        std::cerr << e.what() << '\n';
        return 2;
    }

    cli::RunOptions options;
    options.resume = resume;
    options.dry_run = dry_run;
    options.seed = seed;
    if (out_dir) options.out_dir = *out_dir;

    cli::RunResult result;
    try {
        result = cli::run_stages(config, stages, options);
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    if (dry_run) {
        std::cout << result.plan;
        return 0;
    }
    for (const auto& s : result.stages) {
        std::printf("%-9s %-8s %8.0f ms  %s\n", std::string(cli::to_string(s.stage)).c_str(),
                    std::string(cli::to_string(s.status)).c_str(), s.wall_ms, s.message.c_str());
    }
    std::printf("backend calls: %llu\n", static_cast<unsigned long long>(result.backend_calls));
    return result.exit_code;
}
