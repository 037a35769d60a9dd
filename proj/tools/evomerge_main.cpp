#include <cstdint>
#include <exception>
#include <functional>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "evomerge/checkpoint.hpp"
#include "evomerge/errors.hpp"
#include "evomerge/pipeline.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

int run_stage(const std::function<void(const evomerge::PipelineConfig&)>& stage,
              const evomerge::PipelineConfig& config) {
    try {
        stage(config);
        return kExitOk;
    } catch (const evomerge::UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const evomerge::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const evomerge::CheckpointError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.kind() == evomerge::CheckpointError::Kind::non_finite ? kExitNumeric
                                                                       : kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"evomerge: train task experts, evolve merge weights, schedule a curriculum"};
    app.require_subcommand(1);

    std::string config_path;
    std::uint64_t seed_override = 0;
    std::string workspace_override;
    app.add_option("--config", config_path, "pipeline config file (INI-style sections)")
        ->option_text("PATH");
    auto* seed_opt =
        app.add_option("--seed", seed_override, "override the master seed")->option_text("N");
    auto* workspace_opt =
        app.add_option("--workspace", workspace_override, "override the workspace directory")
            ->option_text("PATH");

    const std::vector<std::pair<std::string, std::function<void(const evomerge::PipelineConfig&)>>>
        stages = {
            {"gen-tasks", evomerge::run_gen_tasks},
            {"train-experts", evomerge::run_train_experts},
            {"extract-weak", evomerge::run_extract_weak},
            {"evolve", evomerge::run_evolve},
            {"curriculum", evomerge::run_curriculum},
            {"report", evomerge::run_report},
        };
    const std::vector<std::string> descriptions = {
        "generate the synthetic task suite into the workspace",
        "train one low-rank expert per task from the shared base model",
        "collect each expert's misclassified training items",
        "search merge weights in two stages and write the merged models",
        "rank tasks by difficulty, assemble exemplars, and evaluate",
        "summarize merged-vs-base and merged-vs-expert deltas",
    };
    for (size_t i = 0; i < stages.size(); ++i) {
        // Let global flags (--config/--seed/--workspace) appear after the subcommand.
        app.add_subcommand(stages[i].first, descriptions[i])->fallthrough();
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    evomerge::PipelineConfig config;
    try {
        config = config_path.empty() ? evomerge::default_pipeline_config()
                                     : evomerge::load_pipeline_config(config_path);
    } catch (const evomerge::UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    if (seed_opt->count() > 0) {
        config.master_seed = seed_override;
    }
    if (workspace_opt->count() > 0) {
        config.workspace = workspace_override;
    }

    for (const auto& [name, stage] : stages) {
        if (app.got_subcommand(name)) {
            return run_stage(stage, config);
        }
    }
    std::cerr << "error: no subcommand given\n";
    return kExitUsage;
}
