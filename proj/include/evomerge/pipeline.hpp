// Stage orchestration over a fixed workspace layout, plus INI-style
// configuration covering every tunable of the pipeline.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "evomerge/curriculum.hpp"
#include "evomerge/evolution.hpp"
#include "evomerge/model.hpp"
#include "evomerge/tasks.hpp"

namespace evomerge {

struct PipelineConfig {
    uint64_t master_seed = 42;
    std::filesystem::path workspace = "workspace";
    RankPolicy ranking_policy = RankPolicy::score_ascending;
    int exemplars_per_task = 1;
    int eval_threads = 0;  // 0 = hardware concurrency

    TrainConfig sft;            // per-expert seeds override TrainConfig::seed
    EvolutionConfig evolution;  // EvolutionConfig::seed follows master_seed
    DifficultyWeights difficulty;
    SuiteSizes sizes;

    void validate() const;  // throws UsageError
};

PipelineConfig default_pipeline_config();

// Strict INI parser. Sections: [pipeline], [sft], [merge], [difficulty],
// [sizes], [sizes.<task_id>]. Unknown sections or keys are usage errors.
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

// Workspace layout shared by all stages.
struct WorkspacePaths {
    std::filesystem::path root;

    std::filesystem::path datasets() const { return root / "datasets"; }
    std::filesystem::path experts() const { return root / "experts"; }
    std::filesystem::path weak() const { return root / "weak"; }
    std::filesystem::path merged() const { return root / "merged"; }
    std::filesystem::path curriculum() const { return root / "curriculum"; }
    std::filesystem::path reports() const { return root / "reports"; }

    std::filesystem::path registry_file() const { return datasets() / "registry.json"; }
    std::filesystem::path train_file(const std::string& task_id) const {
        return datasets() / (task_id + ".train.jsonl");
    }
    std::filesystem::path test_file(const std::string& task_id) const {
        return datasets() / (task_id + ".test.jsonl");
    }
    std::filesystem::path base_model_file() const { return experts() / "base.emcp"; }
    std::filesystem::path adapter_file(const std::string& task_id) const {
        return experts() / (task_id + ".adapter.emcp");
    }
    std::filesystem::path expert_file(const std::string& task_id) const {
        return experts() / (task_id + ".emcp");
    }
    std::filesystem::path loss_file(const std::string& task_id) const {
        return experts() / (task_id + ".loss.csv");
    }
    std::filesystem::path weak_file(const std::string& task_id) const {
        return weak() / (task_id + ".weak.jsonl");
    }
    std::filesystem::path weak_summary_file() const { return weak() / "summary.csv"; }
    std::filesystem::path group_model_file(const std::string& group) const {
        return merged() / (group + ".emcp");
    }
    std::filesystem::path final_model_file() const { return merged() / "final.emcp"; }
    std::filesystem::path history_file() const { return merged() / "history.csv"; }
    std::filesystem::path recipe_file(const std::string& stage) const {
        return merged() / ("recipe." + stage + ".json");
    }
    std::filesystem::path plan_file() const { return curriculum() / "plan.csv"; }
    std::filesystem::path exemplars_file() const { return curriculum() / "exemplars.txt"; }
    std::filesystem::path eval_file(const std::string& who) const {
        return curriculum() / ("eval." + who + ".csv");
    }
    std::filesystem::path eval_side_by_side_file() const { return curriculum() / "eval.csv"; }
    std::filesystem::path comparison_file() const { return reports() / "comparison.csv"; }
    std::filesystem::path summary_file() const { return reports() / "summary.txt"; }
};

// Pipeline stages. Each stage re-reads its inputs from the workspace, so
// stages can run in separate processes. Missing inputs raise DataError
// naming the stage that produces them.
void run_gen_tasks(const PipelineConfig& config);
void run_train_experts(const PipelineConfig& config);
void run_extract_weak(const PipelineConfig& config);
void run_evolve(const PipelineConfig& config);
void run_curriculum(const PipelineConfig& config);
void run_report(const PipelineConfig& config);

}  // namespace evomerge
