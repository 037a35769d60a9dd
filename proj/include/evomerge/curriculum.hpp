// Difficulty scoring over task metadata, curriculum ordering, exemplar-block
// assembly, and prompt-driven evaluation through a pluggable inference
// adapter.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "evomerge/metrics.hpp"
#include "evomerge/model.hpp"
#include "evomerge/tasks.hpp"

namespace evomerge {

// Linear difficulty weights over (C, V, Z, S).
struct DifficultyWeights {
    double w1 = 1.0;  // class count C
    double w2 = 0.5;  // diversity V
    double w3 = 2.0;  // complexity Z
    double w4 = 5.0;  // subjectivity S
};

// w1*C + w2*V + w3*Z + w4*S.
double difficulty_score(const TaskMeta& meta, const DifficultyWeights& w);

// score_ascending sorts by score (stable; registry order breaks ties).
// published applies the fixed rank table for the default registry, which is
// not a pure score sort.
enum class RankPolicy { score_ascending, published };

std::string rank_policy_to_string(RankPolicy policy);
RankPolicy rank_policy_from_string(const std::string& name);

struct PlanEntry {
    std::string task_id;
    double score = 0.0;
    int rank = 0;  // 1-based, consecutive
};

struct CurriculumPlan {
    std::vector<PlanEntry> entries;  // rank order
    RankPolicy policy = RankPolicy::score_ascending;
};

CurriculumPlan rank_tasks(const std::vector<TaskMeta>& registry, const DifficultyWeights& w,
                          RankPolicy policy);

// CSV rows in plan order: task_id,C,V,Z,S,score,rank,policy.
void write_plan_csv(const CurriculumPlan& plan, const std::vector<TaskMeta>& registry,
                    const std::filesystem::path& path);

// For each task in plan order, takes the first k items of a seed-shuffled
// copy of its train split and renders each as the task prompt with the gold
// output appended; blocks join with "\n---\n".
std::string assemble_exemplars(const CurriculumPlan& plan, const TaskSuite& suite, int k,
                               uint64_t seed);

// exemplar_block + "\n\n" + the task prompt for example.
std::string curriculum_prompt(const TaskMeta& meta, const LabeledExample& example,
                              const std::string& exemplar_block);

// Text-in/text-out inference: prompt string to response label. A real LLM
// endpoint can satisfy this contract.
using InferenceAdapter = std::function<std::string(const std::string& prompt)>;

// Wraps a model: parses the trailing query section of the prompt, routes by
// instruction text, encodes, and predicts.
InferenceAdapter make_model_adapter(Model model, Codec codec);

// Routes each query to the model registered for its task.
InferenceAdapter make_router_adapter(std::map<std::string, Model> experts, Codec codec);

struct CurriculumEvalResult {
    std::vector<EvalReport> reports;                 // plan order; failed tasks omitted
    std::map<std::string, std::string> task_errors;  // task_id -> failure message
};

// Evaluates each task's test split in plan order with the task's own metric.
// An adapter failure is recorded per task and the run continues. An empty
// exemplar_block evaluates plain (no-exemplar) prompts.
CurriculumEvalResult run_curriculum_eval(const CurriculumPlan& plan, const TaskSuite& suite,
                                         const Codec& codec, const std::string& exemplar_block,
                                         const InferenceAdapter& adapter);

}  // namespace evomerge
