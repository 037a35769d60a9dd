// The 15-task sentiment registry with per-task meta factors, a seeded
// synthetic dataset generator, and prompt construction.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "evomerge/metrics.hpp"

namespace evomerge {

enum class TaskGroup { SC, ABSA, MAST };

std::string group_to_string(TaskGroup group);
TaskGroup group_from_string(const std::string& name);

struct TaskMeta {
    std::string task_id;
    TaskGroup group = TaskGroup::SC;
    int num_classes = 0;   // C
    int diversity = 1;     // V: feature clusters per class
    int complexity = 1;    // Z: aspect-conditioning depth
    int subjectivity = 0;  // S: 1 enables confusable-class label noise
    MetricKind metric = MetricKind::accuracy;
    std::vector<std::string> label_set;  // ordered; size == num_classes
};

// The default 15-task registry: 4 SC, 6 ABSA, 5 MAST tasks with their
// C/V/Z/S factors and per-task metrics.
std::vector<TaskMeta> default_registry();

// Fixed instruction text for a task; unique per task in the default registry.
std::string task_instruction(const TaskMeta& meta);

struct LabeledExample {
    std::string task_id;
    std::string instruction;
    std::string input_text;
    std::optional<std::string> aspect;  // present iff the owning task is ABSA
    std::string gold;
};

struct WeakSet {
    std::string task_id;
    std::vector<LabeledExample> items;
    // True when the expert had no training errors and the set is a held-out
    // training slice instead of genuine misclassifications.
    bool is_fallback = false;
};

struct SizeSpec {
    int train = 1000;
    int test = 200;
};

struct SuiteSizes {
    SizeSpec default_size;
    std::map<std::string, SizeSpec> per_task;

    SizeSpec resolve(const std::string& task_id) const {
        auto it = per_task.find(task_id);
        return it != per_task.end() ? it->second : default_size;
    }
};

struct GenStats {
    int train_label_flips = 0;  // subjectivity flips counted against pre-noise labels
    int test_label_flips = 0;
};

struct TaskDataset {
    std::string task_id;
    std::vector<LabeledExample> train;
    std::vector<LabeledExample> test;
    GenStats stats;
};

struct TaskSuite {
    std::vector<TaskDataset> tasks;  // registry order

    const TaskDataset& by_id(const std::string& task_id) const;
    bool has(const std::string& task_id) const;
};

// Deterministic synthetic data. Features come from Gaussian clusters (V
// clusters per class), quantized into space-separated integer tokens. ABSA
// tasks carry an aspect; when Z > 1 the aspect selects which cluster bank
// determines the gold label. S = 1 flips each label to its nearest
// confusable class with probability 0.1. Labels are class-balanced within
// one item before noise.
TaskSuite generate_task_suite(const std::vector<TaskMeta>& registry, const SuiteSizes& sizes,
                              uint64_t seed);

// Number of quantized feature tokens per input_text.
inline constexpr int kFeatureTokens = 16;
// Quantized token value / kQuantScale recovers the feature.
inline constexpr float kQuantScale = 10.0f;

// Renders the instruction-tuning prompt:
//   [exemplar_block, blank line,] "### Instruction:\n{R}\n",
//   ["### Aspect:\n{A}\n",] "### Input:\n{I}\n### Response:\n"
std::string build_prompt(const std::string& instruction, const std::string& input_text,
                         const std::optional<std::string>& aspect = std::nullopt,
                         const std::optional<std::string>& exemplar_block = std::nullopt);

// JSON Lines I/O; keys: task_id, instruction, input, aspect (null allowed), output.
void write_examples_jsonl(const std::vector<LabeledExample>& examples,
                          const std::filesystem::path& path);
std::vector<LabeledExample> read_examples_jsonl(const std::filesystem::path& path);

void write_registry_json(const std::vector<TaskMeta>& registry, const std::filesystem::path& path);
std::vector<TaskMeta> read_registry_json(const std::filesystem::path& path);

}  // namespace evomerge
